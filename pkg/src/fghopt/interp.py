"""Reference interpreter: expression evaluation over the active domain,
naive fixpoint iteration of the immediate-consequence operator, and the
generalized semi-naive loop with its difference operator."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .ir import (
  Arith, BoolCast, Cast, Cmp, Const, Expr, Fn, IConst, IfThenElse, Instance, Plus,
  Program, RelAtom, RelPred, Rule, Stratum, Sum, Times, ValueTerm, Var,
  _CMP_EVAL, active_domain, copy_instance, desugar, eval_term, fresh_var,
  instance_equal, subst_pred, subst_term, term_vars)
from .semiring import BOT, INF, Semiring, Value, get_semiring

NATBOT = get_semiring("natbot")


class EvalError(Exception):
  pass


def _truth(rel: str, key, inst: Instance, program: Program) -> bool:
  sr = program.rel_semiring(rel)
  zero = sr.zero if sr is not None else False
  return inst.get(rel, {}).get(key, zero) != zero


def _lookup(rel: str, key, inst: Instance, program: Program, sr: Semiring):
  rel_sr = program.rel_semiring(rel)
  if rel_sr is None:
    rel_sr = sr
  v = inst.get(rel, {}).get(key, rel_sr.zero)
  if rel_sr.name == sr.name:
    return v
  if rel_sr.name == "bool":
    return sr.cast(v)
  if rel_sr.name == "trop" and sr.name == "maxnat":
    return v
  raise EvalError(f"relation {rel} over {rel_sr.name} used in {sr.name} context")


def _apply_fn(name: str, vals: list) -> Value:
  if any(v is BOT for v in vals):
    return BOT
  if name == "sub":
    a, b = vals
    if a is INF:
      return INF
    if b is INF:
      return BOT
    return a - b if a >= b else 0  # monus keeps the carrier nonnegative
  if name == "div":
    a, b = vals
    if b == 0 or b is INF:
      # comprehension semantics: a term with an empty denominator is absent
      return 0
    if a is INF:
      return INF
    q = Fraction(a) / Fraction(b)
    return int(q) if q.denominator == 1 else q
  raise EvalError(f"unknown function {name}")


def _eq_solutions(v: str, body: Expr, env: dict[str, int]) -> set:
  """Values of the summation binder forced by equality guards in the body,
  so sums behave as over the full domain even when an equality names a value
  outside the active domain (e.g. [d = d1 + d2])."""
  from .ir import linearize
  out: set = set()

  def solve(l, r):
    lin = linearize(Arith("-", l, r))
    if lin is None:
      return
    const, coeffs = lin
    a = coeffs.get(v)
    if a not in (1, -1):
      return
    val = -const * a
    for k, c in coeffs.items():
      if k == v:
        continue
      if k not in env or not isinstance(env[k], (int, Fraction)):
        return
      val -= c * a * env[k]
    out.add(val)

  def walk(e):
    match e:
      case Cast(Cmp("=", l, r)):
        solve(l, r)
      case Plus(l, r) | Times(l, r):
        walk(l)
        walk(r)
      case Sum(_, b) | BoolCast(b):
        walk(b)
      case IfThenElse(p, t, f):
        match p:
          case Cmp("=", l, r):
            solve(l, r)
        walk(t)
        walk(f)
      case Fn(_, args):
        for a in args:
          walk(a)
      case _:
        pass

  walk(body)
  return out


def eval_expr(e: Expr, program: Program, inst: Instance, env: dict[str, int],
              sr: Semiring, adom: list[int]) -> Value:
  match e:
    case RelAtom(rel, args):
      key = tuple(eval_term(a, env) for a in args)
      return _lookup(rel, key, inst, program, sr)
    case Plus(l, r):
      return sr.plus(eval_expr(l, program, inst, env, sr, adom),
                     eval_expr(r, program, inst, env, sr, adom))
    case Times(l, r):
      return sr.times(eval_expr(l, program, inst, env, sr, adom),
                      eval_expr(r, program, inst, env, sr, adom))
    case Sum(v, body):
      acc = sr.zero
      env2 = dict(env)
      for d in sorted(set(adom) | _eq_solutions(v, body, env)):
        env2[v] = d
        acc = sr.plus(acc, eval_expr(body, program, inst, env2, sr, adom))
      return acc
    case Cast(Cmp(op, l, r)):
      return sr.cast(_CMP_EVAL[op](eval_term(l, env), eval_term(r, env)))
    case Cast(RelPred(rel, args)):
      key = tuple(eval_term(a, env) for a in args)
      return sr.cast(_truth(rel, key, inst, program))
    case Const(v):
      return v
    case ValueTerm(t):
      v = eval_term(t, env)
      if isinstance(v, (int, Fraction)) and v < 0:
        raise EvalError(f"negative value {v} outside the carrier")
      return v
    case Fn(name, args):
      return _apply_fn(name, [eval_expr(a, program, inst, env, sr, adom)
                              for a in args])
    case IfThenElse(p, t, f):
      match p:
        case Cmp(op, l, r):
          cond = _CMP_EVAL[op](eval_term(l, env), eval_term(r, env))
        case RelPred(rel, args):
          key = tuple(eval_term(a, env) for a in args)
          cond = _truth(rel, key, inst, program)
      return eval_expr(t if cond else f, program, inst, env, sr, adom)
    case BoolCast(b):
      from .semiring import BOOL
      return sr.cast(eval_expr(b, program, inst, env, BOOL, adom))
  raise TypeError(e)


# ---------------------------------------------------------------------------
# Flattening into sum-of-products form used by the join evaluator

@dataclass
class FlatTerm:
  bound: list[str]
  factors: list[Expr]


def flatten(e: Expr, sr: Semiring) -> list[FlatTerm]:
  e = desugar(e, sr)

  def go(e: Expr) -> list[FlatTerm]:
    match e:
      case Plus(l, r):
        return go(l) + go(r)
      case Times(l, r):
        out = []
        for t1 in go(l):
          for t2 in go(r):
            ren = {v: Var(fresh_var("j")) for v in t2.bound}
            f2 = [_subst_factor(f, ren) for f in t2.factors]
            out.append(FlatTerm(t1.bound + [ren[v].name for v in t2.bound],
                                t1.factors + f2))
        return out
      case Sum(v, body):
        out = []
        for t in go(body):
          nv = fresh_var("j")
          ren = {v: Var(nv)}
          out.append(FlatTerm([nv] + t.bound,
                              [_subst_factor(f, ren) for f in t.factors]))
        return out
      case _:
        return [FlatTerm([], [e])]

  return go(e)


def _subst_factor(f: Expr, env) -> Expr:
  from .ir import substitute
  return substitute(f, env)


def _factor_vars(f: Expr) -> set[str]:
  from .ir import free_vars
  return free_vars(f)


# ---------------------------------------------------------------------------
# Join-based evaluation of one flattened term

def _join_safe(sr: Semiring, terms: list[FlatTerm]) -> bool:
  if sr.annihilating:
    return True
  if sr.name == "natbot":
    # with only casts, value terms and non-bottom constants, no factor can be
    # bottom, so a zero factor really annihilates the product.
    for t in terms:
      for f in t.factors:
        match f:
          case Cast(_) | ValueTerm(_) | BoolCast(_):
            pass
          case Const(v) if v is not BOT:
            pass
          case _:
            return False
    return True
  return False


class _Joiner:
  def __init__(self, program: Program, inst: Instance, sr: Semiring,
               adom: list[int]):
    self.program = program
    self.inst = inst
    self.sr = sr
    self.adom = adom
    self._indexes: dict = {}

  def _index(self, rel: str, positions: tuple[int, ...]):
    key = (rel, positions)
    idx = self._indexes.get(key)
    if idx is None:
      idx = {}
      for tup, val in self.inst.get(rel, {}).items():
        k = tuple(tup[i] for i in positions)
        idx.setdefault(k, []).append((tup, val))
      self._indexes[key] = idx
    return idx

  def eval_term_map(self, ft: FlatTerm, head_vars: tuple[str, ...]):
    """Evaluate one sum-of-products term for all bindings of head_vars,
    returning {head_key: value}."""
    out: dict = {}
    sr = self.sr
    needed = list(head_vars) + [v for v in ft.bound if v not in head_vars]

    def emit(env, val):
      if val == sr.zero:
        return
      key = tuple(env[v] for v in head_vars)
      out[key] = sr.plus(out.get(key, sr.zero), val)

    def rec(env: dict, remaining: list[Expr], val):
      if val == sr.zero:
        return
      # evaluate everything already fully bound
      rem = []
      for f in remaining:
        fv = _factor_vars(f)
        if fv <= env.keys():
          val = sr.times(val, eval_expr(f, self.program, self.inst, env, sr,
                                        self.adom))
          if val == sr.zero:
            return
        else:
          rem.append(f)
      if not rem:
        unbound = [v for v in needed if v not in env]
        if not unbound:
          emit(env, val)
          return
        # variables no remaining factor mentions: head vars range over the
        # domain; dead summation binders multiply the value by |domain|.
        v = unbound[0]
        if v in head_vars:
          for d in self.adom:
            rec({**env, v: d}, [], val)
        else:
          if sr.idempotent:
            rec({**env, v: 0}, [], val)
          else:
            acc = sr.zero
            for _ in self.adom:
              acc = sr.plus(acc, val)
            if acc != sr.zero:
              rec({**env, v: 0}, [], acc)
        return

      # try an equality that binds a variable
      for i, f in enumerate(rem):
        match f:
          case Cast(Cmp("=", l, r)):
            lv, rv = term_vars(l), term_vars(r)
            rest = rem[:i] + rem[i + 1:]
            if isinstance(l, Var) and l.name not in env and rv <= env.keys():
              rec({**env, l.name: eval_term(r, env)}, rest, val)
              return
            if isinstance(r, Var) and r.name not in env and lv <= env.keys():
              rec({**env, r.name: eval_term(l, env)}, rest, val)
              return

      # pick the best relation factor to iterate
      best = None
      for i, f in enumerate(rem):
        match f:
          case RelAtom(rel, args) | Cast(RelPred(rel, args)):
            plan = self._atom_plan(args, env)
            if plan is None:
              continue
            score = (plan["n_bound"], -len(plan["binders"]))
            if best is None or score > best[0]:
              best = (score, i, f, rel, args, plan)
      if best is not None:
        _, i, f, rel, args, plan = best
        rest = rem[:i] + rem[i + 1:]
        is_cast = isinstance(f, Cast)
        idx = self._index(rel, tuple(plan["bound_pos"]))
        probe = tuple(eval_term(args[p], env) for p in plan["bound_pos"])
        for tup, tval in idx.get(probe, []):
          env2 = dict(env)
          ok = True
          for p, vname, shift in plan["binders"]:
            want = tup[p] - shift
            if vname in env2:
              if env2[vname] != want:
                ok = False
                break
            else:
              env2[vname] = want
          if not ok:
            continue
          # re-check positions that were not plain binders or bound probes
          for p in plan["check_pos"]:
            fv = term_vars(args[p])
            if fv <= env2.keys():
              if eval_term(args[p], env2) != tup[p]:
                ok = False
                break
            else:
              ok = False
              break
          if not ok:
            continue
          fval = sr.cast(True) if is_cast else _lookup(
            rel, tup, self.inst, self.program, sr)
          if is_cast:
            rel_sr = self.program.rel_semiring(rel)
            if rel_sr is not None and tval == rel_sr.zero:
              continue
          rec(env2, rest, sr.times(val, fval))
        return

      # last resort: enumerate an unbound variable over the domain
      for f in rem:
        for v in sorted(_factor_vars(f)):
          if v not in env:
            for d in self.adom:
              rec({**env, v: d}, rem, val)
            return
      raise EvalError("stuck join")

    rec({}, list(ft.factors), sr.one)
    return out

  def _atom_plan(self, args, env):
    """Classify argument positions of an atom for index-based iteration."""
    bound_pos, binders, check_pos = [], [], []
    seen_binders = set()
    n_bound = 0
    for p, a in enumerate(args):
      fv = term_vars(a)
      if fv <= env.keys():
        bound_pos.append(p)
        n_bound += 1
        continue
      match a:
        case Var(name) if name not in seen_binders:
          binders.append((p, name, 0))
          seen_binders.add(name)
          continue
        case Arith("+", Var(name), IConst(c)) if name not in env and name not in seen_binders:
          binders.append((p, name, c))
          seen_binders.add(name)
          continue
        case Arith("-", Var(name), IConst(c)) if name not in env and name not in seen_binders:
          binders.append((p, name, -c))
          seen_binders.add(name)
          continue
      check_pos.append(p)
    # positions that are neither probe nor binder must be checkable once the
    # binder variables are set, otherwise this atom cannot drive the join
    binder_names = {name for _, name, _ in binders}
    for p in check_pos:
      if not term_vars(args[p]) <= (env.keys() | binder_names):
        return None
    return {"bound_pos": bound_pos, "binders": binders,
            "check_pos": check_pos, "n_bound": n_bound}


# ---------------------------------------------------------------------------
# Immediate consequence and fixpoints

def apply_ico(stratum: Stratum, program: Program, inst: Instance,
              adom: list[int]) -> Instance:
  """One application of the immediate-consequence operator for a stratum:
  every IDB is recomputed from the bodies, multiple rules for one head are
  plus-combined."""
  sr = stratum.semiring
  new: Instance = {rel: {} for rel in stratum.idbs}
  joiner = _Joiner(program, inst, sr, adom)
  for rule in stratum.rules:
    terms = flatten(rule.body, sr)
    target = new[rule.head_rel]
    if _join_safe(sr, terms):
      for ft in terms:
        fv = set().union(*(_factor_vars(f) for f in ft.factors)) if ft.factors else set()
        extra = fv - set(rule.head_vars) - set(ft.bound)
        if extra:
          raise EvalError(f"unbound variables {extra} in rule {rule}")
        for key, val in joiner.eval_term_map(ft, rule.head_vars).items():
          target[key] = sr.plus(target.get(key, sr.zero), val)
    else:
      k = len(rule.head_vars)
      env: dict[str, int] = {}
      import itertools as _it
      for key in _it.product(adom, repeat=k):
        for v, d in zip(rule.head_vars, key):
          env[v] = d
        val = eval_expr(rule.body, program, inst, env, sr, adom)
        if val != sr.zero:
          target[key] = sr.plus(target.get(key, sr.zero), val)
  for rel in list(new):
    new[rel] = {k: v for k, v in new[rel].items() if v != sr.zero}
  return new


@dataclass
class FixpointResult:
  instance: Instance
  iterations: int
  converged: bool


def naive_fixpoint(stratum: Stratum, program: Program, inst: Instance,
                   max_iters: Optional[int] = None,
                   extra_domain=()) -> FixpointResult:
  adom = sorted(set(active_domain(program, inst)) | set(extra_domain))
  if max_iters is None:
    max_iters = 10 * len(adom) + 10
  cur = dict(inst)
  for rel in stratum.idbs:
    cur[rel] = {}
  steps = 0
  for _ in range(max_iters):
    new_idb = apply_ico(stratum, program, cur, adom)
    changed = any(new_idb[rel] != cur.get(rel, {}) for rel in new_idb)
    nxt = dict(cur)
    nxt.update(new_idb)
    cur = nxt
    if not changed:
      return FixpointResult(cur, steps, True)
    steps += 1
  return FixpointResult(cur, steps, False)


def minus(b: Value, a: Value, sr: Semiring, grid=()) -> Value:
  """Difference operator: the meet of all c with b <= a + c. Only defined
  for idempotent semirings whose order forms a lattice here (bool, trop).
  Candidates are the materialized values plus the lattice extremes."""
  if not sr.idempotent or sr.name not in ("bool", "trop"):
    raise EvalError(f"difference not supported over {sr.name}")
  cands = set()
  for v in grid:
    cands.add(v if v is INF else v)
  cands.add(sr.zero)
  cands.add(b)
  cands.add(a)
  sat = [c for c in cands if sr.leq(b, sr.plus(a, c))]
  # meet of a set in these total orders: the order-smallest element
  best = None
  for c in sat:
    if best is None or sr.leq(c, best):
      best = c
  return sr.zero if best is None else best


def instance_minus(b: Instance, a: Instance, rels, sr: Semiring) -> Instance:
  grid = set()
  for r in rels:
    grid.update(b.get(r, {}).values())
    grid.update(a.get(r, {}).values())
  out: Instance = {}
  for r in rels:
    m = {}
    keys = set(b.get(r, {})) | set(a.get(r, {}))
    for k in keys:
      bv = b.get(r, {}).get(k, sr.zero)
      av = a.get(r, {}).get(k, sr.zero)
      d = minus(bv, av, sr, grid)
      if d != sr.zero:
        m[k] = d
    out[r] = m
  return out


def instance_plus(a: Instance, b: Instance, rels, sr: Semiring) -> Instance:
  out: Instance = {}
  for r in rels:
    m = dict(a.get(r, {}))
    for k, v in b.get(r, {}).items():
      m[k] = sr.plus(m.get(k, sr.zero), v)
    out[r] = {k: v for k, v in m.items() if v != sr.zero}
  return out


def semi_naive_fixpoint(stratum: Stratum, program: Program, inst: Instance,
                        max_iters: Optional[int] = None,
                        extra_domain=()) -> FixpointResult:
  """Generalized semi-naive evaluation: carry (Y, Delta) where
  Delta = F(Y) (-) Y, update Y <- Y (+) Delta, stop when Delta is empty."""
  sr = stratum.semiring
  if not sr.idempotent or sr.name not in ("bool", "trop"):
    raise EvalError(f"semi-naive evaluation not supported over {sr.name}")
  adom = sorted(set(active_domain(program, inst)) | set(extra_domain))
  if max_iters is None:
    max_iters = 10 * len(adom) + 10
  rels = stratum.idbs
  y: Instance = {rel: {} for rel in rels}
  steps = 0
  for _ in range(max_iters):
    cur = dict(inst)
    cur.update({r: y[r] for r in rels})
    fy = apply_ico(stratum, program, cur, adom)
    delta = instance_minus(fy, {r: y[r] for r in rels}, rels, sr)
    if all(not delta[r] for r in rels):
      # F may still shrink values in non-inflationary programs; fall back to
      # plain comparison to detect true convergence.
      if all(fy[r] == y[r] for r in rels):
        out = dict(inst)
        out.update({r: y[r] for r in rels})
        return FixpointResult(out, steps, True)
      y = {r: fy[r] for r in rels}
    else:
      y = instance_plus(y, delta, rels, sr)
    steps += 1
  out = dict(inst)
  out.update({r: y[r] for r in rels})
  return FixpointResult(out, steps, False)


@dataclass
class ProgramResult:
  instance: Instance
  iterations: list[int] = field(default_factory=list)
  converged: bool = True


def eval_program(program: Program, inst: Instance,
                 max_iters: Optional[int] = None,
                 semi_naive: bool = False,
                 extra_domain=()) -> ProgramResult:
  cur = copy_instance(inst)
  res = ProgramResult(cur)
  for stratum in program.strata:
    use_sn = (semi_naive and stratum.semiring.idempotent
              and stratum.semiring.name in ("bool", "trop"))
    fp = (semi_naive_fixpoint if use_sn else naive_fixpoint)(
      stratum, program, cur, max_iters, extra_domain)
    cur = fp.instance
    res.iterations.append(fp.iterations)
    res.converged = res.converged and fp.converged
  res.instance = cur
  return res
