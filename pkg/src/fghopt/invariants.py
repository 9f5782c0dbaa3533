"""Loop invariant inference for recursive strata.

Candidates come from three template families: commuting-summation equalities
read off the blocks of the recursive rules, range implications over the
argument positions of a recursive relation, and witness disjunctions tying a
recursive relation to a declared witness relation. Candidates are filtered
cheaply (on symbolic iterates for equalities, on random fixpoints for
implications) and the survivors are confirmed with the base and step
conditions of a proper loop invariant."""
from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field
from typing import Optional

from .compose import RelDef, defs_of_rules, subst_relation
from .ir import (
  Cast, Cmp, Expr, IConst, Instance, Program, RelAtom, RelPred, Rule, Stratum,
  Sum, Term, Times, Var, free_vars, pred_vars, term_vars)
from .interp import apply_ico, eval_expr
from .normal import NormalForm, NormalizeError, iso_equal, normalize, to_expr
from .parser import (
  Implication, Invariant, KeyConstraint, WitnessDecl, pred_to_str)
from .semiring import Semiring, get_semiring
from .verify import (
  VerifyOptions, VerifyOutcome, _collect_rels, _gamma_holds,
  _materialize_witnesses, _pseudo_program, check_invariant_conditions)


@dataclass
class InferredInvariant:
  phi: object  # Invariant or Implication
  checks: dict[str, VerifyOutcome] = field(default_factory=dict)

  def __repr__(self):
    return f"InferredInvariant({self.phi!r})"


def is_recursive(f_defs: dict[str, RelDef]) -> bool:
  idbs = set(f_defs)

  def mentions(e: Expr) -> bool:
    match e:
      case RelAtom(rel, _) | Cast(RelPred(rel, _)):
        return rel in idbs
    return any(mentions(k) for k in _children(e))

  return any(mentions(d.body) for d in f_defs.values())


def _children(e: Expr):
  from .ir import BoolCast, Fn, IfThenElse, Plus
  match e:
    case Plus(l, r) | Times(l, r):
      return (l, r)
    case Sum(_, b) | BoolCast(b):
      return (b,)
    case Fn(_, args):
      return args
    case IfThenElse(_, t, f):
      return (t, f)
  return ()


# ---------------------------------------------------------------------------
# Symbolic iterates

def symbolic_iterates(f_defs: dict[str, RelDef], sr: Semiring,
                      constraints=(), steps: int = 3
                      ) -> list[dict[str, NormalForm]]:
  """Normal forms of X_1, ..., X_steps where X_1 = F(empty)."""
  idbs = frozenset(f_defs)
  out: list[dict[str, NormalForm]] = []
  cur: Optional[dict[str, RelDef]] = None
  for _ in range(steps):
    step: dict[str, NormalForm] = {}
    for rel, d in f_defs.items():
      body = d.body if cur is None else subst_relation(d.body, cur, sr)
      step[rel] = normalize(body, sr, d.head_vars, constraints,
                            empty_rels=idbs if cur is None else frozenset())
    out.append(step)
    cur = {rel: RelDef(f_defs[rel].head_vars, to_expr(nf), sr)
           for rel, nf in step.items()}
  return out


# ---------------------------------------------------------------------------
# Candidate templates

def _rel_of(f):
  match f:
    case RelAtom(rel, args):
      return rel, args, False
    case Cast(RelPred(rel, args)):
      return rel, args, True
  return None


def _atom(rel: str, args, cast: bool) -> Expr:
  return Cast(RelPred(rel, args)) if cast else RelAtom(rel, args)


def _commute_candidates(f_defs: dict[str, RelDef], sr: Semiring,
                        constraints=()) -> list[Invariant]:
  """For each block ... sum[z: A(s, z) * B(z, t)] ... with at least one
  recursive factor, the candidate sum[z: A(x, z) * B(z, y)] ==
  sum[z: B(x, z) * A(z, y)]."""
  seen = set()
  cands = []
  for rel, d in f_defs.items():
    try:
      nf = normalize(d.body, sr, d.head_vars, constraints)
    except NormalizeError:
      continue
    for t in nf.terms:
      atoms = [r for r in map(_rel_of, t.inner) if r is not None]
      for (r1, a1, c1), (r2, a2, c2) in itertools.permutations(atoms, 2):
        if len(a1) != 2 or len(a2) != 2:
          continue
        for z in t.bound:
          if a1[1] == Var(z) and a2[0] == Var(z) and \
             z not in term_vars(a1[0]) | term_vars(a2[1]):
            if {r1, r2} & set(f_defs) and (r1, r2) not in seen:
              seen.add((r1, r2))
              x, y, zz = Var("x"), Var("y"), "z"
              lhs = Sum(zz, Times(_atom(r1, (x, Var(zz)), c1),
                                  _atom(r2, (Var(zz), y), c2)))
              rhs = Sum(zz, Times(_atom(r2, (x, Var(zz)), c2),
                                  _atom(r1, (Var(zz), y), c1)))
              cands.append(Invariant(lhs, rhs))
  return cands


def _range_candidates(f_defs: dict[str, RelDef]) -> list[Implication]:
  """Per recursive relation: each argument is at least one, and ordered
  pairs of arguments."""
  cands = []
  for rel, d in f_defs.items():
    k = len(d.head_vars)
    if k > 4:
      continue
    vs = tuple(Var(v) for v in d.head_vars)
    body = (RelPred(rel, vs),)
    for i in range(k):
      cands.append(Implication(body, ((Cmp(">=", vs[i], IConst(1)),),)))
    for i in range(k):
      for j in range(k):
        if i != j:
          cands.append(Implication(body, ((Cmp("<=", vs[i], vs[j]),),)))
  return cands


def _projection_candidates(f_defs: dict[str, RelDef], sr: Semiring,
                           constraints=()) -> list[Implication]:
  """X(vars) => E(subvars) for each base relation whose atom appears with
  plain head variables in the non-recursive part of X's rule."""
  idbs = frozenset(f_defs)
  cands = []
  seen = set()
  for rel, d in f_defs.items():
    try:
      nf = normalize(d.body, sr, d.head_vars, constraints, empty_rels=idbs)
    except NormalizeError:
      continue
    hv = set(d.head_vars)
    for t in nf.terms:
      for f in t.all_factors():
        got = _rel_of(f)
        if got is None:
          continue
        erel, args, _ = got
        if erel in idbs:
          continue
        names = set()
        for a in args:
          names |= term_vars(a)
        if not names or not names <= hv:
          continue
        key = (rel, erel, args)
        if key in seen:
          continue
        seen.add(key)
        vs = tuple(Var(v) for v in d.head_vars)
        cands.append(Implication((RelPred(rel, vs),),
                                 ((RelPred(erel, args),),)))
  return cands


def _witness_candidates(f_defs: dict[str, RelDef],
                        constraints) -> list[Implication]:
  """X(x, y) => x = y or T(x, y) for each declared binary witness T."""
  cands = []
  wits = [c for c in constraints if isinstance(c, WitnessDecl)
          and len(c.attrs) == 2]
  for rel, d in f_defs.items():
    if len(d.head_vars) != 2:
      continue
    x, y = (Var(v) for v in d.head_vars)
    for w in wits:
      cands.append(Implication((RelPred(rel, (x, y)),),
                               ((Cmp("=", x, y),), (RelPred(w.rel, (x, y)),))))
  return cands


# ---------------------------------------------------------------------------
# Filters

def _equality_holds_on_iterates(phi: Invariant, f_defs, sr, constraints,
                                iterates) -> bool:
  from .egraph import equal_saturate
  gamma = [c for c in constraints if not isinstance(c, Invariant)]
  for step in iterates:
    defs = {rel: RelDef(f_defs[rel].head_vars, to_expr(nf), sr)
            for rel, nf in step.items()}
    lhs = subst_relation(phi.lhs, defs, sr)
    rhs = subst_relation(phi.rhs, defs, sr)
    fv = tuple(sorted(free_vars(phi.lhs) | free_vars(phi.rhs)))
    try:
      if not equal_saturate(lhs, rhs, sr, fv, gamma):
        return False
    except Exception:
      return False
  return True


def holds_on_instances(f_defs: dict[str, RelDef], phi, sr: Semiring,
                       constraints=(), program: Optional[Program] = None,
                       trials: int = 20, seed: int = 0, domain_size: int = 3,
                       grid=(0, 1, 2, 5)) -> bool:
  """Concrete validation: on random constraint-satisfying instances, close
  the recursive relations under F and check phi on the fixpoint."""
  sigs: dict[str, tuple[int, str]] = {}
  rules = []
  for rel, d in f_defs.items():
    rules.append(Rule(rel, d.head_vars, d.body))
    _collect_rels(d.body, program, sr, sigs)
    sigs[rel] = (len(d.head_vars), sr.name)
  gamma = [c for c in constraints if not isinstance(c, Invariant)]
  match phi:
    case Invariant(lhs, rhs):
      _collect_rels(lhs, program, sr, sigs)
      _collect_rels(rhs, program, sr, sigs)
  dom = list(range(domain_size))
  prog = _pseudo_program(sigs)
  stratum = Stratum(semiring=sr, rules=rules)
  rng = random.Random(seed)
  wit_rels = {c.rel for c in gamma if isinstance(c, WitnessDecl)}
  from .verify import _key_map, _random_table, _tuple_filters
  filters = _tuple_filters(gamma)
  keycons = _key_map(gamma)
  done = 0
  attempts = 0
  while done < trials and attempts < trials * 10:
    attempts += 1
    inst: Instance = {}
    for rel, (arity, srname) in sigs.items():
      if rel in f_defs or rel in wit_rels:
        continue
      inst[rel] = _random_table(rel, arity, srname, dom, rng, None, filters,
                                keycons, grid)
    from .verify import _repair_instance
    _repair_instance(inst, gamma, prog)
    mat = _materialize_witnesses(inst, gamma, prog, dom)
    if mat is None or not _gamma_holds(mat, gamma, prog, dom):
      continue
    cur = dict(mat)
    for rel in f_defs:
      cur[rel] = {}
    for _ in range(2 * len(dom) + 4):
      new = apply_ico(stratum, prog, cur, dom)
      nxt = dict(cur)
      nxt.update(new)
      if all(nxt.get(r, {}) == cur.get(r, {}) for r in f_defs):
        break
      cur = nxt
    done += 1
    match phi:
      case Implication():
        if not _gamma_holds(cur, [phi], prog, dom):
          return False
      case Invariant(lhs, rhs):
        fv = sorted(free_vars(lhs) | free_vars(rhs))
        for vals in itertools.product(dom, repeat=len(fv)):
          env = dict(zip(fv, vals))
          try:
            if eval_expr(lhs, prog, cur, env, sr, dom) != \
               eval_expr(rhs, prog, cur, env, sr, dom):
              return False
          except Exception:
            return False
  return done > 0


# ---------------------------------------------------------------------------
# Inference

def infer_invariants(f_defs: dict[str, RelDef], sr: Semiring,
                     constraints=(), program: Optional[Program] = None,
                     options: Optional[VerifyOptions] = None,
                     max_candidates: int = 40) -> list[InferredInvariant]:
  """Candidates that survive the cheap filters and whose base and step
  conditions check out. Non-recursive strata have no loop to maintain an
  invariant for and yield nothing."""
  if not is_recursive(f_defs):
    return []
  opts = options or VerifyOptions()
  gamma = [c for c in constraints if not isinstance(c, Invariant)]

  equalities = _commute_candidates(f_defs, sr, constraints)
  implications = (_range_candidates(f_defs) +
                  _projection_candidates(f_defs, sr, gamma) +
                  _witness_candidates(f_defs, constraints))
  try:
    iterates = symbolic_iterates(f_defs, sr, gamma, steps=3)
  except NormalizeError:
    iterates = []

  out: list[InferredInvariant] = []
  for phi in equalities[:max_candidates]:
    # a symbolic proof on the first iterates fast-accepts; failing to prove
    # is inconclusive (the saturation may just miss a needed constraint), so
    # fall back to the concrete check
    proven = iterates and _equality_holds_on_iterates(phi, f_defs, sr, gamma,
                                                      iterates)
    if not proven and not holds_on_instances(
        f_defs, phi, sr, gamma, program, trials=5, seed=opts.seed,
        domain_size=opts.domain_size):
      continue
    checks = check_invariant_conditions(f_defs, phi, sr, gamma, program, opts)
    if checks["base"].is_valid and checks["step"].ok:
      out.append(InferredInvariant(phi, checks))

  for phi in implications[:max_candidates]:
    if not holds_on_instances(f_defs, phi, sr, gamma, program, trials=12,
                              seed=opts.seed, domain_size=opts.domain_size):
      continue
    checks = check_invariant_conditions(f_defs, phi, sr, gamma, program, opts)
    if checks["base"].is_valid and checks["step"].ok:
      out.append(InferredInvariant(phi, checks))
  return out


def infer_for_stratum(stratum: Stratum, constraints=(),
                      program: Optional[Program] = None,
                      options: Optional[VerifyOptions] = None
                      ) -> list[InferredInvariant]:
  f_defs = defs_of_rules(stratum.rules, stratum.semiring)
  return infer_invariants(f_defs, stratum.semiring, constraints, program,
                          options)
