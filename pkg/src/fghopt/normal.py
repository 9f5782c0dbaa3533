"""Normalization of query expressions into a canonical sum-of-products form,
plus the isomorphism-based equality test built on it.

A normal form is a sum of terms; each term is a product of constant factors
outside a single summation block whose body is a product of atomic factors
(relation atoms, casts of interpreted or relation guards, value terms, and
interpreted-function applications whose arguments are normal forms again).
Summation binders are renamed v0, v1, ... in order of first use and factors
are sorted canonically, so alpha-equivalent expressions normalize to
structurally equal objects in the common case; the isomorphism test covers
the symmetric cases that canonical naming cannot break."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

from .chase import Chase
from .ir import (
  Arith, BoolCast, Cast, Cmp, Const, Expr, Fn, IConst, IfThenElse, Plus,
  Pred, RelAtom, RelPred, Sum, Term, Times, ValueTerm, Var, canon_cmp,
  canon_term, desugar, free_vars, fresh_var, linearize, negate_pred,
  pred_vars, subst_pred, subst_term, sum_over, term_vars)
from .interp import FlatTerm, flatten
from .semiring import BOOL, Semiring, Value, get_semiring


class NormalizeError(Exception):
  pass


@dataclass(frozen=True)
class NFn:
  name: str
  args: tuple["NormalForm", ...]


Factor = object  # RelAtom | Cast | Const | ValueTerm | BoolCast | NFn


@dataclass(frozen=True)
class NTerm:
  outer: tuple  # constant factors pulled out of the summation
  bound: tuple[str, ...]
  inner: tuple  # factors under the summation

  def all_factors(self):
    return self.outer + self.inner


@dataclass(frozen=True)
class NormalForm:
  semiring: str
  head_vars: tuple[str, ...]
  terms: tuple[NTerm, ...]

  def __repr__(self):
    if not self.terms:
      return "<0>"
    return " (+) ".join(_term_repr(t) for t in self.terms)


def _factor_repr(f) -> str:
  match f:
    case NFn(name, args):
      return f"{name}({'; '.join(map(repr, args))})"
    case _:
      return repr(f)


def _term_repr(t: NTerm) -> str:
  parts = [_factor_repr(f) for f in t.outer]
  if t.bound or t.inner:
    body = " (x) ".join(_factor_repr(f) for f in t.inner) or "<1>"
    parts.append(f"sum[{','.join(t.bound)}: {body}]")
  return " (x) ".join(parts) if parts else "<1>"


def factor_free_vars(f) -> set[str]:
  match f:
    case NFn(_, args):
      out = set()
      for nf in args:
        out |= nf_free_vars(nf)
      return out
    case _:
      return free_vars(f)


def nf_free_vars(nf: NormalForm) -> set[str]:
  out = set()
  for t in nf.terms:
    for f in t.all_factors():
      out |= factor_free_vars(f)
    out -= set(t.bound)
  return out


def factor_substitute(f, env: dict[str, Term]):
  match f:
    case NFn(name, args):
      return NFn(name, tuple(nf_substitute(nf, env) for nf in args))
    case _:
      from .ir import substitute
      return substitute(f, env)


def nf_substitute(nf: NormalForm, env: dict[str, Term]) -> NormalForm:
  terms = []
  for t in nf.terms:
    inner_env = {k: v for k, v in env.items() if k not in t.bound}
    terms.append(NTerm(
      tuple(factor_substitute(f, inner_env) for f in t.outer),
      t.bound,
      tuple(factor_substitute(f, inner_env) for f in t.inner)))
  return NormalForm(nf.semiring, nf.head_vars, tuple(terms))


# ---------------------------------------------------------------------------
# Boolean cast elimination

def _bool_factor_to_pred(f) -> Pred | None:
  match f:
    case RelAtom(rel, args):
      return RelPred(rel, args)
    case Cast(p):
      return p
  return None


def _cast_factor(f, sr: Semiring) -> Expr:
  match f:
    case RelAtom(rel, args):
      return Cast(RelPred(rel, args))
    case Cast(_):
      return f
    case Const(v):
      return Const(sr.cast(bool(v)))
    case BoolCast(b):
      return BoolCast(b)
  raise NormalizeError(f"cannot cast boolean factor {f!r}")


def eliminate_bool_casts(e: Expr, sr: Semiring, chase: Chase,
                         extra_preds=()) -> Expr:
  """Replace casts of compound Boolean expressions with semiring expressions.
  For idempotent plus this is unconditional; otherwise disjuncts must be
  provably disjoint and summation witnesses unique under the constraints."""

  def elim_cast(b: Expr) -> Expr:
    terms = flatten(b, BOOL)
    terms = [t for t in terms if not any(f == Const(False) for f in t.factors)]
    if not sr.idempotent and len(terms) > 1:
      for t1, t2 in itertools.combinations(terms, 2):
        p1 = [p for p in map(_bool_factor_to_pred, t1.factors) if p]
        p2 = [p for p in map(_bool_factor_to_pred, t2.factors) if p]
        if not chase.disjoint(list(extra_preds) + p1, p2):
          raise NormalizeError(
            f"cannot split cast: disjuncts not provably disjoint")
    pieces = []
    for t in terms:
      preds = [p for p in map(_bool_factor_to_pred, t.factors) if p]
      if not sr.idempotent:
        for v in t.bound:
          if not chase.unique_witness(v, list(extra_preds) + preds):
            raise NormalizeError(
              f"cannot push cast under summation: witness {v} not unique")
      factors = [go(_cast_factor(f, sr)) for f in t.factors]
      body = factors[0] if factors else Const(sr.one)
      for f in factors[1:]:
        body = Times(body, f)
      pieces.append(sum_over(t.bound, body))
    if not pieces:
      return Const(sr.zero)
    out = pieces[0]
    for p in pieces[1:]:
      out = Plus(out, p)
    return out

  def go(e: Expr) -> Expr:
    match e:
      case BoolCast(b):
        return elim_cast(b)
      case Plus(l, r):
        return Plus(go(l), go(r))
      case Times(l, r):
        return Times(go(l), go(r))
      case Sum(v, body):
        return Sum(v, go(body))
      case Fn(name, args):
        return Fn(name, tuple(go(a) for a in args))
      case _:
        return e

  return go(e)


# ---------------------------------------------------------------------------
# Term-level simplification

def _is_cast_like(f) -> bool:
  return isinstance(f, (Cast, BoolCast))


def _simplify_term(ft: FlatTerm, sr: Semiring, empty_rels: frozenset[str],
                   program=None):
  """Simplify one flattened product: canonical guards, equality elimination,
  constant folding. Returns (bound, factors, const) or None if the term is
  zero."""
  bound = list(ft.bound)
  factors = []
  const = sr.one
  for f in ft.factors:
    match f:
      case RelAtom(rel, args):
        if rel in empty_rels:
          return None
        factors.append(RelAtom(rel, tuple(canon_term(a) for a in args)))
      case Cast(RelPred(rel, args)):
        if rel in empty_rels:
          return None
        factors.append(Cast(RelPred(rel, tuple(canon_term(a) for a in args))))
      case Cast(Cmp() as c):
        factors.append(Cast(canon_cmp(c)))
      case ValueTerm(t):
        t = canon_term(t)
        if isinstance(t, IConst):
          const = sr.times(const, t.value)
        else:
          factors.append(ValueTerm(t))
      case Const(v):
        const = sr.times(const, v)
      case _:
        factors.append(f)
  if const == sr.zero and sr.annihilating:
    return None

  # equality elimination: sum_x (A(x) * [x = t]) = A(t)
  changed = True
  while changed:
    changed = False
    for i, f in enumerate(factors):
      match f:
        case Cast(Cmp("=", l, r)):
          lin = linearize(Arith("-", l, r))
          if lin is None:
            continue
          c0, coeffs = lin
          target = None
          for v in bound:
            if coeffs.get(v) in (1, -1):
              target = v
              break
          if target is None:
            continue
          a = coeffs[target]
          # target = -(c0 + rest)/a
          rest: Term = IConst(c0 if a == -1 else -c0)
          for k, cv in coeffs.items():
            if k == target:
              continue
            cc = cv if a == -1 else -cv
            rest = Arith("+", rest, Arith("*", IConst(cc), Var(k)))
          sol = canon_term(rest)
          env = {target: sol}
          factors = [factor_substitute(g, env) for g in
                     factors[:i] + factors[i + 1:]]
          bound.remove(target)
          changed = True
          break

  # evaluate ground guards, re-canonicalize, drop trivial ones
  out = []
  for f in factors:
    match f:
      case Cast(Cmp() as c):
        c = canon_cmp(c)
        if not pred_vars(c):
          from .ir import _CMP_EVAL
          lv = c.left.value if isinstance(c.left, IConst) else 0
          rv = c.right.value if isinstance(c.right, IConst) else 0
          if _CMP_EVAL[c.op](lv, rv):
            continue
          return None
        out.append(Cast(c))
      case _:
        out.append(f)
  factors = out

  # duplicate casts multiply idempotently in every semiring
  seen = set()
  out = []
  for f in factors:
    if _is_cast_like(f):
      key = repr(f)
      if key in seen:
        continue
      seen.add(key)
    out.append(f)
  factors = out
  if sr.name == "bool":
    seen = set()
    out = []
    for f in factors:
      key = _factor_repr(f)
      if key in seen:
        continue
      seen.add(key)
      out.append(f)
    factors = out

  if sr.idempotent:
    used = set()
    for f in factors:
      used |= factor_free_vars(f)
    bound = [v for v in bound if v in used]
  return bound, factors, const


def _canon_nterm(bound, factors, const, sr: Semiring,
                 factor_constants: bool) -> NTerm:
  bound_set = set(bound)

  def masked_key(f):
    def mask(t: Term) -> str:
      match t:
        case Var(name):
          return "<b>" if name in bound_set else name
        case IConst(v):
          return str(v)
        case Arith(op, l, r):
          return f"({mask(l)}{op}{mask(r)})"
      raise TypeError(t)

    match f:
      case RelAtom(rel, args):
        return ("0rel", rel, len(args), tuple(mask(a) for a in args))
      case Cast(RelPred(rel, args)):
        return ("1castrel", rel, len(args), tuple(mask(a) for a in args))
      case Cast(Cmp(op, l, r)):
        return ("2cmp", op, 0, (mask(l), mask(r)))
      case ValueTerm(t):
        return ("3val", "", 0, (mask(t),))
      case NFn(name, args):
        return ("4fn", name, len(args), tuple(repr(a) for a in args))
      case Const(v):
        return ("5const", repr(v), 0, ())
      case BoolCast(b):
        return ("6bcast", repr(b), 0, ())
    return ("9", repr(f), 0, ())

  ordered = sorted(factors, key=masked_key)
  # assign canonical binder names in order of first occurrence
  order: list[str] = []

  def visit_term(t: Term):
    match t:
      case Var(name):
        if name in bound_set and name not in order:
          order.append(name)
      case Arith(_, l, r):
        visit_term(l)
        visit_term(r)
      case _:
        pass

  for f in ordered:
    match f:
      case RelAtom(_, args):
        for a in args:
          visit_term(a)
      case Cast(RelPred(_, args)):
        for a in args:
          visit_term(a)
      case Cast(Cmp(_, l, r)):
        visit_term(l)
        visit_term(r)
      case ValueTerm(t):
        visit_term(t)
      case _:
        for v in sorted(factor_free_vars(f)):
          if v in bound_set and v not in order:
            order.append(v)
  for v in bound:
    if v not in order:
      order.append(v)
  ren = {old: Var(f"v{i}") for i, old in enumerate(order)}
  renamed = [factor_substitute(f, ren) for f in ordered]
  renamed.sort(key=lambda f: (masked_key(f)[:3], _factor_repr(f)))
  new_bound = tuple(f"v{i}" for i in range(len(order)))

  outer = []
  if const != sr.one:
    outer.append(Const(const))
  if not new_bound and factor_constants:
    # no summation: everything sits outside
    return NTerm(tuple(outer) + tuple(renamed), (), ())
  if not factor_constants and outer and new_bound:
    return NTerm((), new_bound, tuple(sorted(
      outer + renamed, key=lambda f: (masked_key(f)[:3], _factor_repr(f)))))
  return NTerm(tuple(outer), new_bound, tuple(renamed))


def _prune_empty(e: Expr, rels: frozenset[str], sr: Semiring):
  """Rewrite e under the assumption that the given relations are empty;
  None stands for the zero of the ambient semiring."""
  match e:
    case RelAtom(rel, _):
      return None if rel in rels else e
    case Cast(RelPred(rel, _)):
      return None if rel in rels else e
    case Plus(l, r):
      pl = _prune_empty(l, rels, sr)
      pr = _prune_empty(r, rels, sr)
      if pl is None:
        return pr
      if pr is None:
        return pl
      return Plus(pl, pr)
    case Times(l, r):
      pl = _prune_empty(l, rels, sr)
      pr = _prune_empty(r, rels, sr)
      if pl is None or pr is None:
        return None
      return Times(pl, pr)
    case Sum(v, b):
      pb = _prune_empty(b, rels, sr)
      return None if pb is None else Sum(v, pb)
    case BoolCast(b):
      pb = _prune_empty(b, rels, BOOL)
      return None if pb is None else BoolCast(pb)
    case Fn(name, args):
      pruned = tuple(_prune_empty(a, rels, sr) for a in args)
      return Fn(name, tuple(Const(sr.zero) if p is None else p
                            for p in pruned))
    case IfThenElse(p, t, f):
      pt = _prune_empty(t, rels, sr)
      pf = _prune_empty(f, rels, sr)
      return IfThenElse(p, Const(sr.zero) if pt is None else pt,
                        Const(sr.zero) if pf is None else pf)
    case _:
      return e


def normalize(e: Expr, sr: Semiring, head_vars=(), constraints=(),
              factor_constants: bool = True,
              empty_rels=frozenset()) -> NormalForm:
  chase = Chase(list(constraints))
  if empty_rels:
    pruned = _prune_empty(e, frozenset(empty_rels), sr)
    if pruned is None:
      return NormalForm(sr.name, tuple(head_vars), ())
    e = pruned
  e = desugar(e, sr)
  e = eliminate_bool_casts(e, sr, chase)
  nterms = []
  for ft in flatten(e, sr):
    # recursively normalize interpreted-function arguments
    factors = []
    for f in ft.factors:
      match f:
        case Fn(name, args):
          factors.append(NFn(name, tuple(
            normalize(a, sr, head_vars, constraints, factor_constants,
                      empty_rels) for a in args)))
        case IfThenElse():
          raise NormalizeError("if-then-else survived desugaring")
        case _:
          factors.append(f)
    ft = FlatTerm(ft.bound, factors)
    simp = _simplify_term(ft, sr, frozenset(empty_rels))
    if simp is None:
      continue
    nterms.append(simp)

  # guard absorption: a bare [p] term lets [not p] be dropped elsewhere when
  # the semiring one absorbs plus (min(0, x) = 0 in trop, or in bool)
  if sr.name in ("bool", "trop"):  # semirings where one absorbs plus
    bare = []
    for bound, factors, const in nterms:
      if const == sr.one and not bound and len(factors) == 1:
        match factors[0]:
          case Cast(Cmp() as c):
            bare.append(canon_cmp(negate_pred(c)))
    if bare:
      neg = {repr(Cast(c)) for c in bare}
      nterms = [
        (bound, [f for f in factors if repr(f) not in neg], const)
        for bound, factors, const in nterms]

  canon = [_canon_nterm(b, f, c, sr, factor_constants) for b, f, c in nterms]
  if sr.idempotent:
    seen = set()
    out = []
    for t in canon:
      key = _term_repr(t)
      if key in seen:
        continue
      seen.add(key)
      out.append(t)
    canon = out
  canon.sort(key=_term_repr)
  return NormalForm(sr.name, tuple(head_vars), tuple(canon))


def to_expr(nf: NormalForm, sr: Semiring | None = None) -> Expr:
  if sr is None:
    sr = get_semiring(nf.semiring)

  def factor_expr(f) -> Expr:
    match f:
      case NFn(name, args):
        return Fn(name, tuple(to_expr(a, sr) for a in args))
      case _:
        return f

  pieces = []
  for t in nf.terms:
    fs = [factor_expr(f) for f in t.outer]
    if t.bound or t.inner:
      inner = [factor_expr(f) for f in t.inner]
      body = inner[0] if inner else Const(sr.one)
      for f in inner[1:]:
        body = Times(body, f)
      fs.append(sum_over(t.bound, body))
    if not fs:
      pieces.append(Const(sr.one))
    else:
      e = fs[0]
      for f in fs[1:]:
        e = Times(e, f)
      pieces.append(e)
  if not pieces:
    return Const(sr.zero)
  out = pieces[0]
  for p in pieces[1:]:
    out = Plus(out, p)
  return out


# ---------------------------------------------------------------------------
# Isomorphism test

def term_iso_map(t1: NTerm, t2: NTerm) -> dict[str, str] | None:
  """Bijection between the bound variables of two terms making their factor
  multisets equal, or None."""
  if len(t1.bound) != len(t2.bound):
    return None
  if len(t1.outer) != len(t2.outer) or len(t1.inner) != len(t2.inner):
    return None
  if sorted(map(_factor_repr, t1.outer)) != sorted(map(_factor_repr, t2.outer)):
    return None

  f1 = list(t1.inner)
  f2 = list(t2.inner)
  b1, b2 = set(t1.bound), set(t2.bound)

  def compatible(a, b, env):
    """Try to extend env (a partial bijection b1 -> b2) so that a maps to b."""
    sa = _factor_repr(a)
    sb = _factor_repr(b)
    # quick shape check with binders masked
    trial = dict(env)

    def match_term(x: Term, y: Term) -> bool:
      match x, y:
        case Var(nx), Var(ny):
          if nx in b1:
            if ny not in b2:
              return False
            if nx in trial:
              return trial[nx] == ny
            if ny in trial.values():
              return False
            trial[nx] = ny
            return True
          return nx == ny
        case IConst(vx), IConst(vy):
          return vx == vy
        case Arith(ox, lx, rx), Arith(oy, ly, ry):
          return ox == oy and match_term(lx, ly) and match_term(rx, ry)
        case _:
          return False

    def match_factor(a, b) -> bool:
      match a, b:
        case RelAtom(r1, a1), RelAtom(r2, a2):
          return r1 == r2 and len(a1) == len(a2) and all(
            match_term(x, y) for x, y in zip(a1, a2))
        case Cast(RelPred(r1, a1)), Cast(RelPred(r2, a2)):
          return r1 == r2 and len(a1) == len(a2) and all(
            match_term(x, y) for x, y in zip(a1, a2))
        case Cast(Cmp(o1, l1, r1)), Cast(Cmp(o2, l2, r2)):
          return o1 == o2 and match_term(l1, l2) and match_term(r1, r2)
        case ValueTerm(x), ValueTerm(y):
          return match_term(x, y)
        case _:
          return sa == sb

    if match_factor(a, b):
      return trial
    return None

  def search(i, env, used):
    if i == len(f1):
      return env
    for j in range(len(f2)):
      if j in used:
        continue
      trial = compatible(f1[i], f2[j], env)
      if trial is not None:
        found = search(i + 1, trial, used | {j})
        if found is not None:
          return found
    return None

  env = search(0, {}, frozenset())
  if env is None:
    return None
  for v in t1.bound:
    env.setdefault(v, None)
  # complete the bijection for binders unused by any factor
  free2 = [v for v in t2.bound if v not in env.values()]
  for v in t1.bound:
    if env[v] is None:
      env[v] = free2.pop()
  return env


def _term_iso(t1: NTerm, t2: NTerm) -> bool:
  return term_iso_map(t1, t2) is not None


def iso_equal(nf1: NormalForm, nf2: NormalForm) -> bool:
  """Sound equality test: True means provably equal, False means the test
  could not align the two normal forms (not a proof of inequality)."""
  if nf1.semiring != nf2.semiring:
    return False
  if len(nf1.terms) != len(nf2.terms):
    return False

  t1 = list(nf1.terms)
  t2 = list(nf2.terms)

  def search(i, used):
    if i == len(t1):
      return True
    for j in range(len(t2)):
      if j in used:
        continue
      if _term_iso(t1[i], t2[j]):
        if search(i + 1, used | {j}):
          return True
    return False

  return search(0, frozenset())
