"""Core intermediate representation: terms, expressions, rules, programs,
instances, and the basic structural operations over them (free variables,
capture-avoiding substitution, desugaring, alpha canonicalization)."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Union

from .semiring import BOT, INF, Semiring, Value, get_semiring


# ---------------------------------------------------------------------------
# Terms (key-level integer expressions)

@dataclass(frozen=True)
class Var:
  name: str

  def __repr__(self):
    return self.name


@dataclass(frozen=True)
class IConst:
  value: int

  def __repr__(self):
    return str(self.value)


@dataclass(frozen=True)
class Arith:
  op: str  # '+', '-', '*', '/'
  left: "Term"
  right: "Term"

  def __repr__(self):
    return f"({self.left} {self.op} {self.right})"


Term = Union[Var, IConst, Arith]


def term_vars(t: Term) -> set[str]:
  match t:
    case Var(name):
      return {name}
    case IConst(_):
      return set()
    case Arith(_, l, r):
      return term_vars(l) | term_vars(r)
  raise TypeError(t)


def subst_term(t: Term, env: dict[str, Term]) -> Term:
  match t:
    case Var(name):
      return env.get(name, t)
    case IConst(_):
      return t
    case Arith(op, l, r):
      return Arith(op, subst_term(l, env), subst_term(r, env))
  raise TypeError(t)


def linearize(t: Term) -> Optional[tuple[int, dict[str, int]]]:
  """Express t as const + sum(coeff * var) when it is linear, else None."""
  match t:
    case Var(name):
      return (0, {name: 1})
    case IConst(v):
      return (v, {})
    case Arith(op, l, r):
      ll, rr = linearize(l), linearize(r)
      if ll is None or rr is None:
        return None
      lc, lv = ll
      rc, rv = rr
      if op == "+":
        out = dict(lv)
        for k, v in rv.items():
          out[k] = out.get(k, 0) + v
        return (lc + rc, {k: v for k, v in out.items() if v})
      if op == "-":
        out = dict(lv)
        for k, v in rv.items():
          out[k] = out.get(k, 0) - v
        return (lc - rc, {k: v for k, v in out.items() if v})
      if op == "*":
        if not lv:
          return (lc * rc, {k: lc * v for k, v in rv.items() if lc * v})
        if not rv:
          return (rc * lc, {k: rc * v for k, v in lv.items() if rc * v})
        return None
      return None
  raise TypeError(t)


def canon_term(t: Term) -> Term:
  """Canonical form for linear terms: c + a1*x1 + ... with sorted vars."""
  lin = linearize(t)
  if lin is None:
    match t:
      case Arith(op, l, r):
        return Arith(op, canon_term(l), canon_term(r))
    return t
  const, coeffs = lin
  out: Optional[Term] = None
  for name in sorted(coeffs):
    c = coeffs[name]
    piece: Term = Var(name) if c == 1 else Arith("*", IConst(c), Var(name))
    out = piece if out is None else Arith("+", out, piece)
  if out is None:
    return IConst(const)
  if const == 0:
    return out
  return Arith("+", out, IConst(const))


def eval_term(t: Term, env: dict[str, int]):
  match t:
    case Var(name):
      return env[name]
    case IConst(v):
      return v
    case Arith(op, l, r):
      a, b = eval_term(l, env), eval_term(r, env)
      if op == "+":
        return a + b
      if op == "-":
        return a - b
      if op == "*":
        return a * b
      if op == "/":
        q = Fraction(a) / Fraction(b)
        return int(q) if q.denominator == 1 else q
  raise TypeError(t)


# ---------------------------------------------------------------------------
# Predicates (interpreted guards and relation guards)

@dataclass(frozen=True)
class Cmp:
  op: str  # '=', '!=', '<', '<=', '>', '>='
  left: Term
  right: Term

  def __repr__(self):
    return f"{self.left} {self.op} {self.right}"


@dataclass(frozen=True)
class RelPred:
  rel: str
  args: tuple[Term, ...]

  def __repr__(self):
    return f"{self.rel}({', '.join(map(repr, self.args))})"


Pred = Union[Cmp, RelPred]

_NEG = {"=": "!=", "!=": "=", "<": ">=", "<=": ">", ">": "<=", ">=": "<"}
_CMP_EVAL = {
  "=": lambda a, b: a == b, "!=": lambda a, b: a != b,
  "<": lambda a, b: a < b, "<=": lambda a, b: a <= b,
  ">": lambda a, b: a > b, ">=": lambda a, b: a >= b,
}


def negate_pred(p: Pred) -> Pred:
  match p:
    case Cmp(op, l, r):
      return Cmp(_NEG[op], l, r)
  raise ValueError(f"cannot negate relation guard {p!r}")


def pred_vars(p: Pred) -> set[str]:
  match p:
    case Cmp(_, l, r):
      return term_vars(l) | term_vars(r)
    case RelPred(_, args):
      return set().union(*(term_vars(a) for a in args)) if args else set()
  raise TypeError(p)


def subst_pred(p: Pred, env: dict[str, Term]) -> Pred:
  match p:
    case Cmp(op, l, r):
      return Cmp(op, subst_term(l, env), subst_term(r, env))
    case RelPred(rel, args):
      return RelPred(rel, tuple(subst_term(a, env) for a in args))
  raise TypeError(p)


def canon_cmp(p: Cmp) -> Cmp:
  """Canonicalize a comparison: strict integer orders become non-strict
  ('x < y' -> 'x <= y - 1'), '>'-style ops are flipped, and for '='/'!='
  the two sides are moved to 'lin <= const' style where linear."""
  op, l, r = p.op, p.left, p.right
  if op == ">":
    op, l, r = "<", r, l
  elif op == ">=":
    op, l, r = "<=", r, l
  if op == "<":
    op, r = "<=", Arith("-", r, IConst(1))
  ll, rr = linearize(l), linearize(r)
  if ll is None or rr is None:
    return Cmp(op, canon_term(l), canon_term(r))
  lc, lv = ll
  rc, rv = rr
  coeffs = dict(lv)
  for k, v in rv.items():
    coeffs[k] = coeffs.get(k, 0) - v
  coeffs = {k: v for k, v in coeffs.items() if v}
  const = rc - lc  # constraint: coeffs . vars  (op)  const
  if op in ("=", "!="):
    # normalize sign: first sorted var coefficient positive
    if coeffs:
      first = sorted(coeffs)[0]
      if coeffs[first] < 0:
        coeffs = {k: -v for k, v in coeffs.items()}
        const = -const
    elif const < 0 and op in ("=", "!="):
      const = -const
  lhs: Optional[Term] = None
  for name in sorted(coeffs):
    c = coeffs[name]
    piece: Term = Var(name) if c == 1 else Arith("*", IConst(c), Var(name))
    lhs = piece if lhs is None else Arith("+", lhs, piece)
  if lhs is None:
    lhs = IConst(0)
  return Cmp(op, lhs, IConst(const))


# ---------------------------------------------------------------------------
# Expressions

@dataclass(frozen=True)
class RelAtom:
  rel: str
  args: tuple[Term, ...]

  def __repr__(self):
    return f"{self.rel}[{', '.join(map(repr, self.args))}]"


@dataclass(frozen=True)
class Plus:
  left: "Expr"
  right: "Expr"

  def __repr__(self):
    return f"({self.left} + {self.right})"


@dataclass(frozen=True)
class Times:
  left: "Expr"
  right: "Expr"

  def __repr__(self):
    return f"({self.left} * {self.right})"


@dataclass(frozen=True)
class Sum:
  var: str
  body: "Expr"

  def __repr__(self):
    return f"sum[{self.var}: {self.body}]"


@dataclass(frozen=True)
class Cast:
  pred: Pred

  def __repr__(self):
    return f"[{self.pred}]"


@dataclass(frozen=True)
class Const:
  value: Value

  def __hash__(self):
    return hash((Const, repr(self.value)))

  def __repr__(self):
    return repr(self.value)


@dataclass(frozen=True)
class ValueTerm:
  term: Term

  def __repr__(self):
    return f"val({self.term})"


@dataclass(frozen=True)
class Fn:
  name: str  # 'sub', 'div'
  args: tuple["Expr", ...]

  def __repr__(self):
    return f"{self.name}({', '.join(map(repr, self.args))})"


@dataclass(frozen=True)
class IfThenElse:
  pred: Pred
  then: "Expr"
  els: "Expr"

  def __repr__(self):
    return f"(if {self.pred} then {self.then} else {self.els})"


@dataclass(frozen=True)
class BoolCast:
  """Cast of a compound Boolean expression into the current semiring.
  Produced internally when composing queries across strata; eliminated by the
  normalizer."""
  body: "Expr"

  def __repr__(self):
    return f"cast({self.body})"


Expr = Union[RelAtom, Plus, Times, Sum, Cast, Const, ValueTerm, Fn,
             IfThenElse, BoolCast]


def plus_of(exprs: Iterable[Expr], zero: Optional[Expr] = None) -> Expr:
  out = None
  for e in exprs:
    out = e if out is None else Plus(out, e)
  if out is None:
    if zero is None:
      raise ValueError("empty plus")
    return zero
  return out


def times_of(exprs: Iterable[Expr], one: Optional[Expr] = None) -> Expr:
  out = None
  for e in exprs:
    out = e if out is None else Times(out, e)
  if out is None:
    if one is None:
      raise ValueError("empty times")
    return one
  return out


def sum_over(vars_: Iterable[str], body: Expr) -> Expr:
  out = body
  for v in reversed(list(vars_)):
    out = Sum(v, out)
  return out


def free_vars(e: Expr) -> set[str]:
  match e:
    case RelAtom(_, args):
      return set().union(*(term_vars(a) for a in args)) if args else set()
    case Plus(l, r) | Times(l, r):
      return free_vars(l) | free_vars(r)
    case Sum(v, body):
      return free_vars(body) - {v}
    case Cast(p):
      return pred_vars(p)
    case Const(_):
      return set()
    case ValueTerm(t):
      return term_vars(t)
    case Fn(_, args):
      return set().union(*(free_vars(a) for a in args)) if args else set()
    case IfThenElse(p, t, f):
      return pred_vars(p) | free_vars(t) | free_vars(f)
    case BoolCast(b):
      return free_vars(b)
  raise TypeError(e)


def term_size(t: Term) -> int:
  match t:
    case Arith(_, l, r):
      return 1 + term_size(l) + term_size(r)
  return 1


def expr_size(e: Expr) -> int:
  match e:
    case RelAtom(_, args) | Cast(RelPred(_, args)):
      return 1 + sum(term_size(a) for a in args)
    case Cast(Cmp(_, l, r)):
      return 1 + term_size(l) + term_size(r)
    case Plus(l, r) | Times(l, r):
      return 1 + expr_size(l) + expr_size(r)
    case Sum(_, body) | BoolCast(body):
      return 1 + expr_size(body)
    case ValueTerm(t):
      return term_size(t)
    case Fn(_, args):
      return 1 + sum(expr_size(a) for a in args)
    case IfThenElse(_, t, f):
      return 2 + expr_size(t) + expr_size(f)
  return 1


_fresh_counter = itertools.count()


def fresh_var(prefix: str = "v") -> str:
  return f"{prefix}%{next(_fresh_counter)}"


def substitute(e: Expr, env: dict[str, Term]) -> Expr:
  """Capture-avoiding substitution of terms for free variables."""
  env = {k: v for k, v in env.items() if v != Var(k)}
  if not env:
    return e
  match e:
    case RelAtom(rel, args):
      return RelAtom(rel, tuple(subst_term(a, env) for a in args))
    case Plus(l, r):
      return Plus(substitute(l, env), substitute(r, env))
    case Times(l, r):
      return Times(substitute(l, env), substitute(r, env))
    case Sum(v, body):
      inner = {k: t for k, t in env.items() if k != v}
      if not inner:
        return e
      captured = set().union(*(term_vars(t) for t in inner.values()))
      if v in captured:
        nv = fresh_var(v.split("%")[0])
        body = substitute(body, {v: Var(nv)})
        return Sum(nv, substitute(body, inner))
      return Sum(v, substitute(body, inner))
    case Cast(p):
      return Cast(subst_pred(p, env))
    case Const(_):
      return e
    case ValueTerm(t):
      return ValueTerm(subst_term(t, env))
    case Fn(name, args):
      return Fn(name, tuple(substitute(a, env) for a in args))
    case IfThenElse(p, t, f):
      return IfThenElse(subst_pred(p, env), substitute(t, env), substitute(f, env))
    case BoolCast(b):
      return BoolCast(substitute(b, env))
  raise TypeError(e)


def desugar(e: Expr, sr: Semiring) -> Expr:
  """Remove if-then-else sugar: each branch is guarded by a cast of the
  (negated) predicate and the branches are summed."""
  match e:
    case IfThenElse(p, t, f):
      return Plus(
        Times(desugar(t, sr), Cast(p)),
        Times(desugar(f, sr), Cast(negate_pred(p))))
    case Plus(l, r):
      return Plus(desugar(l, sr), desugar(r, sr))
    case Times(l, r):
      return Times(desugar(l, sr), desugar(r, sr))
    case Sum(v, body):
      return Sum(v, desugar(body, sr))
    case Fn(name, args):
      return Fn(name, tuple(desugar(a, sr) for a in args))
    case BoolCast(b):
      from .semiring import BOOL
      return BoolCast(desugar(b, BOOL))
    case _:
      return e


def alpha_canon(e: Expr) -> Expr:
  """Rename bound variables b0, b1, ... in leftmost-outermost order so that
  alpha-equivalent expressions compare equal structurally."""
  counter = itertools.count()

  def go(e: Expr, env: dict[str, Term]) -> Expr:
    match e:
      case Sum(v, body):
        nv = f"b{next(counter)}"
        return Sum(nv, go(body, {**env, v: Var(nv)}))
      case Plus(l, r):
        return Plus(go(l, env), go(r, env))
      case Times(l, r):
        return Times(go(l, env), go(r, env))
      case RelAtom(rel, args):
        return RelAtom(rel, tuple(subst_term(a, env) for a in args))
      case Cast(p):
        return Cast(subst_pred(p, env))
      case ValueTerm(t):
        return ValueTerm(subst_term(t, env))
      case Fn(name, args):
        return Fn(name, tuple(go(a, env) for a in args))
      case IfThenElse(p, t, f):
        return IfThenElse(subst_pred(p, env), go(t, env), go(f, env))
      case BoolCast(b):
        return BoolCast(go(b, env))
      case _:
        return e

  return go(e, {})


# ---------------------------------------------------------------------------
# Rules, strata, programs

@dataclass
class Rule:
  head_rel: str
  head_vars: tuple[str, ...]
  body: Expr

  def __repr__(self):
    return f"{self.head_rel}({', '.join(self.head_vars)}) :- {self.body}."


@dataclass
class Stratum:
  semiring: Semiring
  rules: list[Rule] = field(default_factory=list)

  @property
  def idbs(self) -> list[str]:
    seen = []
    for r in self.rules:
      if r.head_rel not in seen:
        seen.append(r.head_rel)
    return seen


@dataclass
class RelDecl:
  name: str
  attrs: tuple[str, ...]  # attribute types of the key columns
  semiring: Semiring

  @property
  def arity(self):
    return len(self.attrs)


@dataclass
class Program:
  edbs: dict[str, RelDecl] = field(default_factory=dict)
  strata: list[Stratum] = field(default_factory=list)
  outputs: list[str] = field(default_factory=list)
  constants: dict[str, int] = field(default_factory=dict)
  helpers: set[str] = field(default_factory=set)
  constraints: list = field(default_factory=list)

  def idb_semiring(self, rel: str) -> Optional[Semiring]:
    for st in self.strata:
      if rel in st.idbs:
        return st.semiring
    return None

  def rel_semiring(self, rel: str) -> Optional[Semiring]:
    if rel in self.edbs:
      return self.edbs[rel].semiring
    return self.idb_semiring(rel)

  def all_idbs(self) -> list[str]:
    out = []
    for st in self.strata:
      out.extend(st.idbs)
    return out

  def rel_arity(self, rel: str) -> Optional[int]:
    if rel in self.edbs:
      return self.edbs[rel].arity
    for st in self.strata:
      for r in st.rules:
        if r.head_rel == rel:
          return len(r.head_vars)
    return None


# ---------------------------------------------------------------------------
# Instances

Instance = dict[str, dict[tuple[int, ...], Value]]


def instance_equal(a: Instance, b: Instance) -> bool:
  rels = set(a) | set(b)
  for r in rels:
    if a.get(r, {}) != b.get(r, {}):
      return False
  return True


def copy_instance(inst: Instance) -> Instance:
  return {r: dict(m) for r, m in inst.items()}


def _expr_int_literals(e: Expr) -> set[int]:
  out: set[int] = set()

  def terms_of(t: Term):
    match t:
      case IConst(v):
        out.add(v)
      case Arith(_, l, r):
        terms_of(l)
        terms_of(r)
      case _:
        pass

  def go(e: Expr):
    match e:
      case RelAtom(_, args):
        for a in args:
          terms_of(a)
      case Plus(l, r) | Times(l, r):
        go(l)
        go(r)
      case Sum(_, body):
        go(body)
      case Cast(Cmp(_, l, r)):
        terms_of(l)
        terms_of(r)
      case Cast(RelPred(_, args)):
        for a in args:
          terms_of(a)
      case ValueTerm(t):
        terms_of(t)
      case Fn(_, args):
        for a in args:
          go(a)
      case IfThenElse(p, t, f):
        match p:
          case Cmp(_, l, r):
            terms_of(l)
            terms_of(r)
          case RelPred(_, args):
            for a in args:
              terms_of(a)
        go(t)
        go(f)
      case _:
        pass

  go(e)
  return out


def active_domain(program: Program, inst: Instance) -> list[int]:
  dom: set[int] = set()
  for rel, tuples in inst.items():
    for key in tuples:
      dom.update(key)
  dom.update(program.constants.values())
  for st in program.strata:
    for r in st.rules:
      dom.update(_expr_int_literals(r.body))
  return sorted(dom)
