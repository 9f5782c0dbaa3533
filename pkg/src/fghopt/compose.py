"""Composition of queries: substituting relation definitions into
expressions, used to build G(F(X)) and H(G(X)) for the equivalence checks."""
from __future__ import annotations

from dataclasses import dataclass

from .ir import (
  BoolCast, Cast, Const, Expr, Fn, IfThenElse, Plus, RelAtom, RelPred, Rule,
  Sum, Times, Var, plus_of, substitute)
from .semiring import Semiring, get_semiring

BOOL = get_semiring("bool")


@dataclass
class RelDef:
  head_vars: tuple[str, ...]
  body: Expr
  semiring: Semiring


def defs_of_rules(rules, semiring: Semiring) -> dict[str, RelDef]:
  """Collect one definition per head relation; multiple rules for one head
  are plus-combined."""
  out: dict[str, RelDef] = {}
  for r in rules:
    if r.head_rel in out:
      prev = out[r.head_rel]
      body = substitute(r.body, dict(zip(r.head_vars,
                                         map(Var, prev.head_vars))))
      out[r.head_rel] = RelDef(prev.head_vars, Plus(prev.body, body), semiring)
    else:
      out[r.head_rel] = RelDef(r.head_vars, r.body, semiring)
  return out


def subst_relation(e: Expr, defs: dict[str, RelDef],
                   target: Semiring) -> Expr:
  """Replace atoms of the defined relations by their bodies (with arguments
  substituted for the head variables). Boolean bodies landing in a non-Boolean
  context are wrapped in a cast of the compound expression."""

  def inline(rel, args):
    # one-level unfolding: atoms inside the inlined body denote the previous
    # iterate and are left alone
    d = defs[rel]
    body = substitute(d.body, dict(zip(d.head_vars, args)))
    if d.semiring.name != target.name:
      if d.semiring.name == "bool":
        return BoolCast(body)
      raise ValueError(
        f"cannot inline {rel} over {d.semiring.name} into {target.name}")
    return body

  def go(e: Expr) -> Expr:
    match e:
      case RelAtom(rel, args) if rel in defs:
        return inline(rel, args)
      case Cast(RelPred(rel, args)) if rel in defs:
        d = defs[rel]
        if d.semiring.name == "bool":
          return BoolCast(substitute(d.body, dict(zip(d.head_vars, args))))
        raise ValueError(f"cast of non-boolean definition {rel}")
      case Plus(l, r):
        return Plus(go(l), go(r))
      case Times(l, r):
        return Times(go(l), go(r))
      case Sum(v, body):
        return Sum(v, go(body))
      case Fn(name, args):
        return Fn(name, tuple(go(a) for a in args))
      case IfThenElse(p, t, f):
        match p:
          case RelPred(rel, _) if rel in defs:
            raise ValueError("relation guard of if-then-else cannot be inlined")
        return IfThenElse(p, go(t), go(f))
      case BoolCast(b):
        return BoolCast(subst_relation(b, defs, BOOL))
      case _:
        return e

  return go(e)


def compose(outer_rules, outer_sr: Semiring, inner_rules,
            inner_sr: Semiring) -> list[Rule]:
  """Build outer(inner(X)): substitute the inner definitions into every
  outer rule body."""
  defs = defs_of_rules(inner_rules, inner_sr)
  out = []
  for r in outer_rules:
    out.append(Rule(r.head_rel, r.head_vars,
                    subst_relation(r.body, defs, outer_sr)))
  return out
