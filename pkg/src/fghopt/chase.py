"""A small bounded chase over conjunctions of relation atoms and linear
comparisons. Used to justify constraint-dependent rewrites (disjointness of
case branches, unique witnesses under key constraints) and to check candidate
invariants on symbolic iterates."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

from .ir import (
  Arith, Cmp, IConst, Pred, RelPred, Term, Var, canon_cmp, linearize,
  pred_vars, subst_pred, subst_term, term_vars)
from .parser import Implication, KeyConstraint, WitnessDecl


def _canon_pred(p: Pred) -> Pred:
  match p:
    case Cmp():
      return canon_cmp(p)
    case RelPred(rel, args):
      from .ir import canon_term
      return RelPred(rel, tuple(canon_term(a) for a in args))
  raise TypeError(p)


def _contradictory(facts: frozenset[Pred]) -> bool:
  eqs = set()
  for p in facts:
    match p:
      case Cmp("=", l, r):
        if isinstance(l, IConst) and isinstance(r, IConst) and l.value != r.value:
          return True
        eqs.add((l, r))
      case Cmp("!=", l, r):
        if l == r:
          return True
        if isinstance(l, IConst) and isinstance(r, IConst) and l.value == r.value:
          return True
      case Cmp("<=", l, r):
        if isinstance(l, IConst) and isinstance(r, IConst) and l.value > r.value:
          return True
  for p in facts:
    match p:
      case Cmp("!=", l, r):
        if (l, r) in eqs or (r, l) in eqs:
          return True
  return False


def _solve_eq(p: Pred):
  """Solve a linear equality for a variable with unit coefficient, giving
  (name, term) with name not occurring in term."""
  match p:
    case Cmp("=", l, r):
      lin = linearize(Arith("-", l, r))
      if lin is None:
        return None
      const, coeffs = lin
      for name in sorted(coeffs):
        a = coeffs[name]
        if a not in (1, -1):
          continue
        # a*name + rest + const = 0  =>  name = (-const - rest) / a
        t: Term = IConst(-const * a)
        for k in sorted(coeffs):
          if k == name:
            continue
          t = Arith("-", t, Arith("*", IConst(coeffs[k] * a), Var(k)))
        from .ir import canon_term
        return name, canon_term(t)
  return None


def _apply_equalities(facts: set[Pred]) -> set[Pred]:
  """Substitute x := t for every equality between a variable and a term not
  containing it, then re-canonicalize."""
  changed = True
  while changed:
    changed = False
    sub = None
    for p in facts:
      match p:
        case Cmp("=", Var(name), r) if name not in term_vars(r):
          sub = (name, r)
        case Cmp("=", l, Var(name)) if name not in term_vars(l):
          sub = (name, l)
        case Cmp("=", _, _):
          sub = _solve_eq(p)
      if sub:
        break
    if sub:
      name, t = sub
      env = {name: t}
      new = set()
      for p in facts:
        q = _canon_pred(subst_pred(p, env))
        match q:
          case Cmp("=", l, r) if l == r:
            continue
        new.add(q)
      new.add(_canon_pred(Cmp("=", Var(name), t)))
      if new != facts:
        facts = new
        changed = True
      else:
        break
  return facts


def _match_pred(pattern: Pred, fact: Pred, env: dict[str, Term]):
  """One-way matching of a constraint-body pattern against a fact."""
  match pattern, fact:
    case RelPred(r1, a1), RelPred(r2, a2):
      if r1 != r2 or len(a1) != len(a2):
        return None
      env = dict(env)
      for p, f in zip(a1, a2):
        match p:
          case Var(name):
            if name in env:
              if env[name] != f:
                return None
            else:
              env[name] = f
          case _:
            if subst_term(p, env) != f:
              return None
      return env
    case _:
      return None


def _cmp_entailed(c: Cmp, facts: frozenset[Pred]) -> bool:
  c = canon_cmp(c)
  match c:
    case Cmp("=", l, r) if l == r:
      return True
    case Cmp(op, IConst(a), IConst(b)):
      from .ir import _CMP_EVAL
      return _CMP_EVAL[op](a, b)
  if c in facts:
    return True
  match c:
    case Cmp("=", l, r):
      return canon_cmp(Cmp("=", r, l)) in facts
    case Cmp("!=", l, r):
      return canon_cmp(Cmp("!=", r, l)) in facts
  return False


class Chase:
  def __init__(self, constraints, max_depth: int = 4, max_facts: int = 200):
    self.implications = [c for c in constraints if isinstance(c, Implication)]
    self.keys = [c for c in constraints if isinstance(c, KeyConstraint)]
    self.max_depth = max_depth
    self.max_facts = max_facts
    self._fresh = itertools.count()

  def _rename(self, imp: Implication) -> Implication:
    vs = set()
    for p in imp.body:
      vs |= pred_vars(p)
    for conj in imp.head:
      for p in conj:
        vs |= pred_vars(p)
    env = {v: Var(f"c%{next(self._fresh)}") for v in vs}
    return Implication(
      tuple(subst_pred(p, env) for p in imp.body),
      tuple(tuple(subst_pred(p, env) for p in conj) for conj in imp.head))

  def _matches(self, body, facts, env):
    if not body:
      yield env
      return
    first, rest = body[0], body[1:]
    match first:
      case RelPred():
        for f in facts:
          e2 = _match_pred(first, f, env)
          if e2 is not None:
            yield from self._matches(rest, facts, e2)
      case Cmp():
        inst = subst_pred(first, env)
        if not (pred_vars(inst) - set()):
          if _cmp_entailed(inst, facts):
            yield from self._matches(rest, facts, env)
        else:
          if _cmp_entailed(inst, facts):
            yield from self._matches(rest, facts, env)

  def _key_equalities(self, facts):
    """Functional-dependency firing: two facts of a relation agreeing on the
    key columns force the remaining columns equal."""
    out = []
    for kc in self.keys:
      rel_facts = [f for f in facts
                   if isinstance(f, RelPred) and f.rel == kc.rel]
      for f1, f2 in itertools.combinations(rel_facts, 2):
        if len(f1.args) != len(f2.args):
          continue
        if all(f1.args[p - 1] == f2.args[p - 1] for p in kc.key_positions):
          for i, (a, b) in enumerate(zip(f1.args, f2.args)):
            if (i + 1) not in kc.key_positions and a != b:
              out.append(canon_cmp(Cmp("=", a, b)))
    return out

  def refutes(self, preds, depth: int | None = None) -> bool:
    """True when the conjunction of preds is inconsistent with the
    constraints (every case-split branch reaches a contradiction)."""
    if depth is None:
      depth = self.max_depth
    facts = {_canon_pred(p) for p in preds}
    facts = _apply_equalities(facts)
    for _ in range(self.max_depth * 4):
      frozen = frozenset(facts)
      if _contradictory(frozen):
        return True
      if len(facts) > self.max_facts:
        return False
      new = set(self._key_equalities(frozen))
      splits = []
      for imp in self.implications:
        ren = self._rename(imp)
        for env in self._matches(list(ren.body), frozen, {}):
          heads = [tuple(_canon_pred(subst_pred(p, env)) for p in conj)
                   for conj in ren.head]
          if len(heads) == 1:
            for p in heads[0]:
              if p not in frozen:
                new.add(p)
          else:
            if not any(set(conj) <= frozen for conj in heads):
              splits.append(heads)
      new -= facts
      if new:
        facts |= new
        facts = _apply_equalities(facts)
        continue
      if splits and depth > 0:
        heads = splits[0]
        return all(self.refutes(facts | set(conj), depth - 1)
                   for conj in heads)
      return False
    return False

  def entails(self, preds, goal: tuple[tuple[Pred, ...], ...],
              depth: int | None = None) -> bool:
    """True when the conjunction of preds together with the constraints
    entails the disjunction-of-conjunctions goal."""
    if depth is None:
      depth = self.max_depth
    facts = {_canon_pred(p) for p in preds}
    facts = _apply_equalities(facts)
    frozen = frozenset(facts)
    if _contradictory(frozen):
      return True

    def disjunct_holds(conj):
      for env in self._matches(list(conj), frozen, {}):
        ok = True
        for p in conj:
          inst = _canon_pred(subst_pred(p, env))
          if isinstance(inst, Cmp):
            if not _cmp_entailed(inst, frozen):
              ok = False
              break
          elif inst not in frozen:
            ok = False
            break
        if ok:
          return True
      return False

    # goal predicates are closed over the facts' variables, so matching is
    # syntactic after applying the equalities recorded in the fact set
    eqs = {}
    for p in frozen:
      match p:
        case Cmp("=", Var(name), r) if name not in term_vars(r):
          eqs[name] = r
    for conj in goal:
      inst = [_canon_pred(subst_pred(p, eqs)) for p in conj]
      if all(_cmp_entailed(p, frozen) if isinstance(p, Cmp)
             else p in frozen for p in inst):
        return True
    if depth <= 0:
      return False
    # saturate one round and case-split
    new = set(self._key_equalities(frozen))
    splits = []
    for imp in self.implications:
      ren = self._rename(imp)
      for env in self._matches(list(ren.body), frozen, {}):
        heads = [tuple(_canon_pred(subst_pred(p, env)) for p in conj)
                 for conj in ren.head]
        if len(heads) == 1:
          for p in heads[0]:
            if p not in frozen:
              new.add(p)
        else:
          if not any(set(conj) <= frozen for conj in heads):
            splits.append(heads)
    new -= facts
    if new and len(facts) + len(new) <= self.max_facts:
      return self.entails(facts | new, goal, depth - 1)
    if splits:
      heads = splits[0]
      return all(self.entails(facts | set(conj), goal, depth - 1)
                 for conj in heads)
    return False

  def disjoint(self, preds_a, preds_b) -> bool:
    """True when the two conjunctions cannot hold simultaneously."""
    return self.refutes(list(preds_a) + list(preds_b))

  def unique_witness(self, var: str, preds) -> bool:
    """True when at most one value of var can satisfy the conjunction, given
    a key constraint that pins it down."""
    for kc in self.keys:
      for p in preds:
        match p:
          case RelPred(rel, args) if rel == kc.rel:
            key_ok = all(var not in term_vars(args[i - 1])
                         for i in kc.key_positions)
            det = any(args[i] == Var(var)
                      for i in range(len(args))
                      if (i + 1) not in kc.key_positions)
            if key_ok and det:
              return True
    # equality with a var-free term also pins the variable down
    for p in preds:
      match p:
        case Cmp("=", l, r):
          if l == Var(var) and var not in term_vars(r):
            return True
          if r == Var(var) and var not in term_vars(l):
            return True
    return False
