"""Synthesis of the optimized recursion H from X :- F(X) and Y :- G(X),
so that G(F(X)) = H(G(X)).

Three routes, tried in order by the driver: rule-based denormalization
through the e-graph, the special case where G is a pre-mappable function
(G(F(X)) = G(F(G(X))) gives H = G after F), and counterexample-guided
search over a small typed candidate grammar."""
from __future__ import annotations

import itertools
import random
import time
from dataclasses import dataclass, field
from typing import Iterator, Optional

from .compose import RelDef, compose, defs_of_rules, subst_relation
from .egraph import EgraphError, denormalize
from .ir import (
  Arith, BoolCast, Cast, Cmp, Const, Expr, Fn, IConst, IfThenElse, Plus,
  Program, RelAtom, RelPred, Rule, Stratum, Sum, Term, Times, ValueTerm, Var,
  expr_size, free_vars, substitute, sum_over, term_vars)
from .normal import NormalizeError, normalize, to_expr
from .parser import Invariant, WitnessDecl, expr_to_str
from .semiring import Semiring, get_semiring
from .verify import (
  VerifyOptions, VerifyOutcome, _collect_rels, _domain_of, _eval_form,
  _gamma_holds, _materialize_witnesses, _pseudo_program, check_bounded,
  verify_equiv)


class SynthesisError(Exception):
  pass


class NonlinearError(SynthesisError):
  pass


@dataclass
class SynthStats:
  method: str = ""
  candidates_tried: int = 0
  search_space: int = 0
  cex_bank: int = 0
  prefiltered: int = 0
  seconds: float = 0.0


@dataclass
class SynthResult:
  rules: list[Rule]
  method: str
  outcome: VerifyOutcome
  stats: SynthStats = field(default_factory=SynthStats)


# ---------------------------------------------------------------------------
# Helpers

def _idb_atoms(e: Expr, idbs: frozenset[str]) -> int:
  match e:
    case RelAtom(rel, _) | Cast(RelPred(rel, _)):
      return 1 if rel in idbs else 0
    case Plus(l, r) | Times(l, r):
      return _idb_atoms(l, idbs) + _idb_atoms(r, idbs)
    case Sum(_, b) | BoolCast(b):
      return _idb_atoms(b, idbs)
    case Fn(_, args):
      return sum(_idb_atoms(a, idbs) for a in args)
    case IfThenElse(_, t, f):
      return max(_idb_atoms(t, idbs), _idb_atoms(f, idbs))
  return 0


def k_max_of(f_stratum: Stratum) -> int:
  idbs = frozenset(f_stratum.idbs)
  return max((_idb_atoms(r.body, idbs) for r in f_stratum.rules), default=0)


def inline_helpers(stratum: Stratum, program: Program) -> list[Rule]:
  """Rules for the stratum's non-helper heads with helper definitions of
  the same stratum substituted in."""
  helpers = {r.head_rel for r in stratum.rules
             if r.head_rel in program.helpers}
  if not helpers:
    return list(stratum.rules)
  hdefs = defs_of_rules([r for r in stratum.rules if r.head_rel in helpers],
                        stratum.semiring)
  out = []
  for r in stratum.rules:
    if r.head_rel in helpers:
      continue
    body = r.body
    for _ in range(len(helpers) + 1):
      body = subst_relation(body, hdefs, stratum.semiring)
    out.append(Rule(r.head_rel, r.head_vars, body))
  return out


def compose_gf(f_stratum: Stratum, g_stratum: Stratum,
               program: Program) -> list[Rule]:
  g_rules = inline_helpers(g_stratum, program)
  return compose(g_rules, g_stratum.semiring, f_stratum.rules,
                 f_stratum.semiring)


# ---------------------------------------------------------------------------
# Type inference over relation columns

def infer_types(program: Program) -> dict[str, tuple[str, ...]]:
  """Column types ('id' or 'int') per relation: declared attribute names
  containing 'int' are int, and int-ness propagates through rule variables
  used in arithmetic or as values."""
  types: dict[str, list[str]] = {}
  for rel, decl in program.edbs.items():
    types[rel] = ["int" if "int" in a else "id" for a in decl.attrs]
  for st in program.strata:
    for r in st.rules:
      types.setdefault(r.head_rel, ["id"] * len(r.head_vars))

  def mark(vt: dict[str, str], v: str):
    vt[v] = "int"

  changed = True
  while changed:
    changed = False
    for st in program.strata:
      for r in st.rules:
        vt: dict[str, str] = {}

        def visit_term(t: Term, ty: str):
          match t:
            case Var(name):
              if ty == "int" and vt.get(name) != "int":
                vt[name] = "int"
            case Arith(_, l, r2):
              visit_term(l, "int")
              visit_term(r2, "int")

        def visit(e: Expr):
          match e:
            case RelAtom(rel, args) | Cast(RelPred(rel, args)):
              for i, a in enumerate(args):
                ty = types[rel][i] if rel in types and \
                  i < len(types[rel]) else "id"
                visit_term(a, ty)
                match a:
                  case Arith():
                    if rel in types and i < len(types[rel]) and \
                       types[rel][i] != "int":
                      types[rel][i] = "int"
            case Cast(Cmp(_, l, r2)):
              lin = isinstance(l, Arith) or isinstance(r2, Arith) or \
                isinstance(l, IConst) or isinstance(r2, IConst)
              if lin:
                visit_term(l, "int")
                visit_term(r2, "int")
            case ValueTerm(t):
              visit_term(t, "int")
            case Plus(l, r2) | Times(l, r2):
              visit(l)
              visit(r2)
            case Sum(_, b) | BoolCast(b):
              visit(b)
            case Fn(_, args):
              for a in args:
                visit(a)
            case IfThenElse(_, t, f2):
              visit(t)
              visit(f2)

        visit(r.body)
        # propagate int variables back into relation columns

        def push(e: Expr):
          match e:
            case RelAtom(rel, args) | Cast(RelPred(rel, args)):
              for i, a in enumerate(args):
                match a:
                  case Var(name) if vt.get(name) == "int":
                    if rel in types and i < len(types[rel]) and \
                       types[rel][i] != "int":
                      types[rel][i] = "int"
                      nonlocal changed
                      changed = True
            case Plus(l, r2) | Times(l, r2):
              push(l)
              push(r2)
            case Sum(_, b) | BoolCast(b):
              push(b)
            case Fn(_, args):
              for a in args:
                push(a)
            case IfThenElse(_, t, f2):
              push(t)
              push(f2)

        push(r.body)
        ht = ["int" if vt.get(v) == "int" else types[r.head_rel][i]
              for i, v in enumerate(r.head_vars)]
        if list(types[r.head_rel]) != ht:
          merged = ["int" if "int" in (a, b) else "id"
                    for a, b in zip(types[r.head_rel], ht)]
          if merged != list(types[r.head_rel]):
            types[r.head_rel] = merged
            changed = True
  return {rel: tuple(ts) for rel, ts in types.items()}


def _int_literals(stratum: Stratum) -> set[int]:
  from .ir import _expr_int_literals
  out: set[int] = set()
  for r in stratum.rules:
    out |= _expr_int_literals(r.body)
  return out


# ---------------------------------------------------------------------------
# Grammar

FRESH = ("z1", "z2")


@dataclass
class Grammar:
  y_rel: str
  y_vars: tuple[str, ...]
  y_types: tuple[str, ...]
  semiring: Semiring
  h0: Optional[Expr]
  y_arg_pools: list[list[Term]]
  atom_menu: list[Expr]       # relation factors for the recursive term
  const_menu: list[Expr]      # constant factors for the recursive term
  sub_items: list[Expr]       # operands for the subtraction shape
  identity_candidate: Optional[Expr]
  k_max: int

  def size(self) -> int:
    return sum(1 for _ in enumerate_candidates(self))


def _x_free_part(p1_body: Expr, sr: Semiring, head_vars, constraints,
                 idbs: frozenset[str]) -> Optional[Expr]:
  """The non-recursive part of P1, read off by emptying the recursive
  relations; for a linear F it must reappear verbatim in normalize(H(G(X)))."""
  try:
    nf = normalize(p1_body, sr, head_vars, constraints, empty_rels=idbs)
  except NormalizeError:
    return None
  if not nf.terms:
    return None
  return to_expr(nf, sr)


def build_grammar(program: Program, f_stratum: Stratum, g_stratum: Stratum,
                  constraints=()) -> Grammar:
  k = k_max_of(f_stratum)
  if k > 1:
    raise NonlinearError(
      f"the recursive stratum has {k} recursive atoms in one rule; "
      "candidate generation is restricted to linear programs")
  sr = g_stratum.semiring
  g_rules = inline_helpers(g_stratum, program)
  outs = [r for r in g_rules if r.head_rel in program.outputs] or g_rules
  if len({r.head_rel for r in outs}) != 1:
    raise SynthesisError("the query stratum must define a single relation")
  y_rel = outs[0].head_rel
  y_vars = outs[0].head_vars
  types = infer_types(program)
  y_types = tuple(types.get(y_rel, ("id",) * len(y_vars)))

  p1 = compose_gf(f_stratum, g_stratum, program)
  p1_body = defs_of_rules(p1, sr)[y_rel].body
  idbs = frozenset(f_stratum.idbs)
  h0 = _x_free_part(p1_body, sr, y_vars, constraints, idbs)

  shifts = sorted(c for c in _int_literals(g_stratum) | _int_literals(
    f_stratum) if 0 < c <= 1000)[:4]

  def pool(ty: str, hv: str) -> list[Term]:
    out: list[Term] = [Var(hv)]
    if ty == "int":
      for c in shifts:
        out.append(Arith("-", Var(hv), IConst(c)))
    out.extend(Var(z) for z in FRESH[:1])
    return out

  y_arg_pools = [pool(t, v) for t, v in zip(y_types, y_vars)]

  # relation atoms over the head variables and one fresh binder, and the
  # strata's integer literals as constant factors
  atom_menu: list[Expr] = []
  const_menu: list[Expr] = []
  base_rels = dict(program.edbs)
  for st in program.strata:
    if st is f_stratum or st is g_stratum:
      break
    for r in st.rules:
      if r.head_rel in base_rels:
        continue
      base_rels[r.head_rel] = None
  id_pool = [Var(v) for v, t in zip(y_vars, y_types) if t == "id"] + \
    [Var(FRESH[0])]
  for rel in sorted(base_rels):
    ts = types.get(rel)
    arity = len(ts) if ts else program.rel_arity(rel)
    if ts is None:
      ts = ("id",) * arity
    arg_opts = []
    for ty in ts:
      # int positions admit any head variable: in programs where vertex ids
      # double as values the inferred types blur the id/int split
      arg_opts.append(id_pool if ty == "id" else
                      [Var(v) for v in y_vars] + [Var(FRESH[0])])
    for args in itertools.product(*arg_opts):
      names = set()
      for a in args:
        names |= term_vars(a)
      if not names & (set(y_vars) | set(FRESH)):
        continue
      rsr = program.rel_semiring(rel)
      atom: Expr = RelAtom(rel, args) if rsr is None or rsr.name == sr.name \
        else Cast(RelPred(rel, args))
      atom_menu.append(atom)
  if sr.name in ("trop", "natinf"):
    for c in sorted(_int_literals(f_stratum) | _int_literals(g_stratum)):
      if c != sr.zero and c != sr.one and 0 <= c <= 1000:
        const_menu.append(Const(c))

  # right operands for the subtraction shape: value lookups with shifted
  # head arguments
  sub_items: list[Expr] = []
  if sr.name == "natinf" and _mentions_sub(g_stratum):
    for rel in sorted(program.edbs):
      ts = types.get(rel, ())
      if len(ts) >= 2 and ts[-1] == "int" and \
         all(t == "int" for t in ts[:-1]):
        pools = [[Var(v)] + [Arith("-", Var(v), IConst(c)) for c in shifts]
                 for v, t in zip(y_vars, y_types) if t == "int"]
        if len(pools) == len(ts) - 1:
          w = Var(FRESH[1])
          for args in itertools.product(*pools):
            sub_items.append(Sum(w.name, Times(
              ValueTerm(w), Cast(RelPred(rel, tuple(args) + (w,))))))

  identity = None
  if len(idbs) == 1 and len(outs) >= 1:
    x = next(iter(idbs))
    f_defs = defs_of_rules(f_stratum.rules, f_stratum.semiring)
    if x in f_defs and len(f_defs[x].head_vars) == len(y_vars):
      body = substitute(f_defs[x].body,
                        dict(zip(f_defs[x].head_vars, map(Var, y_vars))))
      identity = _rename_rel(body, x, y_rel)
  return Grammar(y_rel, y_vars, y_types, sr, h0, y_arg_pools, atom_menu,
                 const_menu, sub_items, identity, k)


def _mentions_sub(stratum: Stratum) -> bool:
  def go(e):
    match e:
      case Fn("sub", _):
        return True
      case Plus(l, r) | Times(l, r):
        return go(l) or go(r)
      case Sum(_, b) | BoolCast(b):
        return go(b)
      case Fn(_, args):
        return any(go(a) for a in args)
      case IfThenElse(_, t, f):
        return go(t) or go(f)
    return False
  return any(go(r.body) for r in stratum.rules)


def _rename_rel(e: Expr, old: str, new: str) -> Expr:
  match e:
    case RelAtom(rel, args):
      return RelAtom(new if rel == old else rel, args)
    case Cast(RelPred(rel, args)):
      return Cast(RelPred(new if rel == old else rel, args))
    case Plus(l, r):
      return Plus(_rename_rel(l, old, new), _rename_rel(r, old, new))
    case Times(l, r):
      return Times(_rename_rel(l, old, new), _rename_rel(r, old, new))
    case Sum(v, b):
      return Sum(v, _rename_rel(b, old, new))
    case BoolCast(b):
      return BoolCast(_rename_rel(b, old, new))
    case Fn(name, args):
      return Fn(name, tuple(_rename_rel(a, old, new) for a in args))
    case IfThenElse(p, t, f):
      return IfThenElse(p, _rename_rel(t, old, new), _rename_rel(f, old, new))
    case _:
      return e


def enumerate_candidates(grammar: Grammar) -> Iterator[Expr]:
  """All candidate H bodies, deduplicated; ordering is applied later."""
  g = grammar
  seen: set[str] = set()

  def emit(e: Expr):
    key = repr(e)
    if key not in seen:
      seen.add(key)
      yield e

  if g.identity_candidate is not None:
    yield from emit(g.identity_candidate)

  def rec_terms():
    for args in itertools.product(*g.y_arg_pools):
      y_atom = RelAtom(g.y_rel, tuple(args))
      used = set()
      for a in args:
        used |= term_vars(a)
      fresh_used = used & set(FRESH)
      if fresh_used:
        # a fresh summation binder must be joined to a relation factor
        atoms = [a for a in g.atom_menu
                 if fresh_used <= free_vars(a)]
        extra_sets = [(a,) for a in atoms] + \
          [(a, c) for a in atoms for c in g.const_menu]
      else:
        atoms = [a for a in g.atom_menu if not free_vars(a) & set(FRESH)]
        extra_sets = [()] + [(a,) for a in atoms] + \
          [(c,) for c in g.const_menu] + \
          [(a, c) for a in atoms for c in g.const_menu]
      for extras in extra_sets:
        factors = [y_atom, *extras]
        body = factors[0]
        for f in factors[1:]:
          body = Times(body, f)
        yield sum_over(sorted(fresh_used), body)

  for rec in rec_terms():
    h = rec if g.h0 is None else Plus(g.h0, rec)
    yield from emit(h)

  for sub_r in g.sub_items:
    for args in itertools.product(*g.y_arg_pools):
      if any(term_vars(a) & set(FRESH) for a in args):
        continue
      y_atom = RelAtom(g.y_rel, tuple(args))
      for sub_l in g.sub_items:
        h = Fn("sub", (Plus(y_atom, sub_l), sub_r))
        yield from emit(h)


# ---------------------------------------------------------------------------
# PreM

def prem_check(program: Program, f_stratum: Stratum, g_stratum: Stratum,
               constraints=(), options: Optional[VerifyOptions] = None
               ) -> Optional[SynthResult]:
  """If G maps into X's own schema and G(F(X)) = G(F(G(X))), then H is G
  composed after F."""
  sr = g_stratum.semiring
  if sr.name != f_stratum.semiring.name:
    return None
  g_rules = inline_helpers(g_stratum, program)
  f_defs = defs_of_rules(f_stratum.rules, f_stratum.semiring)
  by_head: dict[str, Rule] = {}
  for r in g_rules:
    if r.head_rel in by_head:
      return None
    by_head[r.head_rel] = r
  if len(by_head) != len(f_defs):
    return None
  pairing = {}
  for rel, d in f_defs.items():
    cands = [r for r in g_rules
             if len(r.head_vars) == len(d.head_vars) and
             _idb_atoms(r.body, frozenset({rel})) > 0]
    if len(cands) != 1:
      return None
    pairing[rel] = cands[0]
  p1 = compose_gf(f_stratum, g_stratum, program)
  fg = compose(f_stratum.rules, f_stratum.semiring, g_rules, sr)
  p2 = compose(g_rules, sr, fg, sr)
  outcome = None
  for r1, r2 in zip(p1, p2):
    outcome = verify_equiv(r1.body, r2.body, sr, r1.head_vars, constraints,
                           program, options)
    if not outcome.ok:
      return None
  h_rules = []
  for rel, gr in pairing.items():
    ren = {rel2: pairing[rel2].head_rel for rel2 in pairing}
    body = subst_relation(gr.body, f_defs, sr)
    for old, new in ren.items():
      body = _rename_rel(body, old, new)
    h_rules.append(Rule(gr.head_rel, gr.head_vars, body))
  stats = SynthStats(method="prem")
  return SynthResult(h_rules, "prem", outcome, stats)


# ---------------------------------------------------------------------------
# Rule-based synthesis

def rule_based_synthesis(program: Program, f_stratum: Stratum,
                         g_stratum: Stratum, constraints=(),
                         options: Optional[VerifyOptions] = None
                         ) -> Optional[SynthResult]:
  sr = g_stratum.semiring
  g_rules = inline_helpers(g_stratum, program)
  p1 = compose_gf(f_stratum, g_stratum, program)
  forbid = frozenset(f_stratum.idbs)
  start = time.monotonic()
  h_rules = []
  try:
    for r in p1:
      h = denormalize(r.body, g_rules, {}, sr, r.head_vars, constraints,
                      forbid)
      h_rules.append(Rule(r.head_rel, r.head_vars, h))
  except (EgraphError, NormalizeError):
    return None
  outcome = None
  p2 = compose(h_rules, sr, g_rules, sr)
  for r1, r2 in zip(p1, p2):
    outcome = verify_equiv(r1.body, r2.body, sr, r1.head_vars, constraints,
                           program, options)
    if not outcome.ok:
      return None
  stats = SynthStats(method="rule", seconds=time.monotonic() - start)
  return SynthResult(h_rules, "rule", outcome, stats)


# ---------------------------------------------------------------------------
# CEGIS

def _candidate_order(cands: list[Expr], seed: Optional[int]) -> list[Expr]:
  if seed is not None:
    rng = random.Random(seed)
    cands = list(cands)
    rng.shuffle(cands)
  return sorted(cands, key=lambda e: (expr_size(e), repr(e)))


def cegis(program: Program, f_stratum: Stratum, g_stratum: Stratum,
          constraints=(), options: Optional[VerifyOptions] = None,
          grammar: Optional[Grammar] = None, max_candidates: int = 1000,
          max_time: float = 60.0, seed: Optional[int] = None
          ) -> Optional[SynthResult]:
  opts = options or VerifyOptions()
  sr = g_stratum.semiring
  if grammar is None:
    grammar = build_grammar(program, f_stratum, g_stratum, constraints)
  g_rules = inline_helpers(g_stratum, program)
  p1 = compose_gf(f_stratum, g_stratum, program)
  p1_def = defs_of_rules(p1, sr)[grammar.y_rel]

  sigs: dict[str, tuple[int, str]] = {}
  _collect_rels(p1_def.body, program, sr, sigs)
  for rel, decl in program.edbs.items():
    sigs.setdefault(rel, (decl.arity, decl.semiring.name))
  pseudo = _pseudo_program(sigs)
  p1_eval = _eval_form(p1_def.body, sr, p1_def.head_vars, constraints)

  cands = _candidate_order(list(enumerate_candidates(grammar)), seed)
  stats = SynthStats(method="cegis", search_space=len(cands))
  bank: list[tuple[dict, dict]] = []
  start = time.monotonic()

  from .interp import eval_expr

  def distinguished(h_body: Expr) -> bool:
    """True when some banked counterexample already separates P1 from the
    candidate's P2."""
    p2 = compose([Rule(grammar.y_rel, p1_def.head_vars, h_body)], sr,
                 g_rules, sr)[0]
    p2_eval = _eval_form(p2.body, sr, p2.head_vars, constraints)
    for inst, env in bank:
      adom = _domain_of(inst, env)
      try:
        if eval_expr(p1_eval, pseudo, inst, dict(env), sr, adom) != \
           eval_expr(p2_eval, pseudo, inst, dict(env), sr, adom):
          return True
      except Exception:
        return True
    return False

  for h_body in cands:
    if stats.candidates_tried >= max_candidates or \
       time.monotonic() - start > max_time:
      break
    stats.candidates_tried += 1
    if bank and distinguished(h_body):
      stats.prefiltered += 1
      continue
    p2 = compose([Rule(grammar.y_rel, p1_def.head_vars, h_body)], sr,
                 g_rules, sr)[0]
    quick = check_bounded(p1_def.body, p2.body, sr, p1_def.head_vars,
                          constraints, program, domain_size=opts.domain_size,
                          grid=opts.grid, samples=60, seed=opts.seed,
                          max_time=2.0)
    if quick.status == "counterexample":
      if quick.counterexample:
        bank.append(quick.counterexample)
      continue
    outcome = verify_equiv(p1_def.body, p2.body, sr, p1_def.head_vars,
                           constraints, program, opts)
    if outcome.ok:
      rule = Rule(grammar.y_rel, p1_def.head_vars, h_body)
      f_i = program.strata.index(f_stratum)
      g_i = program.strata.index(g_stratum)
      opt = optimized_program(program, f_i, g_i, [rule])
      sound, _ = soundness_check(program, opt, grammar.y_rel, constraints,
                                 seed=opts.seed)
      if not sound:
        continue
      stats.seconds = time.monotonic() - start
      stats.cex_bank = len(bank)
      return SynthResult([rule], "cegis", outcome, stats)
    if outcome.status == "counterexample" and outcome.counterexample:
      bank.append(outcome.counterexample)
  stats.seconds = time.monotonic() - start
  stats.cex_bank = len(bank)
  return None

# ---------------------------------------------------------------------------
# Whole-program checks

def optimized_program(program: Program, f_idx: int, g_idx: int,
                      h_rules: list[Rule]) -> Program:
  """The input program with the recursive stratum and the query stratum
  replaced by a single recursive stratum over the synthesized rules."""
  sr = program.strata[g_idx].semiring
  strata = []
  for i, st in enumerate(program.strata):
    if i == f_idx:
      strata.append(Stratum(semiring=sr, rules=list(h_rules)))
    elif i == g_idx:
      continue
    else:
      strata.append(st)
  helpers = {h for h in program.helpers
             if any(r.head_rel == h for st in strata for r in st.rules)}
  return Program(edbs=dict(program.edbs), strata=strata,
                 outputs=list(program.outputs),
                 constants=dict(program.constants), helpers=helpers,
                 constraints=list(program.constraints))


def soundness_check(program: Program, optimized: Program, out_rel: str,
                    constraints=(), trials: int = 20, seed: int = 0,
                    domain_size: Optional[int] = None, grid=(0, 1, 2, 5)
                    ) -> tuple[bool, int]:
  """Compare the original and optimized programs on random
  constraint-satisfying instances, sized to exercise any shift constants."""
  from .interp import eval_program
  if domain_size is None:
    lits: set[int] = set()
    for st in program.strata:
      lits |= _int_literals(st)
    big = max((c for c in lits if c <= 100), default=0)
    domain_size = min(max(4, big + 3), 16)
  rng = random.Random(seed)
  dom = list(range(domain_size))
  gamma = [c for c in constraints if not isinstance(c, Invariant)]
  wit_rels = {c.rel for c in gamma if isinstance(c, WitnessDecl)}
  from .verify import _key_map, _random_table, _tuple_filters
  filters = _tuple_filters(gamma)
  keycons = _key_map(gamma)
  done = 0
  attempts = 0
  while done < trials and attempts < trials * 20:
    attempts += 1
    inst = {}
    p = rng.choice((0.1, 0.2, 0.3))
    for rel, decl in program.edbs.items():
      if rel in wit_rels:
        continue
      inst[rel] = _random_table(rel, decl.arity, decl.semiring.name, dom,
                                rng, p, filters, keycons, grid)
    from .verify import _repair_instance
    _repair_instance(inst, gamma, program)
    mat = _materialize_witnesses(inst, gamma, program, dom)
    if mat is None or not _gamma_holds(mat, gamma, program, dom):
      continue
    iters = domain_size + 8
    from .interp import EvalError
    # evaluate over the full contiguous domain so recursions that step
    # through consecutive keys are not cut off by gaps in the instance
    try:
      r1 = eval_program(program, mat, max_iters=iters, extra_domain=dom)
    except EvalError:
      continue
    try:
      r2 = eval_program(optimized, mat, max_iters=iters, extra_domain=dom)
    except EvalError:
      # a candidate whose rewritten program cannot be evaluated is unsound
      return False, done
    t1 = r1.instance.get(out_rel, {})
    t2 = r2.instance.get(out_rel, {})
    if r1.converged and r2.converged:
      if t1 != t2:
        return False, done
    else:
      # divergent recursions (unbounded key generation) still stabilize
      # pointwise on the original domain after domain_size iterations
      dset = set(dom)
      if {k: v for k, v in t1.items() if set(k) <= dset} != \
         {k: v for k, v in t2.items() if set(k) <= dset}:
        return False, done
    done += 1
  return True, done
