"""Equivalence verification: rule-based (normalize + isomorphism), SMT via an
external solver subprocess, and a bounded model checker over small instances.
Also checks the three loop-invariant conditions."""
from __future__ import annotations

import itertools
import os
import random
import re
import shlex
import shutil
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .chase import Chase
from .compose import RelDef, subst_relation
from .ir import (
  Arith, BoolCast, Cast, Cmp, Const, Expr, IConst, Instance, Pred, Program,
  RelAtom, RelDecl, RelPred, Rule, Stratum, Sum, Term, Times, ValueTerm, Var,
  free_vars, pred_vars, term_vars)
from .interp import EvalError, apply_ico, eval_expr
from .normal import (
  NFn, NTerm, NormalForm, NormalizeError, iso_equal, normalize, term_iso_map,
  to_expr)
from .parser import Implication, Invariant, KeyConstraint, WitnessDecl
from .semiring import BOT, INF, Semiring, get_semiring

INFV = 10 ** 9
FINITE_BOUND = 10 ** 7


@dataclass
class VerifyOutcome:
  status: str  # 'valid' | 'bounded_valid' | 'counterexample' | 'unknown'
  method: str = ""
  counterexample: Optional[tuple[Instance, dict[str, int]]] = None
  detail: str = ""

  @property
  def is_valid(self):
    return self.status == "valid"

  @property
  def ok(self):
    return self.status in ("valid", "bounded_valid")


def _split_constraints(constraints):
  gamma, invs = [], []
  for c in constraints:
    if isinstance(c, Invariant):
      invs.append(c)
    else:
      gamma.append(c)
  return gamma, invs


# ---------------------------------------------------------------------------
# Rule-based check

def check_rule_based(e1: Expr, e2: Expr, sr: Semiring, head_vars=(),
                     constraints=()) -> VerifyOutcome:
  try:
    n1 = normalize(e1, sr, head_vars, constraints)
    n2 = normalize(e2, sr, head_vars, constraints)
  except NormalizeError as err:
    return VerifyOutcome("unknown", "rule", detail=str(err))
  if iso_equal(n1, n2):
    return VerifyOutcome("valid", "rule")
  return VerifyOutcome("unknown", "rule",
                       detail=f"normal forms differ:\n  {n1!r}\n  {n2!r}")


# ---------------------------------------------------------------------------
# Relation signature collection

def _collect_rels(e: Expr, program: Optional[Program], sr: Semiring,
                  sigs: dict[str, tuple[int, str]]):
  def decl(rel, arity, default):
    if rel in sigs:
      return
    if program is not None:
      s = program.rel_semiring(rel)
      a = program.rel_arity(rel)
      if s is not None:
        sigs[rel] = (a if a is not None else arity, s.name)
        return
    sigs[rel] = (arity, default)

  def go(e):
    match e:
      case RelAtom(rel, args):
        decl(rel, len(args), sr.name)
      case Cast(RelPred(rel, args)):
        decl(rel, len(args), "bool")
      case Cast(_) | Const(_) | ValueTerm(_):
        pass
      case Sum(_, b) | BoolCast(b):
        go(b)
      case Times(l, r):
        go(l)
        go(r)
      case _:
        match e:
          case NFn(_, args):
            for a in args:
              for t in a.terms:
                for f in t.all_factors():
                  go(f)
          case _:
            from .ir import Plus as _P, Fn as _F, IfThenElse as _I
            match e:
              case _P(l, r):
                go(l)
                go(r)
              case _F(_, args):
                for a in args:
                  go(a)
              case _I(_, t, f):
                go(t)
                go(f)

  go(e)


def _pred_rels(p: Pred, sigs, program):
  match p:
    case RelPred(rel, args):
      if rel not in sigs:
        s = program.rel_semiring(rel) if program else None
        sigs[rel] = (len(args), s.name if s else "bool")


# ---------------------------------------------------------------------------
# SMT encoding

class EncodeError(Exception):
  pass


class _SmtEncoder:
  def __init__(self, sr: Semiring, sigs: dict[str, tuple[int, str]]):
    if sr.name in ("natbot", "maxnat"):
      raise EncodeError(f"no SMT encoding for {sr.name}")
    self.sr = sr
    self.sigs = sigs
    self.decls: list[str] = []
    self.asserts: list[str] = []
    self.consts: dict[str, str] = {}  # name -> sort
    self._declared_rels: set[str] = set()
    self._u_declared: set[str] = set()
    self._fresh = itertools.count()

  # -- sorts and helpers ----------------------------------------------------

  def sort_of(self, srname: str) -> str:
    return "Bool" if srname == "bool" else "Int"

  def zero(self, srname: str) -> str:
    return {"bool": "false", "trop": str(INFV), "natinf": "0"}[srname]

  def one(self, srname: str) -> str:
    return {"bool": "true", "trop": "0", "natinf": "1"}[srname]

  def plus(self, a, b) -> str:
    n = self.sr.name
    if n == "bool":
      return f"(or {a} {b})"
    if n == "trop":
      return f"(ite (< {a} {b}) {a} {b})"
    return f"(ite (or (>= {a} {INFV}) (>= {b} {INFV})) {INFV} (+ {a} {b}))"

  def times(self, a, b) -> str:
    n = self.sr.name
    if n == "bool":
      return f"(and {a} {b})"
    if n == "trop":
      return f"(ite (or (>= {a} {INFV}) (>= {b} {INFV})) {INFV} (+ {a} {b}))"
    return (f"(ite (or (= {a} 0) (= {b} 0)) 0 "
            f"(ite (or (>= {a} {INFV}) (>= {b} {INFV})) {INFV} (* {a} {b})))")

  def cast(self, cond: str) -> str:
    n = self.sr.name
    if n == "bool":
      return cond
    return f"(ite {cond} {self.one(n)} {self.zero(n)})"

  def declare_const(self, name: str, sort: str = "Int"):
    if name not in self.consts:
      self.consts[name] = sort
      self.decls.append(f"(declare-const {name} {sort})")

  def declare_rel(self, rel: str):
    if rel in self._declared_rels:
      return
    self._declared_rels.add(rel)
    arity, srname = self.sigs[rel]
    argsorts = " ".join(["Int"] * arity)
    ret = self.sort_of(srname)
    self.decls.append(f"(declare-fun {rel} ({argsorts}) {ret})")
    if ret == "Int":
      xs = [f"x{i}" for i in range(arity)]
      binds = " ".join(f"({x} Int)" for x in xs)
      app = f"({rel} {' '.join(xs)})" if xs else f"({rel})"
      if arity:
        self.asserts.append(
          f"(assert (forall ({binds}) (and (<= 0 {app}) "
          f"(or (= {app} {INFV}) (< {app} {FINITE_BOUND})))))")
      else:
        self.asserts.append(
          f"(assert (and (<= 0 {app}) "
          f"(or (= {app} {INFV}) (< {app} {FINITE_BOUND}))))")

  def u_fun(self) -> str:
    n = self.sr.name
    name = f"u_{n}"
    if name not in self._u_declared:
      self._u_declared.add(name)
      s = self.sort_of(n)
      self.decls.append(f"(declare-fun {name} (Int {s}) {s})")
      if s == "Int":
        self.asserts.append(
          f"(assert (forall ((a Int) (b Int)) (and (<= 0 ({name} a b)) "
          f"(or (= ({name} a b) {INFV}) (< ({name} a b) {FINITE_BOUND})))))")
    return name

  # -- terms ---------------------------------------------------------------

  def enc_term(self, t: Term, env: dict[str, str]) -> str:
    match t:
      case Var(name):
        if name not in env:
          sym = f"fv_{name}"
          self.declare_const(sym)
          env[name] = sym
        return env[name]
      case IConst(v):
        return str(v) if v >= 0 else f"(- {-v})"
      case Arith(op, l, r):
        if op == "/":
          raise EncodeError("division in key term")
        return f"({op} {self.enc_term(l, env)} {self.enc_term(r, env)})"
    raise TypeError(t)

  def enc_pred(self, p: Pred, env) -> str:
    match p:
      case Cmp(op, l, r):
        sop = {"=": "=", "!=": "distinct", "<": "<", "<=": "<=",
               ">": ">", ">=": ">="}[op]
        return f"({sop} {self.enc_term(l, env)} {self.enc_term(r, env)})"
      case RelPred(rel, args):
        self.declare_rel(rel)
        app = self.enc_rel_app(rel, args, env)
        _, srname = self.sigs[rel]
        if srname == "bool":
          return app
        return f"(distinct {app} {self.zero(srname)})"
    raise TypeError(p)

  def enc_rel_app(self, rel, args, env) -> str:
    if not args:
      return rel
    return f"({rel} {' '.join(self.enc_term(a, env) for a in args)})"

  def enc_factor(self, f, env) -> str:
    match f:
      case RelAtom(rel, args):
        self.declare_rel(rel)
        _, srname = self.sigs[rel]
        app = self.enc_rel_app(rel, args, env)
        if srname == self.sr.name:
          return app
        if srname == "bool":
          return self.cast(app)
        raise EncodeError(f"cross-semiring atom {rel}")
      case Cast(p):
        return self.cast(self.enc_pred(p, env))
      case Const(v):
        if v is INF:
          return str(INFV)
        if isinstance(v, bool):
          return "true" if v else "false"
        if isinstance(v, int):
          return str(v)
        raise EncodeError(f"constant {v!r}")
      case ValueTerm(t):
        return self.enc_term(t, env)
      case NFn(name, args):
        if name == "sub" and self.sr.name in ("trop", "natinf"):
          a = self.enc_nf(args[0], env)
          b = self.enc_nf(args[1], env)
          return (f"(ite (>= {a} {INFV}) {INFV} "
                  f"(ite (>= {a} {b}) (- {a} {b}) 0))")
        raise EncodeError(f"function {name} not encodable")
    raise EncodeError(f"factor {f!r}")

  def enc_nterm(self, t: NTerm, env: dict[str, str],
                binder_names: list[str]) -> str:
    inner_env = dict(env)
    for v, sym in zip(t.bound, binder_names):
      self.declare_const(sym)
      inner_env[v] = sym
    body = self.one(self.sr.name)
    first = True
    for f in t.inner:
      enc = self.enc_factor(f, inner_env)
      body = enc if first else self.times(body, enc)
      first = False
    # nested u applications, innermost binder first
    u = self.u_fun() if t.bound else None
    for v in reversed(t.bound):
      body = f"({u} {inner_env[v]} {body})"
    for f in t.outer:
      enc = self.enc_factor(f, env)
      body = enc if (first and not t.bound) else self.times(enc, body)
      first = False
    return body

  def enc_nf(self, nf: NormalForm, env: dict[str, str],
             binder_map: Optional[dict[int, list[str]]] = None) -> str:
    if not nf.terms:
      return self.zero(self.sr.name)
    parts = []
    for i, t in enumerate(nf.terms):
      if binder_map is not None and i in binder_map:
        names = binder_map[i]
      else:
        names = [f"z{next(self._fresh)}" for _ in t.bound]
      parts.append(self.enc_nterm(t, env, names))
    out = parts[0]
    for p in parts[1:]:
      out = self.plus(out, p)
    return out

  def enc_gamma(self, constraints, program):
    for c in constraints:
      match c:
        case KeyConstraint(rel, kpos):
          if rel not in self.sigs:
            continue
          self.declare_rel(rel)
          arity, srname = self.sigs[rel]
          xs = [f"a{i}" for i in range(arity)]
          ys = [f"b{i}" for i in range(arity)]
          binds = " ".join(f"({v} Int)" for v in xs + ys)
          appx = f"({rel} {' '.join(xs)})"
          appy = f"({rel} {' '.join(ys)})"
          if srname != "bool":
            appx = f"(distinct {appx} {self.zero(srname)})"
            appy = f"(distinct {appy} {self.zero(srname)})"
          agree = " ".join(f"(= a{p - 1} b{p - 1})" for p in kpos)
          eqs = " ".join(f"(= a{i} b{i})" for i in range(arity)
                         if (i + 1) not in kpos)
          if not eqs:
            continue
          self.asserts.append(
            f"(assert (forall ({binds}) (=> (and {appx} {appy} {agree}) "
            f"(and {eqs}))))")
        case Implication(body, head):
          vs = set()
          for p in body:
            vs |= pred_vars(p)
          for conj in head:
            for p in conj:
              vs |= pred_vars(p)
          env = {v: f"q_{v}" for v in sorted(vs)}
          binds = " ".join(f"({s} Int)" for s in env.values())
          bstr = " ".join(self.enc_pred(p, env) for p in body)
          hstr = " ".join(
            "(and " + " ".join(self.enc_pred(p, env) for p in conj) + ")"
            if len(conj) > 1 else self.enc_pred(conj[0], env)
            for conj in head)
          if len(head) > 1:
            hstr = f"(or {hstr})"
          if not vs:
            self.asserts.append(f"(assert (=> (and {bstr}) {hstr}))")
          else:
            self.asserts.append(
              f"(assert (forall ({binds}) (=> (and {bstr}) {hstr})))")
        case WitnessDecl(rel, attrs):
          if rel not in self.sigs:
            self.sigs[rel] = (len(attrs), "bool")
          self.declare_rel(rel)
        case Invariant(lhs, rhs):
          self.enc_invariant(c)

  def enc_invariant(self, inv: Invariant):
    sr = self.sr
    fv = sorted(free_vars(inv.lhs) | free_vars(inv.rhs))
    try:
      n1 = normalize(inv.lhs, sr)
      n2 = normalize(inv.rhs, sr)
    except NormalizeError as e:
      raise EncodeError(f"invariant not normalizable: {e}")
    env = {v: f"iv_{v}" for v in fv}
    # reuse binder names between matched terms of the two sides, and
    # quantify them along with the free variables: the invariant is assumed
    # in its pointwise form, which is how the optimizer applies it (whole
    # summation blocks rewritten with the binder shared)
    m1, m2 = _match_binders(n1, n2, self)
    e1 = self.enc_nf(n1, dict(env), m1)
    e2 = self.enc_nf(n2, dict(env), m2)
    binders = sorted({b for bs in list(m1.values()) + list(m2.values())
                      for b in bs})
    binds = " ".join(f"({s} Int)" for s in
                     list(env.values()) + binders)
    if binds:
      self.asserts.append(f"(assert (forall ({binds}) (= {e1} {e2})))")
    else:
      self.asserts.append(f"(assert (= {e1} {e2}))")

  def script(self, final_assert: str, logic: str = "UFNIA",
             get_model: bool = True) -> str:
    lines = ["(set-option :produce-models true)", f"(set-logic {logic})"]
    lines.extend(self.decls)
    lines.extend(self.asserts)
    lines.append(final_assert)
    lines.append("(check-sat)")
    if get_model:
      lines.append("(get-model)")
    return "\n".join(lines) + "\n"


def _match_binders(n1: NormalForm, n2: NormalForm, enc: _SmtEncoder):
  """Plan binder-name reuse: terms of n2 isomorphic to terms of n1 share the
  binder constants chosen for n1. Returns (binder_map1, binder_map2)."""
  map1: dict[int, list[str]] = {}
  for i, t in enumerate(n1.terms):
    map1[i] = [f"z{next(enc._fresh)}" for _ in t.bound]
  map2: dict[int, list[str]] = {}
  used = set()
  for j, t2 in enumerate(n2.terms):
    for i, t1 in enumerate(n1.terms):
      if i in used:
        continue
      m = term_iso_map(t1, t2)
      if m is not None:
        # m maps t1 binders to t2 binders; assign t2's names accordingly
        inv = {v2: map1[i][t1.bound.index(v1)] for v1, v2 in m.items()}
        map2[j] = [inv[v] for v in t2.bound]
        used.add(i)
        break
  # unmatched terms reuse names positionally when the binder count agrees,
  # so that assumed identities can relate the two sums
  for j, t2 in enumerate(n2.terms):
    if j in map2:
      continue
    for i, t1 in enumerate(n1.terms):
      if i in used or len(t1.bound) != len(t2.bound) or not t1.bound:
        continue
      map2[j] = list(map1[i])
      used.add(i)
      break
  return map1, map2


def encode_smt(e1: Expr, e2: Expr, sr: Semiring, head_vars=(),
               constraints=(), program: Optional[Program] = None
               ) -> tuple[str, dict]:
  """SMT-LIB script asserting the negation of e1 = e2 under the constraints.
  unsat means the identity is valid."""
  n1 = normalize(e1, sr, head_vars, constraints)
  n2 = normalize(e2, sr, head_vars, constraints)
  sigs: dict[str, tuple[int, str]] = {}
  _collect_rels(e1, program, sr, sigs)
  _collect_rels(e2, program, sr, sigs)
  gamma, invs = _split_constraints(constraints)
  for c in gamma:
    match c:
      case Implication(body, head):
        for p in body:
          _pred_rels(p, sigs, program)
        for conj in head:
          for p in conj:
            _pred_rels(p, sigs, program)
  for inv in invs:
    _collect_rels(inv.lhs, program, sr, sigs)
    _collect_rels(inv.rhs, program, sr, sigs)
  enc = _SmtEncoder(sr, sigs)
  env = {}
  for v in head_vars:
    sym = f"hv_{v}"
    enc.declare_const(sym)
    env[v] = sym
  enc.enc_gamma(gamma, program)
  for inv in invs:
    enc.enc_invariant(inv)
  m1, m2 = _match_binders(n1, n2, enc)
  s1 = enc.enc_nf(n1, dict(env), m1)
  s2 = enc.enc_nf(n2, dict(env), m2)
  final = f"(assert (distinct {s1} {s2}))"
  script = enc.script(final)
  meta = {"sigs": sigs, "head_env": env, "n1": n1, "n2": n2}
  return script, meta


# ---------------------------------------------------------------------------
# Solver subprocess

def _package_root() -> Path:
  return Path(__file__).resolve().parents[2]


def discover_solver() -> Optional[list[str]]:
  env = os.environ.get("FGHOPT_SMT")
  if env:
    return shlex.split(env)
  z3 = shutil.which("z3")
  if z3:
    return [z3, "-in"]
  cvc5 = shutil.which("cvc5")
  if cvc5:
    return [cvc5, "--lang", "smt2", "-"]
  bundled = _package_root() / "tools" / "smt-node" / "z3smt"
  if bundled.exists() and shutil.which("node"):
    return [str(bundled)]
  return None


def run_solver(script: str, timeout: float = 10.0,
               solver: Optional[list[str]] = None) -> tuple[str, str]:
  cmd = solver or discover_solver()
  if cmd is None:
    return "nosolver", ""
  try:
    proc = subprocess.run(cmd, input=script.encode(), capture_output=True,
                          timeout=timeout)
  except (subprocess.TimeoutExpired, OSError):
    return "timeout", ""
  out = proc.stdout.decode(errors="replace")
  first = out.strip().splitlines()[0].strip() if out.strip() else ""
  if first not in ("sat", "unsat", "unknown"):
    return "error", out
  return first, out


# ---------------------------------------------------------------------------
# Model parsing

def _sexp_parse(text: str):
  toks = re.findall(r"\(|\)|[^\s()]+", text)
  pos = 0

  def rd():
    nonlocal pos
    if pos >= len(toks):
      raise ValueError("eof")
    t = toks[pos]
    pos += 1
    if t == "(":
      out = []
      while pos < len(toks) and toks[pos] != ")":
        out.append(rd())
      pos += 1
      return out
    return t

  out = []
  while pos < len(toks):
    if toks[pos] == ")":
      pos += 1
      continue
    out.append(rd())
  return out


def _eval_model_body(body, env: dict[str, object]):
  if isinstance(body, str):
    if body in env:
      return env[body]
    if body == "true":
      return True
    if body == "false":
      return False
    try:
      return int(body)
    except ValueError:
      raise ValueError(f"unknown symbol {body}")
  op = body[0]
  if op == "ite":
    return (_eval_model_body(body[2], env) if _eval_model_body(body[1], env)
            else _eval_model_body(body[3], env))
  if op == "=":
    return _eval_model_body(body[1], env) == _eval_model_body(body[2], env)
  if op == "distinct":
    return _eval_model_body(body[1], env) != _eval_model_body(body[2], env)
  if op == "and":
    return all(_eval_model_body(a, env) for a in body[1:])
  if op == "or":
    return any(_eval_model_body(a, env) for a in body[1:])
  if op == "not":
    return not _eval_model_body(body[1], env)
  if op == "-":
    if len(body) == 2:
      return -_eval_model_body(body[1], env)
    return _eval_model_body(body[1], env) - _eval_model_body(body[2], env)
  if op == "+":
    return sum(_eval_model_body(a, env) for a in body[1:])
  if op == "*":
    out = 1
    for a in body[1:]:
      out *= _eval_model_body(a, env)
    return out
  if op in ("<", "<=", ">", ">="):
    a = _eval_model_body(body[1], env)
    b = _eval_model_body(body[2], env)
    return {"<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b}[op]
  if op == "let":
    env = dict(env)
    for name, val in body[1]:
      env[name] = _eval_model_body(val, env)
    return _eval_model_body(body[2], env)
  raise ValueError(f"unsupported model op {op}")


def parse_model(output: str, sigs: dict[str, tuple[int, str]],
                head_env: dict[str, str]) -> Optional[tuple[Instance, dict]]:
  """Extract a finite counterexample instance and head binding from a solver
  model. Returns None when parsing fails."""
  try:
    body = output.split("\n", 1)[1]
    sexps = _sexp_parse(body)
  except Exception:
    return None
  defs = {}
  for top in sexps:
    if not isinstance(top, list):
      continue
    items = top if top and top[0] != "model" else top[1:]
    for d in items:
      if isinstance(d, list) and len(d) >= 5 and d[0] == "define-fun":
        name, params, _sort, bd = d[1], d[2], d[3], d[4]
        defs[name] = (params, bd)
  if not defs:
    return None
  consts = {}
  for name, (params, bd) in defs.items():
    if not params:
      try:
        consts[name] = _eval_model_body(bd, {})
      except ValueError:
        pass
  binding = {}
  for var, sym in head_env.items():
    binding[var] = consts.get(sym, 0)
  # small evaluation domain: model constants plus a few ground values
  dom = {0, 1, 2}
  for v in consts.values():
    if isinstance(v, int) and abs(v) < 10 ** 6:
      dom.add(v)

  def body_ints(bd, acc):
    if isinstance(bd, str):
      try:
        v = int(bd)
        if abs(v) < 10 ** 6:
          acc.add(v)
      except ValueError:
        pass
    else:
      for x in bd:
        body_ints(x, acc)

  for name, (params, bd) in defs.items():
    if name in sigs:
      body_ints(bd, dom)
  dom = sorted(dom)
  if len(dom) > 12:
    dom = dom[:12]
  inst: Instance = {}
  for rel, (arity, srname) in sigs.items():
    table = {}
    if rel in defs:
      params, bd = defs[rel]
      pnames = [p[0] for p in params]
      for key in itertools.product(dom, repeat=arity):
        env = dict(zip(pnames, key))
        try:
          v = _eval_model_body(bd, env)
        except ValueError:
          return None
        if srname == "bool":
          if v:
            table[key] = True
        else:
          if isinstance(v, bool):
            return None
          vv = INF if v >= INFV else v
          zero = get_semiring(srname).zero
          if vv != zero and (vv is INF or vv >= 0):
            table[key] = vv
          elif isinstance(vv, int) and vv < 0:
            return None
    inst[rel] = table
  return inst, binding


def _pseudo_program(sigs: dict[str, tuple[int, str]]) -> Program:
  prog = Program()
  for rel, (arity, srname) in sigs.items():
    prog.edbs[rel] = RelDecl(rel, tuple("id" for _ in range(arity)),
                             get_semiring(srname))
  return prog


def check_smt(e1: Expr, e2: Expr, sr: Semiring, head_vars=(), constraints=(),
              program: Optional[Program] = None, timeout: float = 10.0,
              solver: Optional[list[str]] = None,
              dump_path: Optional[str] = None) -> VerifyOutcome:
  try:
    script, meta = encode_smt(e1, e2, sr, head_vars, constraints, program)
  except (EncodeError, NormalizeError) as err:
    return VerifyOutcome("unknown", "smt", detail=str(err))
  if dump_path:
    Path(dump_path).write_text(script)
  status, out = run_solver(script, timeout, solver)
  if status == "unsat":
    return VerifyOutcome("valid", "smt")
  if status == "nosolver":
    return VerifyOutcome("unknown", "smt", detail="no SMT solver available")
  if status in ("timeout", "error", "unknown"):
    return VerifyOutcome("unknown", "smt", detail=f"solver {status}")
  # sat: try to extract and replay a counterexample
  parsed = parse_model(out, meta["sigs"], meta["head_env"])
  if parsed is not None:
    inst, binding = parsed
    rep = _replay(e1, e2, sr, meta["sigs"], inst, binding, constraints)
    if rep:
      return VerifyOutcome("counterexample", "smt",
                           counterexample=(inst, binding))
  # fall back to a bounded search for a concrete witness
  bounded = check_bounded(e1, e2, sr, head_vars, constraints, program)
  if bounded.status == "counterexample":
    return bounded
  return VerifyOutcome("unknown", "smt",
                       detail="sat but no replayable counterexample")


def _eval_form(e: Expr, sr: Semiring, head_vars=(), constraints=()) -> Expr:
  """Evaluation form for bounded checks: the normalized expression when
  available, since normalization eliminates equality-bound summation binders
  whose forced values may fall outside the active domain."""
  try:
    return to_expr(normalize(e, sr, tuple(head_vars), constraints))
  except Exception:
    return e


def _replay(e1, e2, sr, sigs, inst, binding, constraints=()) -> bool:
  prog = _pseudo_program(sigs)
  e1 = _eval_form(e1, sr, binding.keys(), constraints)
  e2 = _eval_form(e2, sr, binding.keys(), constraints)
  adom = _domain_of(inst, binding)
  gamma, invs = _split_constraints(constraints)
  if not _gamma_holds(inst, gamma, prog, adom):
    return False
  for inv in invs:
    fv = sorted(free_vars(inv.lhs) | free_vars(inv.rhs))
    for vals in itertools.product(adom, repeat=len(fv)):
      env = dict(zip(fv, vals))
      try:
        if eval_expr(inv.lhs, prog, inst, env, sr, adom) != \
           eval_expr(inv.rhs, prog, inst, env, sr, adom):
          return False
      except EvalError:
        return False
  try:
    v1 = eval_expr(e1, prog, inst, dict(binding), sr, adom)
    v2 = eval_expr(e2, prog, inst, dict(binding), sr, adom)
  except (EvalError, KeyError, ZeroDivisionError):
    return False
  return v1 != v2


def _domain_of(inst: Instance, binding) -> list[int]:
  dom = set()
  for m in inst.values():
    for key in m:
      dom.update(key)
  dom.update(v for v in binding.values() if isinstance(v, int))
  if not dom:
    dom = {0}
  return sorted(dom)


# ---------------------------------------------------------------------------
# Bounded checking

def _materialize_witnesses(inst: Instance, constraints, prog: Program,
                           dom: list[int]) -> Optional[Instance]:
  """Least-fixpoint materialization of existential witness relations from the
  implication constraints; returns None when the remaining constraints are
  violated."""
  wits = [c.rel for c in constraints if isinstance(c, WitnessDecl)]
  gamma = [c for c in constraints if isinstance(c, Implication)]
  inst = {r: dict(m) for r, m in inst.items()}
  for c in constraints:
    if isinstance(c, WitnessDecl):
      inst.setdefault(c.rel, {})
      if c.rel not in prog.edbs:
        prog.edbs[c.rel] = RelDecl(c.rel, c.attrs, get_semiring("bool"))
  ch = Chase([])

  def holds(p: Pred, env) -> bool:
    match p:
      case Cmp(op, l, r):
        from .ir import _CMP_EVAL, eval_term
        return _CMP_EVAL[op](eval_term(l, env), eval_term(r, env))
      case RelPred(rel, args):
        from .ir import eval_term
        key = tuple(eval_term(a, env) for a in args)
        sr = prog.rel_semiring(rel) or get_semiring("bool")
        return inst.get(rel, {}).get(key, sr.zero) != sr.zero
    raise TypeError(p)

  def all_envs(preds):
    vs = sorted(set().union(*(pred_vars(p) for p in preds)) if preds else set())
    for vals in itertools.product(dom, repeat=len(vs)):
      yield dict(zip(vs, vals))

  # saturate witness heads
  changed = True
  rounds = 0
  while changed and rounds < 50:
    changed = False
    rounds += 1
    for c in gamma:
      if len(c.head) != 1:
        continue
      head_rels = [p.rel for p in c.head[0] if isinstance(p, RelPred)]
      if not any(r in wits for r in head_rels):
        continue
      for env in all_envs(list(c.body) + [p for p in c.head[0]]):
        if all(holds(p, env) for p in c.body):
          for p in c.head[0]:
            match p:
              case RelPred(rel, args) if rel in wits:
                from .ir import eval_term
                key = tuple(eval_term(a, env) for a in args)
                if key not in inst[rel]:
                  inst[rel][key] = True
                  changed = True
  return inst


def _tuple_filters(constraints) -> dict[str, list]:
  """Per-relation filters read off implications of the form
  R(vars) => comparisons; used to generate satisfying tuples directly
  instead of rejecting whole instances."""
  filters: dict[str, list] = {}
  for c in constraints:
    match c:
      case Implication((RelPred(rel, args),), head) if (
          all(isinstance(p, Cmp) for conj in head for p in conj) and
          all(isinstance(a, Var) for a in args)):
        filters.setdefault(rel, []).append(
          (tuple(a.name for a in args), head))
  return filters


def _tuple_passes(filters: dict[str, list], rel: str, key) -> bool:
  from .ir import _CMP_EVAL, eval_term
  for names, head in filters.get(rel, ()):
    if len(names) != len(key):
      continue
    env = dict(zip(names, key))
    ok = False
    for conj in head:
      try:
        if all(_CMP_EVAL[p.op](eval_term(p.left, env),
                               eval_term(p.right, env)) for p in conj):
          ok = True
          break
      except Exception:
        ok = True
        break
    if not ok:
      return False
  return True


def _key_map(constraints) -> dict[str, tuple[int, ...]]:
  return {c.rel: c.key_positions for c in constraints
          if isinstance(c, KeyConstraint)}


def _random_table(rel: str, arity: int, srname: str, dom, rng, p, filters,
                  keycons, grid) -> dict:
  """A random table honoring the per-tuple comparison filters and any key
  constraint on the relation. p is the tuple density; None draws one per
  table so sparse and dense shapes both show up."""
  if p is None:
    p = rng.choice((0.2, 0.4, 0.6, 0.9))
  rsr = get_semiring(srname)
  table: dict = {}
  seen = set()
  kpos = keycons.get(rel)
  for key in itertools.product(dom, repeat=arity):
    if not _tuple_passes(filters, rel, key):
      continue
    if rng.random() >= p:
      continue
    if kpos is not None:
      k = tuple(key[i - 1] for i in kpos)
      if k in seen:
        continue
      seen.add(k)
    if srname == "bool":
      table[key] = True
    else:
      v = rng.choice(grid)
      if v != rsr.zero:
        table[key] = v
  return table


def _repair_instance(inst: Instance, constraints, prog: Program) -> None:
  """Drop tuples violating single-atom projection implications such as
  E(x, y) => V(x), so that foreign-key style constraints are satisfied by
  construction instead of by rejection."""
  from .ir import eval_term
  for _ in range(3):
    changed = False
    for c in constraints:
      match c:
        case Implication((RelPred(rel, args),), ((RelPred(hrel, hargs),),)) \
            if rel in inst and hrel in inst and \
            all(isinstance(a, Var) for a in args):
          names = tuple(a.name for a in args)
          hsr = prog.rel_semiring(hrel) or get_semiring("bool")
          table = inst[rel]
          for key in list(table):
            env = dict(zip(names, key))
            try:
              hkey = tuple(eval_term(a, env) for a in hargs)
            except Exception:
              continue
            if inst[hrel].get(hkey, hsr.zero) == hsr.zero:
              del table[key]
              changed = True
    if not changed:
      break


def _gamma_holds(inst: Instance, constraints, prog: Program,
                 dom: list[int]) -> bool:
  from .ir import eval_term

  def truth(rel, key):
    sr = prog.rel_semiring(rel) or get_semiring("bool")
    return inst.get(rel, {}).get(key, sr.zero) != sr.zero

  def holds(p: Pred, env) -> bool:
    match p:
      case Cmp(op, l, r):
        from .ir import _CMP_EVAL
        return _CMP_EVAL[op](eval_term(l, env), eval_term(r, env))
      case RelPred(rel, args):
        key = tuple(eval_term(a, env) for a in args)
        return truth(rel, key)
    raise TypeError(p)

  for c in constraints:
    match c:
      case KeyConstraint(rel, kpos):
        seen = {}
        for key in inst.get(rel, {}):
          k = tuple(key[p - 1] for p in kpos)
          if k in seen and seen[k] != key:
            return False
          seen[k] = key
      case Implication(body, head):
        vs = sorted(set().union(*(pred_vars(p) for p in body))
                    | set().union(*(pred_vars(p) for conj in head
                                    for p in conj)) if body else set())
        for vals in itertools.product(dom, repeat=len(vs)):
          env = dict(zip(vs, vals))
          if all(holds(p, env) for p in body):
            if not any(all(holds(p, env) for p in conj) for conj in head):
              return False
  return True


def check_bounded(e1: Expr, e2: Expr, sr: Semiring, head_vars=(),
                  constraints=(), program: Optional[Program] = None,
                  domain_size: int = 3, grid=(0, 1, 2, 5, 100),
                  samples: int = 300, seed: int = 0,
                  max_time: float = 30.0) -> VerifyOutcome:
  """Searches small instances for a disagreement between e1 and e2. The
  instance space is sampled with a seeded generator (exhaustively when the
  space is tiny); returns BoundedValid when no disagreement is found, which
  is evidence, not proof."""
  sigs: dict[str, tuple[int, str]] = {}
  _collect_rels(e1, program, sr, sigs)
  _collect_rels(e2, program, sr, sigs)
  gamma, invs = _split_constraints(constraints)
  for c in gamma:
    match c:
      case Implication(body, head):
        for p in body:
          _pred_rels(p, sigs, program)
        for conj in head:
          for p in conj:
            _pred_rels(p, sigs, program)
      case WitnessDecl(rel, attrs):
        sigs.pop(rel, None)  # witnesses are materialized, not generated
  wit_rels = {c.rel for c in gamma if isinstance(c, WitnessDecl)}
  gen_rels = {r: s for r, s in sigs.items() if r not in wit_rels}
  for inv in invs:
    _collect_rels(inv.lhs, program, sr, sigs)
    _collect_rels(inv.rhs, program, sr, sigs)
    for r, s in sigs.items():
      if r not in gen_rels and r not in wit_rels:
        gen_rels[r] = s
  dom = list(range(domain_size))
  prog = _pseudo_program(sigs)
  rng = random.Random(seed)

  bool_bits = sum(domain_size ** a for r, (a, s) in gen_rels.items()
                  if s == "bool")
  exhaustive = (all(s == "bool" for _, s in gen_rels.values())
                and bool_bits <= 12)

  filters = _tuple_filters(gamma)
  keycons = _key_map(gamma)

  def random_instance():
    # vary density so that sparse shapes (trees, chains) show up even when
    # the constraints reject most dense instances
    inst: Instance = {}
    for rel, (arity, srname) in gen_rels.items():
      p = rng.choice((0.1, 0.2, 0.4, 0.6))
      if srname != "bool":
        p = max(p, 0.4)
      inst[rel] = _random_table(rel, arity, srname, dom, rng, p, filters,
                                keycons, grid)
    _repair_instance(inst, gamma, prog)
    return inst

  def all_instances():
    rels = sorted(gen_rels)
    keyspaces = [list(itertools.product(dom, repeat=gen_rels[r][0]))
                 for r in rels]
    total_keys = [k for ks in keyspaces for k in ks]
    for bits in itertools.product([False, True], repeat=len(total_keys)):
      inst: Instance = {r: {} for r in rels}
      i = 0
      for r, ks in zip(rels, keyspaces):
        for k in ks:
          if bits[i]:
            inst[r][k] = True
          i += 1
      yield inst

  def invariant_holds(inst):
    for inv in invs:
      fv = sorted(free_vars(inv.lhs) | free_vars(inv.rhs))
      for vals in itertools.product(dom, repeat=len(fv)):
        env = dict(zip(fv, vals))
        try:
          v1 = eval_expr(inv.lhs, prog, inst, env, sr, dom)
          v2 = eval_expr(inv.rhs, prog, inst, env, sr, dom)
        except EvalError:
          return False
        if v1 != v2:
          return False
    return True

  e1 = _eval_form(e1, sr, head_vars, constraints)
  e2 = _eval_form(e2, sr, head_vars, constraints)
  start = time.monotonic()
  source = all_instances() if exhaustive else (
    random_instance() for _ in range(samples))
  checked = 0
  for inst in source:
    if time.monotonic() - start > max_time:
      break
    mat = _materialize_witnesses(inst, gamma, prog, dom)
    if mat is None:
      continue
    if not _gamma_holds(mat, gamma, prog, dom):
      continue
    if invs and not invariant_holds(mat):
      continue
    checked += 1
    for vals in itertools.product(dom, repeat=len(head_vars)):
      env = dict(zip(head_vars, vals))
      try:
        v1 = eval_expr(e1, prog, mat, env, sr, dom)
        v2 = eval_expr(e2, prog, mat, env, sr, dom)
      except EvalError:
        continue
      if v1 != v2:
        return VerifyOutcome("counterexample", "bounded",
                             counterexample=(mat, env))
  if checked == 0:
    return VerifyOutcome("unknown", "bounded",
                         detail="no constraint-satisfying instance sampled")
  return VerifyOutcome("bounded_valid", "bounded",
                       detail=f"{checked} instances checked")


# ---------------------------------------------------------------------------
# Orchestration

@dataclass
class VerifyOptions:
  use_smt: bool = True
  smt_timeout: float = 10.0
  solver: Optional[list[str]] = None
  dump_smt: Optional[str] = None
  domain_size: int = 3
  grid: tuple = (0, 1, 2, 5, 100)
  samples: int = 300
  seed: int = 0


def verify_equiv(e1: Expr, e2: Expr, sr: Semiring, head_vars=(),
                 constraints=(), program: Optional[Program] = None,
                 options: Optional[VerifyOptions] = None) -> VerifyOutcome:
  opts = options or VerifyOptions()
  out = check_rule_based(e1, e2, sr, head_vars, constraints)
  if out.is_valid:
    return out
  try:
    from .egraph import equal_saturate
    if equal_saturate(e1, e2, sr, head_vars, constraints):
      return VerifyOutcome("valid", "egraph")
  except Exception:
    pass
  if opts.use_smt:
    out = check_smt(e1, e2, sr, head_vars, constraints, program,
                    timeout=opts.smt_timeout, solver=opts.solver,
                    dump_path=opts.dump_smt)
    if out.status in ("valid", "counterexample"):
      return out
  return check_bounded(e1, e2, sr, head_vars, constraints, program,
                       domain_size=opts.domain_size, grid=opts.grid,
                       samples=opts.samples, seed=opts.seed)


# ---------------------------------------------------------------------------
# Invariant conditions

def check_invariant_conditions(f_defs: dict[str, RelDef], phi, sr: Semiring,
                               constraints=(), program: Optional[Program] = None,
                               options: Optional[VerifyOptions] = None
                               ) -> dict[str, VerifyOutcome]:
  """The three conditions a loop invariant must satisfy: it holds at the
  empty start, it is preserved by one application of F, and (checked by the
  caller as part of the main identity) it suffices for the rewrite."""
  opts = options or VerifyOptions()
  results = {}

  # condition 1: phi holds at X = empty
  empty = frozenset(f_defs)
  match phi:
    case Invariant(lhs, rhs):
      try:
        n1 = normalize(lhs, sr, (), constraints, empty_rels=empty)
        n2 = normalize(rhs, sr, (), constraints, empty_rels=empty)
        ok = iso_equal(n1, n2)
      except NormalizeError:
        ok = False
      results["base"] = VerifyOutcome("valid" if ok else "unknown", "rule")
    case Implication(body, head):
      mentions = any(isinstance(p, RelPred) and p.rel in f_defs for p in body)
      results["base"] = VerifyOutcome("valid" if mentions else "unknown",
                                      "rule")

  # condition 2: phi(X) implies phi(F(X))
  match phi:
    case Invariant(lhs, rhs):
      lhs2 = subst_relation(lhs, f_defs, sr)
      rhs2 = subst_relation(rhs, f_defs, sr)
      results["step"] = verify_equiv(
        lhs2, rhs2, sr, sorted(free_vars(lhs) | free_vars(rhs)),
        list(constraints) + [phi], program, opts)
    case Implication():
      results["step"] = _bounded_implication_step(
        f_defs, phi, sr, constraints, program, opts)
  return results


def _bounded_implication_step(f_defs, phi: Implication, sr, constraints,
                              program, opts: VerifyOptions) -> VerifyOutcome:
  """Operational check of phi(X) => phi(F(X)): build random instances, close
  X under F from empty (so phi holds inductively at each stage), and check
  phi after one more application."""
  sigs: dict[str, tuple[int, str]] = {}
  rules = []
  for rel, d in f_defs.items():
    rules.append(Rule(rel, d.head_vars, d.body))
    _collect_rels(d.body, program, sr, sigs)
    sigs[rel] = (len(d.head_vars), sr.name)
  gamma = [c for c in constraints if not isinstance(c, Invariant)]
  dom = list(range(opts.domain_size))
  prog = _pseudo_program(sigs)
  stratum = Stratum(semiring=sr, rules=rules)
  rng = random.Random(opts.seed)
  wit_rels = {c.rel for c in gamma if isinstance(c, WitnessDecl)}
  filters = _tuple_filters(gamma)
  keycons = _key_map(gamma)

  def holds_phi(inst):
    return _gamma_holds(inst, [phi], prog, dom)

  checked = 0
  for trial in range(60):
    inst: Instance = {}
    for rel, (arity, srname) in sigs.items():
      if rel in f_defs or rel in wit_rels:
        continue
      inst[rel] = _random_table(rel, arity, srname, dom, rng, None, filters,
                                keycons, opts.grid)
    _repair_instance(inst, gamma, prog)
    mat = _materialize_witnesses(inst, gamma, prog, dom)
    if mat is None or not _gamma_holds(mat, gamma, prog, dom):
      continue
    checked += 1
    cur = dict(mat)
    for rel in f_defs:
      cur[rel] = {}
    for _ in range(2 * len(dom) + 2):
      if not holds_phi(cur):
        return VerifyOutcome("counterexample", "bounded",
                             counterexample=(cur, {}))
      new = apply_ico(stratum, prog, cur, dom)
      nxt = dict(cur)
      nxt.update(new)
      if all(nxt.get(r, {}) == cur.get(r, {}) for r in f_defs):
        break
      cur = nxt
  if checked == 0:
    return VerifyOutcome("unknown", "bounded",
                         detail="no constraint-satisfying instance sampled")
  return VerifyOutcome("bounded_valid", "bounded")
