"""Parser and printer for the .dlo program dialect and .facts instance files.

Dialect summary:

  % comment
  const a = 0.
  edb E(id, id).            % boolean relation (default)
  edb L(id) @trop.          % value relation mapping keys to trop values
  output Q.
  helper D.
  @bool                     % starts a new stratum over the given semiring
  TC(x, y) :- [x = y] + exists[z: E(x, z) * TC(z, y)].
  @trop
  CC(x) :- min[y: L(y) * TC(x, y)].

Bodies use '+'/'|' for semiring plus, '*'/'&' for times, '[pred]' for casts,
'sum|min|max|exists[vars: body]' for summation, 'if p then e1 else e2',
'sub(e1, e2)'/'div(e1, e2)' for the interpreted functions, integer literals
for constants ('inf' for the tropical zero), and bare lowercase identifiers
for the numeric value of a key variable. Relation names start uppercase.

Constraints:

  constraint key SubPart(2).                      % column 2 is a key
  constraint witness T(id, id).                   % existential witness
  constraint SubPart(x, y) => T(x, y).
  constraint T(x, z) & SubPart(z, y) => T(x, y).
  constraint T(x, y) => x != y.
  invariant sum[z: E(x, z) * TC(z, y)] == sum[z: TC(x, z) * E(z, y)].

Facts files are tab-separated: REL<TAB>k1,k2,...<TAB>value (value omitted for
boolean facts); duplicate keys combine with semiring plus.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction

from .ir import (
  Arith, BoolCast, Cast, Cmp, Const, Expr, Fn, IConst, IfThenElse, Instance, Plus,
  Pred, Program, RelAtom, RelDecl, RelPred, Rule, Stratum, Sum, Term, Times,
  ValueTerm, Var, free_vars, fresh_var, linearize, pred_vars, substitute,
  sum_over, term_vars)
from .semiring import BOT, INF, Semiring, get_semiring


# ---------------------------------------------------------------------------
# Constraints

@dataclass(frozen=True)
class KeyConstraint:
  rel: str
  key_positions: tuple[int, ...]  # 1-indexed columns that form a key

  def __repr__(self):
    return f"key {self.rel}({', '.join(map(str, self.key_positions))})"


@dataclass(frozen=True)
class WitnessDecl:
  rel: str
  attrs: tuple[str, ...]

  def __repr__(self):
    return f"witness {self.rel}({', '.join(self.attrs)})"


@dataclass(frozen=True)
class Implication:
  body: tuple[Pred, ...]                 # conjunction
  head: tuple[tuple[Pred, ...], ...]     # disjunction of conjunctions

  def __repr__(self):
    b = " & ".join(map(repr, self.body))
    h = " | ".join(" & ".join(map(repr, conj)) for conj in self.head)
    return f"{b} => {h}"


@dataclass(frozen=True)
class Invariant:
  lhs: Expr
  rhs: Expr

  def __repr__(self):
    return f"{self.lhs} == {self.rhs}"


Constraint = KeyConstraint | WitnessDecl | Implication | Invariant


# ---------------------------------------------------------------------------
# Tokenizer

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+|%[^\n]*)
  | (?P<int>\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_']*)
  | (?P<op>:-|=>|==|!=|<=|>=|[()\[\]{}.,:=<>+\-*/|&@])
""", re.VERBOSE)

_KEYWORDS = {"if", "then", "else", "sum", "min", "max", "exists", "sub",
             "div", "const", "edb", "output", "helper", "constraint",
             "invariant", "key", "witness", "inf", "bot"}


def _tokenize(text: str):
  toks = []
  pos = 0
  while pos < len(text):
    m = _TOKEN_RE.match(text, pos)
    if m is None:
      line = text.count("\n", 0, pos) + 1
      raise ParseError(f"line {line}: unexpected character {text[pos]!r}")
    pos = m.end()
    if m.lastgroup == "ws":
      continue
    line = text.count("\n", 0, m.start()) + 1
    toks.append((m.lastgroup, m.group(), line))
  toks.append(("eof", "", text.count("\n") + 1))
  return toks


class ParseError(Exception):
  pass


class _Parser:
  def __init__(self, text: str):
    self.toks = _tokenize(text)
    self.i = 0

  def peek(self, k=0):
    return self.toks[min(self.i + k, len(self.toks) - 1)]

  def next(self):
    t = self.toks[self.i]
    self.i += 1
    return t

  def expect(self, val):
    kind, v, line = self.next()
    if v != val:
      raise ParseError(f"line {line}: expected {val!r}, got {v!r}")
    return v

  def at(self, val, k=0):
    return self.peek(k)[1] == val

  # ----- programs ---------------------------------------------------------

  def parse_program(self) -> Program:
    prog = Program()
    cur_stratum: Stratum | None = None
    while not self.at(""):
      kind, v, line = self.peek()
      if v == "@":
        self.next()
        _, name, _ = self.next()
        sr = get_semiring(name)
        cur_stratum = Stratum(semiring=sr)
        prog.strata.append(cur_stratum)
      elif v == "const":
        self.next()
        _, name, _ = self.next()
        self.expect("=")
        neg = False
        if self.at("-"):
          self.next()
          neg = True
        _, num, _ = self.next()
        prog.constants[name] = -int(num) if neg else int(num)
        self.expect(".")
      elif v == "edb":
        self.next()
        _, name, _ = self.next()
        self.expect("(")
        attrs = []
        while not self.at(")"):
          _, a, _ = self.next()
          attrs.append(a)
          if self.at(","):
            self.next()
        self.expect(")")
        sr = get_semiring("bool")
        if self.at("@"):
          self.next()
          _, srn, _ = self.next()
          sr = get_semiring(srn)
        prog.edbs[name] = RelDecl(name, tuple(attrs), sr)
        self.expect(".")
      elif v == "output":
        self.next()
        _, name, _ = self.next()
        prog.outputs.append(name)
        self.expect(".")
      elif v == "helper":
        self.next()
        _, name, _ = self.next()
        prog.helpers.add(name)
        self.expect(".")
      elif v == "constraint":
        self.next()
        prog.constraints.append(self.parse_constraint())
        self.expect(".")
      elif v == "invariant":
        self.next()
        lhs = self.parse_expr()
        self.expect("==")
        rhs = self.parse_expr()
        prog.constraints.append(Invariant(lhs, rhs))
        self.expect(".")
      else:
        if cur_stratum is None:
          raise ParseError(f"line {line}: rule before any @semiring marker")
        cur_stratum.rules.append(self.parse_rule())
    _resolve_program(prog)
    return prog

  def parse_rule(self) -> Rule:
    _, name, line = self.next()
    self.expect("(")
    head_vars = []
    eqs = []
    seen = set()
    while not self.at(")"):
      t = self.parse_term()
      if isinstance(t, Var) and t.name not in seen:
        head_vars.append(t.name)
        seen.add(t.name)
      else:
        hv = fresh_var("h")
        head_vars.append(hv)
        eqs.append(Cast(Cmp("=", Var(hv), t)))
      if self.at(","):
        self.next()
    self.expect(")")
    if self.at(":-"):
      self.next()
      body = self.parse_expr()
    else:
      body = Const(True)  # placeholder one, fixed up during resolution
    for e in eqs:
      body = Times(body, e)
    self.expect(".")
    return Rule(name, tuple(head_vars), body)

  def parse_constraint(self) -> Constraint:
    if self.at("key"):
      self.next()
      _, rel, _ = self.next()
      self.expect("(")
      pos = []
      while not self.at(")"):
        _, n, _ = self.next()
        pos.append(int(n))
        if self.at(","):
          self.next()
      self.expect(")")
      return KeyConstraint(rel, tuple(pos))
    if self.at("witness"):
      self.next()
      _, rel, _ = self.next()
      self.expect("(")
      attrs = []
      while not self.at(")"):
        _, a, _ = self.next()
        attrs.append(a)
        if self.at(","):
          self.next()
      self.expect(")")
      return WitnessDecl(rel, tuple(attrs))
    body = [self.parse_pred()]
    while self.at("&"):
      self.next()
      body.append(self.parse_pred())
    self.expect("=>")
    head = [[self.parse_pred()]]
    while True:
      if self.at("&"):
        self.next()
        head[-1].append(self.parse_pred())
      elif self.at("|"):
        self.next()
        head.append([self.parse_pred()])
      else:
        break
    return Implication(tuple(body), tuple(tuple(c) for c in head))

  # ----- expressions ------------------------------------------------------

  def parse_expr(self) -> Expr:
    e = self.parse_product()
    while self.at("+") or self.at("|"):
      self.next()
      e = Plus(e, self.parse_product())
    return e

  def parse_product(self) -> Expr:
    e = self.parse_factor()
    while self.at("*") or self.at("&"):
      self.next()
      e = Times(e, self.parse_factor())
    return e

  def parse_factor(self) -> Expr:
    kind, v, line = self.peek()
    if v in ("sum", "min", "max", "exists"):
      self.next()
      self.expect("[")
      vs = []
      while not self.at(":"):
        _, name, _ = self.next()
        vs.append(name)
        if self.at(","):
          self.next()
      self.expect(":")
      body = self.parse_expr()
      self.expect("]")
      return sum_over(vs, body)
    if v == "if":
      self.next()
      p = self.parse_pred()
      self.expect("then")
      t = self.parse_expr()
      self.expect("else")
      f = self.parse_expr()
      return IfThenElse(p, t, f)
    if v in ("sub", "div"):
      self.next()
      self.expect("(")
      a = self.parse_expr()
      self.expect(",")
      b = self.parse_expr()
      self.expect(")")
      return Fn(v, (a, b))
    if v == "[":
      self.next()
      p = self.parse_pred()
      self.expect("]")
      return Cast(p)
    if v == "(":
      self.next()
      e = self.parse_expr()
      self.expect(")")
      return e
    if kind == "int":
      self.next()
      return Const(int(v))
    if v == "inf":
      self.next()
      return Const(INF)
    if v == "bot":
      self.next()
      return Const(BOT)
    if kind == "ident":
      self.next()
      if self.at("("):
        self.next()
        args = []
        while not self.at(")"):
          args.append(self.parse_term())
          if self.at(","):
            self.next()
        self.expect(")")
        return RelAtom(v, tuple(args))
      if v[0].isupper():
        raise ParseError(f"line {line}: relation {v} used without arguments")
      return ValueTerm(Var(v))
    raise ParseError(f"line {line}: unexpected token {v!r}")

  def parse_pred(self) -> Pred:
    # relation guard: Ident(...) with uppercase initial and no comparison after
    kind, v, line = self.peek()
    if kind == "ident" and v[0].isupper() and self.at("(", 1):
      save = self.i
      self.next()
      self.next()
      args = []
      while not self.at(")"):
        args.append(self.parse_term())
        if self.at(","):
          self.next()
      self.expect(")")
      if self.peek()[1] in ("=", "!=", "<", "<=", ">", ">="):
        self.i = save  # it was a term comparison after all; cannot happen
      else:
        return RelPred(v, tuple(args))
    l = self.parse_term()
    _, op, line = self.next()
    if op not in ("=", "!=", "<", "<=", ">", ">="):
      raise ParseError(f"line {line}: expected comparison, got {op!r}")
    r = self.parse_term()
    return Cmp(op, l, r)

  # ----- terms ------------------------------------------------------------

  def parse_term(self) -> Term:
    t = self.parse_term_prod()
    while self.at("+") or self.at("-"):
      _, op, _ = self.next()
      t = Arith(op, t, self.parse_term_prod())
    return t

  def parse_term_prod(self) -> Term:
    t = self.parse_term_atom()
    while self.at("*") or self.at("/"):
      _, op, _ = self.next()
      t = Arith(op, t, self.parse_term_atom())
    return t

  def parse_term_atom(self) -> Term:
    kind, v, line = self.next()
    if kind == "int":
      return IConst(int(v))
    if kind == "ident":
      return Var(v)
    if v == "(":
      t = self.parse_term()
      self.expect(")")
      return t
    if v == "-":
      inner = self.parse_term_atom()
      return Arith("-", IConst(0), inner)
    raise ParseError(f"line {line}: unexpected token {v!r} in term")


# ---------------------------------------------------------------------------
# Post-parse resolution: constant substitution and cast insertion

def _resolve_term(t: Term, consts: dict[str, int]) -> Term:
  match t:
    case Var(name) if name in consts:
      return IConst(consts[name])
    case Arith(op, l, r):
      return Arith(op, _resolve_term(l, consts), _resolve_term(r, consts))
    case _:
      return t


def _resolve_pred(p: Pred, consts) -> Pred:
  match p:
    case Cmp(op, l, r):
      return Cmp(op, _resolve_term(l, consts), _resolve_term(r, consts))
    case RelPred(rel, args):
      return RelPred(rel, tuple(_resolve_term(a, consts) for a in args))
  raise TypeError(p)


def resolve_expr(e: Expr, prog: Program, sr: Semiring) -> Expr:
  consts = prog.constants

  def go(e: Expr) -> Expr:
    match e:
      case RelAtom(rel, args):
        args = tuple(_resolve_term(a, consts) for a in args)
        rel_sr = prog.rel_semiring(rel)
        if rel_sr is not None and rel_sr.name == "bool" and sr.name != "bool":
          return Cast(RelPred(rel, args))
        return RelAtom(rel, args)
      case Plus(l, r):
        return Plus(go(l), go(r))
      case Times(l, r):
        return Times(go(l), go(r))
      case Sum(v, body):
        return Sum(v, go(body))
      case Cast(p):
        return Cast(_resolve_pred(p, consts))
      case Const(v):
        if sr.name == "bool" and v in (0, 1):
          return Const(bool(v))
        if sr.name != "bool" and isinstance(v, bool):
          return Const(sr.one if v else sr.zero)
        return Const(v)
      case ValueTerm(t):
        t = _resolve_term(t, consts)
        if isinstance(t, IConst):
          return Const(t.value)
        return ValueTerm(t)
      case Fn(name, args):
        return Fn(name, tuple(go(a) for a in args))
      case IfThenElse(p, t, f):
        return IfThenElse(_resolve_pred(p, consts), go(t), go(f))
      case _:
        return e

  return go(e)


def _resolve_program(prog: Program):
  for st in prog.strata:
    for rule in st.rules:
      rule.body = resolve_expr(rule.body, prog, st.semiring)
  resolved = []
  for c in prog.constraints:
    match c:
      case Implication(body, head):
        resolved.append(Implication(
          tuple(_resolve_pred(p, prog.constants) for p in body),
          tuple(tuple(_resolve_pred(p, prog.constants) for p in conj)
                for conj in head)))
      case Invariant(lhs, rhs):
        sr = prog.strata[-1].semiring if prog.strata else get_semiring("bool")
        resolved.append(Invariant(resolve_expr(lhs, prog, sr),
                                  resolve_expr(rhs, prog, sr)))
      case _:
        resolved.append(c)
  prog.constraints = resolved


def parse_program(text: str) -> Program:
  return _Parser(text).parse_program()


def parse_expr(text: str, prog: Program | None = None,
               semiring: str = "bool") -> Expr:
  p = _Parser(text + " .")
  e = p.parse_expr()
  if prog is None:
    prog = Program()
  return resolve_expr(e, prog, get_semiring(semiring))


# ---------------------------------------------------------------------------
# Facts files

def parse_value(s: str, sr: Semiring):
  s = s.strip()
  if s == "inf":
    return INF
  if s == "bot":
    return BOT
  if sr.name == "bool":
    return s not in ("0", "false")
  if "/" in s:
    return Fraction(s)
  return int(s)


def value_to_str(v) -> str:
  if v is INF:
    return "inf"
  if v is BOT:
    return "bot"
  if isinstance(v, bool):
    return "1" if v else "0"
  return str(v)


def parse_facts(text: str, prog: Program) -> Instance:
  inst: Instance = {}
  for lineno, line in enumerate(text.splitlines(), 1):
    line = line.rstrip("\n")
    if not line.strip() or line.lstrip().startswith("%"):
      continue
    parts = line.split("\t")
    if len(parts) not in (2, 3):
      raise ParseError(f"facts line {lineno}: expected 2 or 3 fields")
    rel = parts[0].strip()
    sr = prog.rel_semiring(rel) or get_semiring("bool")
    keys = tuple(int(k.strip()) for k in parts[1].split(",")) if parts[1].strip() else ()
    val = parse_value(parts[2], sr) if len(parts) == 3 else sr.one
    m = inst.setdefault(rel, {})
    m[keys] = sr.plus(m.get(keys, sr.zero), val) if keys in m else val
    if m[keys] == sr.zero:
      del m[keys]
  return inst


def facts_to_str(inst: Instance) -> str:
  lines = []
  for rel in sorted(inst):
    for key in sorted(inst[rel]):
      v = inst[rel][key]
      ks = ",".join(map(str, key))
      if isinstance(v, bool):
        lines.append(f"{rel}\t{ks}" if v else f"{rel}\t{ks}\t0")
      else:
        lines.append(f"{rel}\t{ks}\t{value_to_str(v)}")
  return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Printer

def _linear_to_str(const: int, coeffs: dict[str, int]) -> str:
  if not coeffs:
    return str(const)
  parts = []
  for name in sorted(coeffs):
    c = coeffs[name]
    if not parts:
      parts.append(name if c == 1 else f"-{name}" if c == -1
                   else f"{c} * {name}")
    elif c > 0:
      parts.append(f"+ {name}" if c == 1 else f"+ {c} * {name}")
    else:
      parts.append(f"- {name}" if c == -1 else f"- {-c} * {name}")
  if const or not parts:
    parts.append(f"+ {const}" if const > 0 or not parts else f"- {-const}")
  return " ".join(parts).removeprefix("+ ")


def term_to_str(t: Term) -> str:
  lin = linearize(t)
  if lin is not None:
    return _linear_to_str(*lin)
  match t:
    case Var(name):
      return name
    case IConst(v):
      return str(v)
    case Arith(op, l, r):
      return f"({term_to_str(l)} {op} {term_to_str(r)})"
  raise TypeError(t)


def pred_to_str(p: Pred) -> str:
  match p:
    case Cmp(op, l, r):
      ll, rr = linearize(l), linearize(r)
      if ll is not None and rr is not None:
        # move negative coefficients to the other side for display
        const = rr[0] - ll[0]
        coeffs = dict(ll[1])
        for k, v in rr[1].items():
          coeffs[k] = coeffs.get(k, 0) - v
        left = {k: v for k, v in coeffs.items() if v > 0}
        right = {k: -v for k, v in coeffs.items() if v < 0}
        lc = 0 if left or const >= 0 else -const
        rc = const if left or const >= 0 else 0
        return (f"{_linear_to_str(lc, left)} {op} "
                f"{_linear_to_str(rc, right)}")
      return f"{term_to_str(l)} {op} {term_to_str(r)}"
    case RelPred(rel, args):
      return f"{rel}({', '.join(term_to_str(a) for a in args)})"
  raise TypeError(p)


def expr_to_str(e: Expr, sr: Semiring | None = None) -> str:
  agg = "sum"
  if sr is not None and sr.name == "trop":
    agg = "min"
  if sr is not None and sr.name == "maxnat":
    agg = "max"
  if sr is not None and sr.name == "bool":
    agg = "exists"

  def go(e: Expr, prec: int) -> str:
    match e:
      case RelAtom(rel, args):
        return f"{rel}({', '.join(term_to_str(a) for a in args)})"
      case Plus(l, r):
        s = f"{go(l, 0)} + {go(r, 1)}"
        return f"({s})" if prec > 0 else s
      case Times(l, r):
        s = f"{go(l, 1)} * {go(r, 2)}"
        return f"({s})" if prec > 1 else s
      case Sum(v, body):
        vs = [v]
        while isinstance(body, Sum):
          vs.append(body.var)
          body = body.body
        return f"{agg}[{', '.join(vs)}: {go(body, 0)}]"
      case Cast(p):
        return f"[{pred_to_str(p)}]"
      case Const(v):
        if isinstance(v, bool):
          return "1" if v else "0"
        return value_to_str(v)
      case ValueTerm(t):
        return term_to_str(t)
      case Fn(name, args):
        return f"{name}({', '.join(go(a, 0) for a in args)})"
      case IfThenElse(p, t, f):
        s = f"if {pred_to_str(p)} then {go(t, 1)} else {go(f, 1)}"
        return f"({s})" if prec > 0 else s
      case BoolCast(b):
        return f"cast({go(b, 0)})"
    raise TypeError(e)

  return go(e, 0)


def rule_to_str(r: Rule, sr: Semiring | None = None) -> str:
  return (f"{r.head_rel}({', '.join(r.head_vars)}) :- "
          f"{expr_to_str(r.body, sr)}.")


def program_to_dlo(prog: Program) -> str:
  lines = []
  for name, val in prog.constants.items():
    lines.append(f"const {name} = {val}.")
  for decl in prog.edbs.values():
    srs = "" if decl.semiring.name == "bool" else f" @{decl.semiring.name}"
    lines.append(f"edb {decl.name}({', '.join(decl.attrs)}){srs}.")
  for rel in prog.helpers:
    lines.append(f"helper {rel}.")
  for c in prog.constraints:
    match c:
      case Invariant(lhs, rhs):
        lines.append(f"invariant {expr_to_str(lhs)} == {expr_to_str(rhs)}.")
      case _:
        lines.append(f"constraint {c!r}.")
  for st in prog.strata:
    lines.append(f"@{st.semiring.name}")
    for r in st.rules:
      lines.append(rule_to_str(r, st.semiring))
  for rel in prog.outputs:
    lines.append(f"output {rel}.")
  return "\n".join(lines) + "\n"
