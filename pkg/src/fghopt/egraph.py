"""A small e-graph (union-find + hashcons + congruence closure) over the
normal-form expression language, with the rewrite rules the optimizer needs:
equality invariants applied to whole summation blocks, guard addition and
absorption justified by implication constraints, value-term splitting in the
tropical semiring, and matching of the G-query to denormalize an expression
into a recursive rule over the output relation.

Summation binders are represented by indexed bvar leaves local to their
block; every union performed here is valid pointwise in the binder values,
so sharing open subterms between blocks is sound."""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Optional

from .ir import (
  Arith, Cast, Cmp, Const, Expr, Fn, IConst, RelAtom, RelPred, Term, Times,
  ValueTerm, Var, canon_cmp, plus_of, subst_term, sum_over, term_vars)
from .normal import (
  NFn, NTerm, NormalForm, factor_free_vars, factor_substitute, normalize)
from .parser import Implication, Invariant
from .semiring import Semiring


class EgraphError(Exception):
  pass


Node = tuple  # (op, child_cid, ...)


class Egraph:
  def __init__(self, semiring: Semiring):
    self.sr = semiring
    self.parent: list[int] = []
    self.classes: dict[int, set[Node]] = {}
    self.hashcons: dict[Node, int] = {}
    self.consts: dict[str, object] = {}
    self.dirty = False

  # -- union-find ----------------------------------------------------------

  def find(self, c: int) -> int:
    while self.parent[c] != c:
      self.parent[c] = self.parent[self.parent[c]]
      c = self.parent[c]
    return c

  def canon_node(self, node: Node) -> Node:
    op = node[0]
    kids = tuple(self.find(c) for c in node[1:])
    if op in ("prod", "plus"):
      kids = tuple(sorted(kids))
    return (op,) + kids

  def add(self, node: Node) -> int:
    node = self.canon_node(node)
    if node in self.hashcons:
      return self.find(self.hashcons[node])
    cid = len(self.parent)
    self.parent.append(cid)
    self.classes[cid] = {node}
    self.hashcons[node] = cid
    return cid

  def union(self, a: int, b: int) -> bool:
    ra, rb = self.find(a), self.find(b)
    if ra == rb:
      return False
    if len(self.classes[ra]) < len(self.classes[rb]):
      ra, rb = rb, ra
    self.parent[rb] = ra
    self.classes[ra] |= self.classes.pop(rb)
    self.dirty = True
    return True

  def rebuild(self):
    while self.dirty:
      self.dirty = False
      seen: dict[Node, int] = {}
      for cid in list(self.classes):
        if self.find(cid) != cid:
          continue
        new_nodes = set()
        for n in self.classes[cid]:
          cn = self.canon_node(n)
          new_nodes.add(cn)
          if cn in seen and self.find(seen[cn]) != self.find(cid):
            self.union(seen[cn], cid)
          seen[cn] = cid
        self.classes[self.find(cid)] = new_nodes
      self.hashcons = {}
      for cid in self.classes:
        if self.find(cid) != cid:
          continue
        for n in self.classes[cid]:
          self.hashcons[n] = cid

  def nodes(self):
    for cid in list(self.classes):
      if self.find(cid) != cid:
        continue
      for n in list(self.classes.get(cid, ())):
        yield cid, n

  @property
  def n_nodes(self):
    return len(self.hashcons)

  # -- building ------------------------------------------------------------

  def mk_const(self, v) -> int:
    key = repr(v)
    self.consts[key] = v
    return self.add((f"const:{key}",))

  def add_term(self, t: Term, env: dict[str, int]) -> int:
    match t:
      case Var(name):
        if name in env:
          return env[name]
        return self.add(("var:" + name,))
      case IConst(v):
        return self.add((f"int:{v}",))
      case Arith(op, l, r):
        return self.add((f"arith:{op}", self.add_term(l, env),
                         self.add_term(r, env)))
    raise TypeError(t)

  def add_factor(self, f, env: dict[str, int]) -> int:
    match f:
      case RelAtom(rel, args):
        return self.add((f"rel:{rel}",) +
                        tuple(self.add_term(a, env) for a in args))
      case Cast(RelPred(rel, args)):
        return self.add((f"castrel:{rel}",) +
                        tuple(self.add_term(a, env) for a in args))
      case Cast(Cmp(op, l, r)):
        return self.add((f"cmp:{op}", self.add_term(l, env),
                         self.add_term(r, env)))
      case Const(v):
        return self.mk_const(v)
      case ValueTerm(t):
        return self.add(("vterm", self.add_term(t, env)))
      case NFn(name, args):
        return self.add((f"fn:{name}",) +
                        tuple(self.add_nf(a) for a in args))
    raise EgraphError(f"factor {f!r}")

  def mk_prod(self, kids: list[int]) -> int:
    if len(kids) == 1:
      return kids[0]
    if not kids:
      return self.mk_const(self.sr.one)
    return self.add(("prod",) + tuple(sorted(kids)))

  def mk_plus(self, kids: list[int]) -> int:
    if len(kids) == 1:
      return kids[0]
    if not kids:
      return self.mk_const(self.sr.zero)
    return self.add(("plus",) + tuple(sorted(kids)))

  def add_nterm(self, t: NTerm) -> int:
    env = {v: self.add((f"bvar:{i}",)) for i, v in enumerate(t.bound)}
    kids = [self.add_factor(f, {}) for f in t.outer]
    if t.bound or t.inner:
      inner = [self.add_factor(f, env) for f in t.inner]
      kids.append(self.add((f"sum:{len(t.bound)}", self.mk_prod(inner))))
    return self.mk_prod(kids)

  def add_nf(self, nf: NormalForm) -> int:
    return self.mk_plus([self.add_nterm(t) for t in nf.terms])

  # -- analyses ------------------------------------------------------------

  def bvar_usage(self) -> dict[int, frozenset[int]]:
    """For each class root, the binder indices its value can depend on:
    intersection over equivalent nodes, computed to a fixpoint, since any
    single representative that avoids a binder shows independence from it."""
    all_b: set[int] = set()
    for _, n in self.nodes():
      if n[0].startswith("bvar:"):
        all_b.add(int(n[0][5:]))
    top = frozenset(all_b)
    usage = {cid: top for cid in self.classes if self.find(cid) == cid}
    changed = True
    while changed:
      changed = False
      for cid, n in self.nodes():
        if n[0].startswith("bvar:"):
          u = frozenset({int(n[0][5:])})
        else:
          u = frozenset()
          for k in n[1:]:
            u |= usage[self.find(k)]
        root = self.find(cid)
        nu = usage[root] & u
        if nu != usage[root]:
          usage[root] = nu
          changed = True
    return usage

  # -- extraction ----------------------------------------------------------

  def extract(self, root: int, forbid_rels: frozenset[str] = frozenset()
              ) -> Expr:
    root = self.find(root)
    cost: dict[int, float] = {}
    best: dict[int, Node] = {}
    changed = True
    while changed:
      changed = False
      for cid, n in self.nodes():
        op = n[0]
        if op.startswith(("rel:", "castrel:")) and \
           op.split(":", 1)[1] in forbid_rels:
          continue
        c = 1.0
        ok = True
        for k in n[1:]:
          kc = cost.get(self.find(k))
          if kc is None:
            ok = False
            break
          c += kc
        if not ok:
          continue
        r = self.find(cid)
        if r not in cost or c < cost[r] or \
           (c == cost[r] and repr(n) < repr(best[r])):
          cost[r] = c
          best[r] = n
          changed = True
    if root not in cost:
      raise EgraphError("no extractable form avoiding the forbidden relations")

    fresh = itertools.count()

    def build_term(cid, benv) -> Term:
      n = best[self.find(cid)]
      op = n[0]
      if op.startswith("var:"):
        return Var(op[4:])
      if op.startswith("int:"):
        return IConst(int(op[4:]))
      if op.startswith("bvar:"):
        i = int(op[5:])
        if i not in benv:
          raise EgraphError("binder escaped its block")
        return Var(benv[i])
      if op.startswith("arith:"):
        return Arith(op[6:], build_term(n[1], benv), build_term(n[2], benv))
      raise EgraphError(f"expected a term node, got {op}")

    def build(cid, benv) -> Expr:
      n = best[self.find(cid)]
      op = n[0]
      if op == "plus":
        return plus_of([build(k, benv) for k in n[1:]])
      if op == "prod":
        out = None
        for k in n[1:]:
          e = build(k, benv)
          out = e if out is None else Times(out, e)
        return out
      if op.startswith("sum:"):
        k = int(op[4:])
        names = [f"s{next(fresh)}" for _ in range(k)]
        inner_env = dict(benv)
        for i, nm in enumerate(names):
          inner_env[i] = nm
        return sum_over(names, build(n[1], inner_env))
      if op.startswith("rel:"):
        return RelAtom(op[4:], tuple(build_term(k, benv) for k in n[1:]))
      if op.startswith("castrel:"):
        return Cast(RelPred(op[8:], tuple(build_term(k, benv)
                                          for k in n[1:])))
      if op.startswith("cmp:"):
        return Cast(Cmp(op[4:], build_term(n[1], benv),
                        build_term(n[2], benv)))
      if op.startswith("const:"):
        return Const(self.consts[op[6:]])
      if op == "vterm":
        return ValueTerm(build_term(n[1], benv))
      if op.startswith("fn:"):
        return Fn(op[3:], tuple(build(k, benv) for k in n[1:]))
      raise EgraphError(f"cannot rebuild node {op}")

    return build(root, {})

  def extract_term(self, cid) -> Optional[Term]:
    """Extract a key-level term from a class; binder leaves become reserved
    __b<i> variables so results from different classes are comparable and
    can be re-inserted with term_to_class."""
    memo: dict[int, Optional[Term]] = {}

    def go(c, depth):
      c = self.find(c)
      if c in memo:
        return memo[c]
      if depth <= 0:
        return None
      memo[c] = None
      for n in sorted(self.classes[c], key=repr):
        op = n[0]
        if op.startswith("var:"):
          memo[c] = Var(op[4:])
          break
        if op.startswith("int:"):
          memo[c] = IConst(int(op[4:]))
          break
        if op.startswith("bvar:"):
          memo[c] = Var(f"__b{op[5:]}")
          break
        if op.startswith("arith:"):
          l = go(n[1], depth - 1)
          r = go(n[2], depth - 1)
          if l is not None and r is not None:
            memo[c] = Arith(op[6:], l, r)
            break
      return memo[c]

    return go(cid, 8)

  def term_to_class(self, t: Term, env: dict[str, int]) -> int:
    """Inverse of extract_term: reserved __b<i> variables become bvar
    leaves again."""
    match t:
      case Var(name) if name.startswith("__b"):
        return self.add((f"bvar:{name[3:]}",))
      case Arith(op, l, r):
        return self.add((f"arith:{op}", self.term_to_class(l, env),
                         self.term_to_class(r, env)))
      case _:
        return self.add_term(t, env)

  # -- dot dump ------------------------------------------------------------

  def to_dot(self) -> str:
    lines = ["digraph egraph {", "  compound=true;"]
    pos: dict[int, str] = {}
    for cid in sorted(self.classes):
      if self.find(cid) != cid:
        continue
      lines.append(f"  subgraph cluster_{cid} {{ label=\"c{cid}\";")
      for i, n in enumerate(sorted(self.classes[cid], key=repr)):
        lines.append(f"    n{cid}_{i} [label=\"{n[0]}\"];")
      pos[cid] = f"n{cid}_0"
      lines.append("  }")
    for cid in sorted(self.classes):
      if self.find(cid) != cid:
        continue
      for i, n in enumerate(sorted(self.classes[cid], key=repr)):
        for k in n[1:]:
          lines.append(f"  n{cid}_{i} -> {pos[self.find(k)]};")
    lines.append("}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Pattern matching over classes

@dataclass
class _Pattern:
  """One summation term used as a rewrite pattern: inner factors over free
  pattern variables and the term's own binders."""
  bound: tuple[str, ...]
  factors: tuple


class _Matcher:
  def __init__(self, eg: Egraph):
    self.eg = eg

  def match_term(self, pt: Term, cid: int, env, benv, bound):
    """Yield extended (env, benv) bindings matching pattern term pt against
    class cid. Free pattern variables bind whole classes; pattern binders
    bind binder indices injectively."""
    eg = self.eg
    cid = eg.find(cid)
    match pt:
      case Var(name) if name in bound:
        if name in benv:
          if eg.find(eg.add((f"bvar:{benv[name]}",))) == cid:
            yield env, benv
          return
        taken = set(benv.values())
        for n in eg.classes[cid]:
          if n[0].startswith("bvar:"):
            i = int(n[0][5:])
            if i not in taken:
              yield env, {**benv, name: i}
        return
      case Var(name):
        if name in env:
          if eg.find(env[name]) == cid:
            yield env, benv
          return
        yield {**env, name: cid}, benv
        return
      case IConst(v):
        if (f"int:{v}",) in eg.classes[cid]:
          yield env, benv
        return
      case Arith(op, l, r):
        for n in eg.classes[cid]:
          if n[0] == f"arith:{op}":
            for env2, benv2 in self.match_term(l, n[1], env, benv, bound):
              yield from self.match_term(r, n[2], env2, benv2, bound)
        return
    raise TypeError(pt)

  def match_args(self, pts, cids, env, benv, bound):
    if not pts:
      yield env, benv
      return
    for env2, benv2 in self.match_term(pts[0], cids[0], env, benv, bound):
      yield from self.match_args(pts[1:], cids[1:], env2, benv2, bound)

  def match_factor(self, pf, cid, env, benv, bound):
    eg = self.eg
    cid = eg.find(cid)
    match pf:
      case RelAtom(rel, args) | Cast(RelPred(rel, args)):
        # a boolean relation appears as rel: in its own stratum and as
        # castrel: inside a value stratum; accept either
        for n in eg.classes[cid]:
          if n[0] in (f"rel:{rel}", f"castrel:{rel}") and \
             len(n) - 1 == len(args):
            yield from self.match_args(list(args), list(n[1:]), env, benv,
                                       bound)
      case Cast(Cmp(op, l, r)):
        for n in eg.classes[cid]:
          if n[0] == f"cmp:{op}":
            for env2, benv2 in self.match_term(l, n[1], env, benv, bound):
              yield from self.match_term(r, n[2], env2, benv2, bound)
      case ValueTerm(t):
        for n in eg.classes[cid]:
          if n[0] == "vterm":
            yield from self.match_term(t, n[1], env, benv, bound)
      case Const(v):
        if (f"const:{v!r}",) in eg.classes[cid]:
          yield env, benv

  def match_factors(self, pfs, cids, used, env, benv, bound):
    """Match pattern factors against distinct members of cids; yields
    (env, benv, used index set)."""
    if not pfs:
      yield env, benv, used
      return
    for i, cid in enumerate(cids):
      if i in used:
        continue
      for env2, benv2 in self.match_factor(pfs[0], cid, env, benv, bound):
        yield from self.match_factors(pfs[1:], cids, used | {i}, env2, benv2,
                                      bound)


# ---------------------------------------------------------------------------
# Rewrite rules

def _build_factor_cls(eg: Egraph, f, env: dict[str, int],
                      benv: dict[str, int], bound) -> int:
  """Instantiate a replacement factor: free pattern variables from env
  (class ids), binder names from benv (binder indices)."""
  tenv = {}
  for v in factor_free_vars(f):
    if v in bound and v in benv:
      tenv[v] = eg.add((f"bvar:{benv[v]}",))
    elif v in env:
      tenv[v] = env[v]
    else:
      raise EgraphError(f"unbound pattern variable {v}")
  match f:
    case RelAtom(rel, args):
      return eg.add((f"rel:{rel}",) +
                    tuple(eg.add_term(a, tenv) for a in args))
    case Cast(RelPred(rel, args)):
      return eg.add((f"castrel:{rel}",) +
                    tuple(eg.add_term(a, tenv) for a in args))
    case Cast(Cmp(op, l, r)):
      return eg.add((f"cmp:{op}", eg.add_term(l, tenv), eg.add_term(r, tenv)))
    case ValueTerm(t):
      return eg.add(("vterm", eg.add_term(t, tenv)))
    case Const(v):
      return eg.mk_const(v)
  raise EgraphError(f"cannot instantiate {f!r}")


def _block_children(eg: Egraph, body: int) -> list[list[int]]:
  """Factor lists for a summation body class: its product nodes, plus the
  class itself as a single factor."""
  out = [[body]]
  for n in eg.classes[eg.find(body)]:
    if n[0] == "prod":
      out.append(list(n[1:]))
  return out


@dataclass
class SumRewrite:
  """Rewrite a matched sub-block of a summation. With keep_binders the
  matched factors are replaced in place (equality invariants); without it
  the matched binders are consumed and the remaining ones renumbered
  (G-query denormalization)."""
  name: str
  pattern: _Pattern
  replacement: tuple
  keep_binders: bool

  def apply(self, eg: Egraph) -> list[tuple[int, int]]:
    if not self.pattern.factors:
      return []
    m = _Matcher(eg)
    usage = eg.bvar_usage()
    out = []
    bound = set(self.pattern.bound)
    for cid, node in list(eg.nodes()):
      if not node[0].startswith("sum:"):
        continue
      k = int(node[0][4:])
      if len(self.pattern.bound) > k:
        continue
      for kids in _block_children(eg, node[1]):
        if len(self.pattern.factors) > len(kids):
          continue
        for env, benv, used in m.match_factors(
            list(self.pattern.factors), kids, frozenset(), {}, {}, bound):
          if len(benv) != len(self.pattern.bound):
            continue
          matched_b = set(benv.values())
          rest = [kids[i] for i in range(len(kids)) if i not in used]
          if not self.keep_binders:
            # consumed binders must not leak into unmatched factors or the
            # classes bound to free pattern variables
            if any(usage[eg.find(c)] & matched_b for c in rest):
              continue
            if any(usage[eg.find(c)] & matched_b for c in env.values()):
              continue
          try:
            rep = [_build_factor_cls(eg, f, env, benv, bound)
                   for f in self.replacement]
          except EgraphError:
            continue
          if self.keep_binders:
            out.append((cid, eg.add((f"sum:{k}", eg.mk_prod(rest + rep)))))
          else:
            remaining = sorted(set(range(k)) - matched_b)
            ren = {old: i for i, old in enumerate(remaining)}
            try:
              kids2 = [_reindex(eg, c, ren) for c in rest + rep]
            except EgraphError:
              continue
            body = eg.mk_prod(kids2)
            new = eg.add((f"sum:{len(remaining)}", body)) if remaining \
              else body
            out.append((cid, new))
    return out


def _reindex(eg: Egraph, cid: int, ren: dict[int, int], depth: int = 16
             ) -> int:
  """Rebuild a class with its binder indices renumbered, picking any
  representative that can be rebuilt."""
  if depth <= 0:
    raise EgraphError("reindex depth exceeded")
  cid = eg.find(cid)
  for node in sorted(eg.classes[cid], key=repr):
    op = node[0]
    if op.startswith("bvar:"):
      i = int(op[5:])
      if i in ren:
        return eg.add((f"bvar:{ren[i]}",))
      continue
    if op.startswith(("var:", "int:", "const:")):
      return cid
    try:
      return eg.add((op,) + tuple(_reindex(eg, k, ren, depth - 1)
                                  for k in node[1:]))
    except EgraphError:
      continue
  raise EgraphError("no reindexable representative")


@dataclass
class AtomRewrite:
  """Union every match of a single relation atom pattern with the
  instantiated replacement (G-queries that are plain atoms)."""
  name: str
  pattern: object
  replacement: object

  def apply(self, eg: Egraph) -> list[tuple[int, int]]:
    m = _Matcher(eg)
    out = []
    for cid, node in list(eg.nodes()):
      for env, _ in m.match_factor(self.pattern, cid, {}, {}, set()):
        try:
          out.append((cid, _build_factor_cls(eg, self.replacement, env, {},
                                             set())))
        except EgraphError:
          continue
    return out


@dataclass
class GuardRule:
  """Implication body => guards, installed as guard addition (a product
  containing the body also satisfies the guards) and guard absorption (a
  guard implied by the matched body can be dropped). Comparison identity is
  by canonical linear signature over extracted terms, so it is insensitive
  to how a comparison node happens to be structured."""
  name: str
  body: tuple[RelPred, ...]
  guards: tuple[Cmp, ...]

  def apply(self, eg: Egraph) -> list[tuple[int, int]]:
    m = _Matcher(eg)
    out = []
    patterns = [Cast(p) for p in self.body]
    for cid, node in list(eg.nodes()):
      if node[0] != "prod":
        continue
      kids = list(node[1:])
      sigs: list[Optional[str]] = []
      for kd in kids:
        sig = None
        for n in eg.classes[eg.find(kd)]:
          if n[0].startswith("cmp:"):
            l = eg.extract_term(n[1])
            r = eg.extract_term(n[2])
            if l is not None and r is not None:
              sig = repr(canon_cmp(Cmp(n[0][4:], l, r)))
            break
        sigs.append(sig)
      for env, _, used in m.match_factors(patterns, kids, frozenset(), {},
                                          {}, set()):
        tenv: dict[str, Term] = {}
        ok = True
        for v in sorted(env):
          t = eg.extract_term(env[v])
          if t is None:
            ok = False
            break
          tenv[v] = t
        if not ok:
          continue
        want = []
        for g in self.guards:
          inst = canon_cmp(Cmp(g.op, subst_term(g.left, tenv),
                               subst_term(g.right, tenv)))
          want.append((repr(inst), inst))
        want_sigs = {s for s, _ in want}
        have = {s for s in sigs if s is not None}
        missing = [inst for s, inst in want if s not in have]
        if missing:
          try:
            adds = [eg.add((f"cmp:{i.op}", eg.term_to_class(i.left, {}),
                            eg.term_to_class(i.right, {})))
                    for i in missing]
            out.append((cid, eg.mk_prod(kids + adds)))
          except (TypeError, EgraphError):
            pass
        droppable = [i for i in range(len(kids))
                     if i not in used and sigs[i] in want_sigs]
        if droppable:
          out.append((cid, eg.mk_prod(
            [k for i, k in enumerate(kids) if i not in droppable])))
    return out


@dataclass
class CanonRule:
  """Structural normalization kept as rewrites: flatten a product whose
  factor class also holds a product (and likewise for sums), and drop
  multiplicative identity factors and additive identity summands."""
  name: str = "canon"

  def apply(self, eg: Egraph) -> list[tuple[int, int]]:
    one_key = f"const:{eg.sr.one!r}"
    zero_key = f"const:{eg.sr.zero!r}"
    out = []
    for cid, node in list(eg.nodes()):
      if node[0] not in ("prod", "plus"):
        continue
      drop_key = one_key if node[0] == "prod" else zero_key
      kids = list(node[1:])
      flat: list[int] = []
      changed = False
      for k in kids:
        sub = None
        dropped = False
        for n in eg.classes[eg.find(k)]:
          if n[0] == node[0]:
            sub = list(n[1:])
          elif n[0] == drop_key:
            dropped = True
        if dropped:
          changed = True
        elif sub is not None:
          flat.extend(sub)
          changed = True
        else:
          flat.append(k)
      if changed:
        mk = eg.mk_prod if node[0] == "prod" else eg.mk_plus
        out.append((cid, mk(flat)))
    return out


@dataclass
class VtermSplit:
  """val(t1 + t2) = val(t1) * val(t2) in the tropical semiring, where times
  is numeric addition; ground value terms fold to constants."""
  name: str = "vterm-split"

  def apply(self, eg: Egraph) -> list[tuple[int, int]]:
    out = []
    for cid, node in list(eg.nodes()):
      if node[0] != "vterm":
        continue
      for n in list(eg.classes[eg.find(node[1])]):
        if n[0] == "arith:+":
          out.append((cid, eg.mk_prod([eg.add(("vterm", n[1])),
                                       eg.add(("vterm", n[2]))])))
        elif n[0].startswith("int:"):
          out.append((cid, eg.mk_const(int(n[0][4:]))))
    return out


# ---------------------------------------------------------------------------
# Saturation

@dataclass
class SaturateStats:
  iterations: int = 0
  unions: int = 0
  nodes: int = 0
  saturated: bool = False


def saturate(eg: Egraph, rules, max_iters: int = 30, max_nodes: int = 50000,
             max_time: float = 5.0) -> SaturateStats:
  stats = SaturateStats()
  start = time.monotonic()
  for it in range(max_iters):
    stats.iterations = it + 1
    pairs = []
    for rule in rules:
      pairs.extend(rule.apply(eg))
      if time.monotonic() - start > max_time:
        break
    changed = 0
    for a, b in pairs:
      if eg.union(a, b):
        changed += 1
    eg.rebuild()
    stats.unions += changed
    stats.nodes = eg.n_nodes
    if not changed:
      stats.saturated = True
      break
    if eg.n_nodes > max_nodes or time.monotonic() - start > max_time:
      break
  stats.nodes = eg.n_nodes
  return stats


# ---------------------------------------------------------------------------
# Rule construction from constraints and queries

def _term_pattern_vars(t: NTerm) -> set[str]:
  fv = set()
  for f in t.all_factors():
    fv |= factor_free_vars(f)
  return fv - set(t.bound)


def rules_from_constraints(constraints, sr: Semiring,
                           skipped: Optional[list] = None) -> list:
  rules: list = []
  for c in constraints:
    match c:
      case Invariant(lhs, rhs):
        try:
          n1 = normalize(lhs, sr, (), constraints)
          n2 = normalize(rhs, sr, (), constraints)
        except Exception:
          if skipped is not None:
            skipped.append((c, "not normalizable"))
          continue
        if len(n1.terms) != 1 or len(n2.terms) != 1 or \
           len(n1.terms[0].bound) != len(n2.terms[0].bound):
          if skipped is not None:
            skipped.append((c, "not a single-block identity"))
          continue
        t1, t2 = n1.terms[0], n2.terms[0]
        if t1.outer or t2.outer:
          if skipped is not None:
            skipped.append((c, "constant factors not supported"))
          continue
        fv1, fv2 = _term_pattern_vars(t1), _term_pattern_vars(t2)
        # rename the right side's binders to the left side's names so both
        # directions share one binder vocabulary
        ren = {v2: Var(v1) for v1, v2 in zip(t1.bound, t2.bound)}
        rhs_f = tuple(factor_substitute(f, ren) for f in t2.inner)
        if fv2 <= fv1:
          rules.append(SumRewrite("inv", _Pattern(t1.bound, t1.inner),
                                  rhs_f, keep_binders=True))
        if fv1 <= fv2:
          rules.append(SumRewrite("inv-rev", _Pattern(t1.bound, rhs_f),
                                  tuple(t1.inner), keep_binders=True))
        if not (fv1 <= fv2 or fv2 <= fv1) and skipped is not None:
          skipped.append((c, "sides bind incomparable variable sets"))
      case Implication(body, head):
        if len(head) == 1 and all(isinstance(p, Cmp) for p in head[0]) and \
           body and all(isinstance(p, RelPred) for p in body):
          hv: set[str] = set()
          for p in head[0]:
            hv |= term_vars(p.left) | term_vars(p.right)
          bv: set[str] = set()
          for p in body:
            for a in p.args:
              bv |= term_vars(a)
          if hv <= bv:
            rules.append(GuardRule("guard", tuple(body),
                                   tuple(canon_cmp(p) for p in head[0])))
      case _:
        pass
  return rules


def default_rules(sr: Semiring, constraints=()) -> list:
  rules = rules_from_constraints(constraints, sr)
  rules.append(CanonRule())
  if sr.name == "trop":
    rules.append(VtermSplit())
  return rules


def equal_saturate(e1: Expr, e2: Expr, sr: Semiring, head_vars=(),
                   constraints=(), max_iters: int = 30,
                   max_nodes: int = 50000, max_time: float = 5.0) -> bool:
  """Equality by saturation: insert both normal forms, saturate, and check
  they land in one class (or renormalize the extracted best forms)."""
  from .normal import iso_equal
  n1 = normalize(e1, sr, head_vars, constraints)
  n2 = normalize(e2, sr, head_vars, constraints)
  if iso_equal(n1, n2):
    return True
  eg = Egraph(sr)
  c1 = eg.add_nf(n1)
  c2 = eg.add_nf(n2)
  saturate(eg, default_rules(sr, constraints), max_iters, max_nodes, max_time)
  if eg.find(c1) == eg.find(c2):
    return True
  try:
    r1 = normalize(eg.extract(c1), sr, head_vars, constraints)
    r2 = normalize(eg.extract(c2), sr, head_vars, constraints)
    return iso_equal(r1, r2)
  except Exception:
    return False


def g_rewrites(g_rules, out_rel_map: dict[str, str], sr: Semiring,
               constraints=()) -> list:
  """One rewrite per G-rule: occurrences of the query shape become atoms of
  the corresponding output relation."""
  rules = []
  for rule in g_rules:
    gname = out_rel_map.get(rule.head_rel, rule.head_rel)
    gnf = normalize(rule.body, sr, rule.head_vars, constraints)
    if len(gnf.terms) != 1:
      raise EgraphError(
        f"denormalization needs a single-block query for {rule.head_rel}")
    t = gnf.terms[0]
    target = RelAtom(gname, tuple(Var(v) for v in rule.head_vars))
    factors = t.outer + t.inner
    if not t.bound and len(factors) == 1:
      rules.append(AtomRewrite(f"g-{gname}", factors[0], target))
    elif t.outer:
      raise EgraphError(
        f"constant factors in the query for {rule.head_rel} are not supported")
    else:
      rules.append(SumRewrite(f"g-{gname}", _Pattern(t.bound, t.inner),
                              (target,), keep_binders=False))
  return rules


def denormalize(p1: Expr, g_rules, out_rel_map: dict[str, str],
                sr: Semiring, head_vars=(), constraints=(),
                forbid: frozenset[str] = frozenset(),
                max_iters: int = 30, max_nodes: int = 50000,
                max_time: float = 5.0,
                dump_dot: Optional[str] = None) -> Expr:
  """Rewrite p1, the body of G applied to F, into an expression over the
  output relations: saturate with the constraint and G-query rewrites, then
  extract the cheapest form that avoids the forbidden inner relations."""
  nf = normalize(p1, sr, head_vars, constraints)
  eg = Egraph(sr)
  root = eg.add_nf(nf)
  rules = default_rules(sr, constraints) + \
    g_rewrites(g_rules, out_rel_map, sr, constraints)
  saturate(eg, rules, max_iters, max_nodes, max_time)
  if dump_dot:
    from pathlib import Path
    Path(dump_dot).write_text(eg.to_dot())
  return eg.extract(root, forbid)
