"""Ordered semirings over which programs are evaluated.

Values are plain Python objects: bool for the Boolean semiring, nonnegative
ints for the others, plus the two sentinels INF and BOT. NatBot additionally
admits nonnegative Fractions so that division-heavy programs can be compared
exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable


class _Sentinel:
  def __init__(self, name: str):
    self.name = name

  def __repr__(self):
    return self.name

  def __deepcopy__(self, memo):
    return self

  def __copy__(self):
    return self


INF = _Sentinel("inf")
BOT = _Sentinel("bot")

Value = Any  # bool | int | Fraction | INF | BOT


@dataclass(frozen=True)
class Semiring:
  name: str
  zero: Value
  one: Value
  plus: Callable[[Value, Value], Value]
  times: Callable[[Value, Value], Value]
  leq: Callable[[Value, Value], bool]  # the semiring order a <= b
  idempotent: bool
  annihilating: bool  # x * zero == zero for all x
  check: Callable[[Value], bool]

  def cast(self, b: bool) -> Value:
    return self.one if b else self.zero

  def plus_all(self, vals, default=None):
    acc = self.zero if default is None else default
    for v in vals:
      acc = self.plus(acc, v)
    return acc

  def __repr__(self):
    return f"Semiring({self.name})"


def _bool_check(v):
  return isinstance(v, bool)


def _trop_check(v):
  return v is INF or (isinstance(v, int) and not isinstance(v, bool) and v >= 0)


def _natinf_check(v):
  return v is INF or (isinstance(v, int) and not isinstance(v, bool) and v >= 0)


def _natbot_check(v):
  if v is BOT:
    return True
  if isinstance(v, bool):
    return False
  return isinstance(v, (int, Fraction)) and v >= 0


def _trop_plus(a, b):
  if a is INF:
    return b
  if b is INF:
    return a
  return min(a, b)


def _trop_times(a, b):
  if a is INF or b is INF:
    return INF
  return a + b


def _trop_leq(a, b):
  # inf is the smallest element; otherwise the order is reversed numeric.
  if a is INF:
    return True
  if b is INF:
    return False
  return a >= b


def _natinf_plus(a, b):
  if a is INF or b is INF:
    return INF
  return a + b


def _natinf_times(a, b):
  if a == 0 or b == 0:
    return 0
  if a is INF or b is INF:
    return INF
  return a * b


def _natinf_leq(a, b):
  if b is INF:
    return True
  if a is INF:
    return False
  return a <= b


def _natbot_plus(a, b):
  if a is BOT or b is BOT:
    return BOT
  return a + b


def _natbot_times(a, b):
  # bot absorbs through times as well, so annihilation x * 0 == 0 fails at bot.
  if a is BOT or b is BOT:
    return BOT
  return a * b


def _natbot_leq(a, b):
  if a is BOT:
    return True
  if b is BOT:
    return False
  return a <= b


BOOL = Semiring(
  name="bool", zero=False, one=True,
  plus=lambda a, b: a or b, times=lambda a, b: a and b,
  leq=lambda a, b: (not a) or b,
  idempotent=True, annihilating=True, check=_bool_check)

TROP = Semiring(
  name="trop", zero=INF, one=0,
  plus=_trop_plus, times=_trop_times, leq=_trop_leq,
  idempotent=True, annihilating=True, check=_trop_check)

NATINF = Semiring(
  name="natinf", zero=0, one=1,
  plus=_natinf_plus, times=_natinf_times, leq=_natinf_leq,
  idempotent=False, annihilating=True, check=_natinf_check)

NATBOT = Semiring(
  name="natbot", zero=0, one=1,
  plus=_natbot_plus, times=_natbot_times, leq=_natbot_leq,
  idempotent=False, annihilating=False, check=_natbot_check)


def _maxnat_plus(a, b):
  if a is INF or b is INF:
    return INF
  return max(a, b)


# max-plus over the naturals with infinity; plus and times share the neutral
# element 0, so annihilation fails and it is only a pre-semiring. Used for
# final aggregation strata (e.g. eccentricity), never for recursion.
MAXNAT = Semiring(
  name="maxnat", zero=0, one=0,
  plus=_maxnat_plus, times=_trop_times, leq=_natinf_leq,
  idempotent=True, annihilating=False, check=_natinf_check)

SEMIRINGS = {s.name: s for s in (BOOL, TROP, NATINF, NATBOT, MAXNAT)}


def get_semiring(name: str) -> Semiring:
  try:
    return SEMIRINGS[name]
  except KeyError:
    raise ValueError(f"unknown semiring {name!r}") from None
