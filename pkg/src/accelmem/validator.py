"""On-demand validation defense: a per-cluster five-outcome state machine.

Time is kept in integer ticks (1 tick = 1 ps, so 1 ns = 1000 ticks).
Every accelerator-side memory access is charged at issue time; the defer
returned is added to that access's response latency by the engine. All
validations serialize through one host-side server, modeled by a chip-wide
monotone next_ready deadline.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import ConfigError

TICKS_PER_NS = 1000

DMA_CTRL_REGS = ("SRC", "DST")


def ns_to_ticks(ns: int) -> int:
    return ns * TICKS_PER_NS


def ns_to_cycles(ns, freq_hz) -> Fraction:
    """Exact cycle count for a duration at a clock frequency."""
    freq = Fraction(freq_hz)
    if freq <= 0:
        raise ConfigError("clock frequency must be positive")
    return Fraction(ns) * freq / Fraction(10**9)


def derive_validation_latency_ns(pagewalk_ns, irq_one_way_ns):
    """One validation round trip: a table walk plus two interrupt crossings."""
    return pagewalk_ns + 2 * irq_one_way_ns


@dataclass(frozen=True)
class Load:
    page: int


@dataclass(frozen=True)
class Store:
    page: int


@dataclass(frozen=True)
class DmaCtrlWrite:
    reg: str

    def __post_init__(self):
        if self.reg not in DMA_CTRL_REGS:
            raise ConfigError("DMA descriptor registers are %s, got %r"
                              % ("/".join(DMA_CTRL_REGS), self.reg))


@dataclass(frozen=True)
class DmaPio:
    reg: str


class Outcome(enum.Enum):
    CACHE_HIT = "cache_hit"
    COALESCED = "coalesced"
    COLD_MISS = "cold_miss"
    DMA_CTRL = "dma_ctrl"
    PASSTHROUGH = "passthrough"


@dataclass(frozen=True)
class ValidatorConfig:
    latency_ticks: int
    page_shift: int = 12

    def __post_init__(self):
        if self.latency_ticks <= 0:
            raise ConfigError("validation latency must be positive")


def _zero_counts():
    return {outcome: 0 for outcome in Outcome}


@dataclass
class ValidatorState:
    validated: set = field(default_factory=set)   # (pid, page)
    inflight: dict = field(default_factory=dict)  # page -> (completion, pid)
    next_ready: int = 0
    counts: dict = field(default_factory=_zero_counts)


def _retire(state: ValidatorState, now: int) -> None:
    # Lazy retirement: anything whose validation completed by `now` becomes
    # a cache entry for the pid that paid the miss.
    done = [page for page, (completion, _) in state.inflight.items()
            if completion <= now]
    for page in done:
        _, owner = state.inflight.pop(page)
        state.validated.add((owner, page))


def charge(state: ValidatorState, cfg: ValidatorConfig, pid: int,
           access, now: int):
    """Consult the validator for one access; returns (outcome, defer ticks)."""
    if isinstance(access, DmaPio):
        state.counts[Outcome.PASSTHROUGH] += 1
        return Outcome.PASSTHROUGH, 0

    if isinstance(access, DmaCtrlWrite):
        _retire(state, now)
        completion = max(now, state.next_ready) + cfg.latency_ticks
        state.next_ready = completion
        state.counts[Outcome.DMA_CTRL] += 1
        return Outcome.DMA_CTRL, completion - now

    if not isinstance(access, (Load, Store)):
        raise ConfigError("unknown access kind %r" % (access,))

    page = access.page
    entry = state.inflight.get(page)
    if entry is not None and entry[0] > now:
        # Ride the in-flight validation; pay only its remaining tail.
        state.counts[Outcome.COALESCED] += 1
        return Outcome.COALESCED, entry[0] - now

    _retire(state, now)
    if (pid, page) in state.validated:
        state.counts[Outcome.CACHE_HIT] += 1
        return Outcome.CACHE_HIT, 0

    completion = max(now, state.next_ready) + cfg.latency_ticks
    state.inflight[page] = (completion, pid)
    state.next_ready = completion
    state.counts[Outcome.COLD_MISS] += 1
    return Outcome.COLD_MISS, completion - now
