"""Strict per-transaction IOMMU baseline: fully-associative LRU IOTLB.

Hits complete at now + hit_ticks and never queue. Misses walk the page
table through a single chip-wide port, serialized by a monotone next_ready
deadline (a config switch falls back to the unqueued literal formula).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass(frozen=True)
class IommuConfig:
    tlb_size: int
    hit_ticks: int = 2_000  # a 2 ns SRAM lookup
    miss_ticks: int = 100_000
    serialize_misses: bool = True

    def __post_init__(self):
        if self.tlb_size < 1:
            raise ConfigError("IOTLB needs at least one entry")
        if self.miss_ticks < self.hit_ticks:
            raise ConfigError("a miss cannot be cheaper than a hit")


@dataclass
class IotlbState:
    entries: list = field(default_factory=list)  # page indices, most-recent first
    next_ready: int = 0
    hits: int = 0
    misses: int = 0


def translate_charge(state: IotlbState, cfg: IommuConfig, page: int, now: int):
    """Charge one translation; returns (hit, defer ticks)."""
    if page in state.entries:
        state.entries.remove(page)
        state.entries.insert(0, page)
        state.hits += 1
        return True, cfg.hit_ticks

    if cfg.serialize_misses:
        completion = max(now, state.next_ready) + cfg.miss_ticks
        state.next_ready = completion
    else:
        completion = now + cfg.miss_ticks
        state.next_ready = max(state.next_ready, completion)
    state.entries.insert(0, page)
    if len(state.entries) > cfg.tlb_size:
        state.entries.pop()
    state.misses += 1
    return False, completion - now


def invalidate(state: IotlbState) -> None:
    """Context-switch flush: drop entries, keep the deadline and counters."""
    state.entries.clear()
