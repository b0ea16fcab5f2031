"""Tagged physical address space: regions, page arithmetic, byte store, sentinels.

The host's physical memory is described as a sorted list of disjoint,
page-aligned regions, each tagged with a kind (DMA window, kernel-only,
per-process, device MMIO, ...). A sparse byte store backs the pages that
simulations actually touch: page-table walks, sentinel probes, and
inference writes all go through it.
"""

from __future__ import annotations

import enum
from bisect import bisect_right
from dataclasses import dataclass

PAGE_SHIFT_DEFAULT = 12  # 4 KiB pages

_KIND_NAMES = ("AIMem", "AIRMem", "DMem", "HMem", "KMem", "UMem", "Unmapped")

# Kinds that can appear on the limited-address-control axis. Device MMIO
# (AIMem) counts here because buffers of other clients can live inside it,
# even though restricted_for() below only covers host RAM kinds.
RESTRICTED_KIND_NAMES = frozenset(
    ("AIMem", "AIRMem", "DMem", "HMem", "KMem", "UMem")
)


class MapError(ValueError):
    """Raised for malformed region lists or config-level map problems."""


@dataclass(frozen=True)
class RegionKind:
    """A region tag; UMem additionally carries the owning process id."""

    name: str
    pid: int | None = None

    def __post_init__(self):
        if self.name not in _KIND_NAMES:
            raise MapError("unknown region kind: %r" % (self.name,))
        if (self.name == "UMem") != (self.pid is not None):
            raise MapError("pid is required for UMem and only for UMem")

    def __str__(self):
        if self.pid is not None:
            return "%s(%d)" % (self.name, self.pid)
        return self.name


AIMEM = RegionKind("AIMem")
AIRMEM = RegionKind("AIRMem")
DMEM = RegionKind("DMem")
HMEM = RegionKind("HMem")
KMEM = RegionKind("KMem")
UNMAPPED = RegionKind("Unmapped")


def umem(pid: int) -> RegionKind:
    return RegionKind("UMem", pid)


@dataclass(frozen=True)
class Region:
    start: int
    end: int  # exclusive
    kind: RegionKind


class MemoryMap:
    """Immutable, sorted, disjoint set of tagged physical regions."""

    def __init__(self, regions, page_shift: int = PAGE_SHIFT_DEFAULT):
        if not 12 <= page_shift <= 24:
            raise MapError("page_shift must be in [12, 24]")
        self.page_shift = page_shift
        self.page_size = 1 << page_shift
        ordered = sorted(regions, key=lambda r: r.start)
        prev_end = None
        for r in ordered:
            if r.start >= r.end:
                raise MapError("empty or inverted region at 0x%x" % r.start)
            if r.start % self.page_size or r.end % self.page_size:
                raise MapError("region 0x%x-0x%x is not page-aligned" % (r.start, r.end))
            if prev_end is not None and r.start < prev_end:
                raise MapError("regions overlap at 0x%x" % r.start)
            if r.kind == UNMAPPED:
                raise MapError("Unmapped is implied by absence, not listed")
            prev_end = r.end
        self.regions: tuple[Region, ...] = tuple(ordered)
        self._starts = [r.start for r in self.regions]

    def region_of(self, addr: int) -> Region | None:
        i = bisect_right(self._starts, addr) - 1
        if i >= 0 and addr < self.regions[i].end:
            return self.regions[i]
        return None

    def classify(self, addr: int) -> RegionKind:
        r = self.region_of(addr)
        return r.kind if r is not None else UNMAPPED

    def page_index(self, addr: int) -> int:
        return addr >> self.page_shift

    def page_addr(self, page: int) -> int:
        return page << self.page_shift

    def region_pages(self, region: Region) -> range:
        return range(region.start >> self.page_shift, region.end >> self.page_shift)

    def all_pages(self) -> set[int]:
        out: set[int] = set()
        for r in self.regions:
            out.update(self.region_pages(r))
        return out

    def pages_of(self, name: str, pid: int | None = None) -> set[int]:
        """All pages whose region kind matches `name` (and pid, for UMem)."""
        out: set[int] = set()
        for r in self.regions:
            if r.kind.name != name:
                continue
            if name == "UMem" and pid is not None and r.kind.pid != pid:
                continue
            out.update(self.region_pages(r))
        return out

    def smem_pages(self) -> set[int]:
        """All system-RAM pages: everything mapped except device MMIO."""
        out: set[int] = set()
        for r in self.regions:
            if r.kind.name != "AIMem":
                out.update(self.region_pages(r))
        return out

    def restricted_for(self, pid: int) -> set[int]:
        """Host-RAM pages the given process may not touch on its own."""
        out: set[int] = set()
        for r in self.regions:
            k = r.kind
            if k.name in ("KMem", "HMem", "AIRMem", "DMem"):
                out.update(self.region_pages(r))
            elif k.name == "UMem" and k.pid != pid:
                out.update(self.region_pages(r))
        return out

    def top_addr(self) -> int:
        return self.regions[-1].end if self.regions else 0


class SparseMemory:
    """Byte-addressable physical memory, materialized one page per first write.

    Unwritten bytes read as zero. Words are 8 bytes, little-endian.
    """

    WORD = 8

    def __init__(self, page_shift: int = PAGE_SHIFT_DEFAULT):
        self.page_shift = page_shift
        self.page_size = 1 << page_shift
        self._pages: dict[int, bytearray] = {}

    def _page_for_write(self, page: int) -> bytearray:
        buf = self._pages.get(page)
        if buf is None:
            buf = bytearray(self.page_size)
            self._pages[page] = buf
        return buf

    def write(self, addr: int, data: bytes) -> None:
        off = addr & (self.page_size - 1)
        page = addr >> self.page_shift
        pos = 0
        while pos < len(data):
            chunk = min(len(data) - pos, self.page_size - off)
            self._page_for_write(page)[off : off + chunk] = data[pos : pos + chunk]
            pos += chunk
            page += 1
            off = 0

    def read(self, addr: int, n: int) -> bytes:
        out = bytearray()
        off = addr & (self.page_size - 1)
        page = addr >> self.page_shift
        while len(out) < n:
            chunk = min(n - len(out), self.page_size - off)
            buf = self._pages.get(page)
            if buf is None:
                out.extend(bytes(chunk))
            else:
                out.extend(buf[off : off + chunk])
            page += 1
            off = 0
        return bytes(out)

    def write_word(self, addr: int, value: int) -> None:
        self.write(addr, (value & (1 << 64) - 1).to_bytes(self.WORD, "little"))

    def read_word(self, addr: int) -> int:
        return int.from_bytes(self.read(addr, self.WORD), "little")

    def page_bytes(self, page: int) -> bytes:
        return self.read(page << self.page_shift, self.page_size)


class SentinelResult(enum.Enum):
    INTACT = "Intact"
    ALTERED = "Altered"


@dataclass(frozen=True)
class SentinelPage:
    """A page filled with a repeating 64-bit pattern, checked after probes."""

    page: int
    pattern: int


def fill_sentinel(mem: SparseMemory, page: int, pattern: int) -> SentinelPage:
    base = page << mem.page_shift
    word = (pattern & (1 << 64) - 1).to_bytes(SparseMemory.WORD, "little")
    mem.write(base, word * (mem.page_size // SparseMemory.WORD))
    return SentinelPage(page=page, pattern=pattern)


def check_sentinel(mem: SparseMemory, sentinel: SentinelPage) -> SentinelResult:
    data = mem.page_bytes(sentinel.page)
    word = (sentinel.pattern & (1 << 64) - 1).to_bytes(SparseMemory.WORD, "little")
    for off in range(0, len(data), SparseMemory.WORD):
        if data[off : off + SparseMemory.WORD] != word:
            return SentinelResult.ALTERED
    return SentinelResult.INTACT
