"""Shared fixtures-in-plain-python for the test suite.

The standard map is a small synthetic board layout: every kind is present,
everything fits in one 16 MB translation granule, and page indices stay
below 4096 so brute-force oracles are cheap.
"""

from __future__ import annotations

from accelmem.memory import (
    AIMEM,
    AIRMEM,
    DMEM,
    HMEM,
    KMEM,
    MemoryMap,
    Region,
    SparseMemory,
    umem,
)
from accelmem.translation import Phys

ATTACKER = 1
VICTIM = 2

AIMEM_RANGE = (0x0000_0000, 0x0002_0000)   # pages   0..31
DMEM_RANGE = (0x0010_0000, 0x0020_0000)    # pages 256..511
AIRMEM_RANGE = (0x0020_0000, 0x0028_0000)  # pages 512..639
HMEM_RANGE = (0x0028_0000, 0x002C_0000)    # pages 640..703
KMEM_RANGE = (0x002C_0000, 0x0030_0000)    # pages 704..767
UMEM1_RANGE = (0x0030_0000, 0x0032_0000)   # pages 768..799
UMEM2_RANGE = (0x0032_0000, 0x0034_0000)   # pages 800..831


def standard_regions():
    return [
        Region(*AIMEM_RANGE, AIMEM),
        Region(*DMEM_RANGE, DMEM),
        Region(*AIRMEM_RANGE, AIRMEM),
        Region(*HMEM_RANGE, HMEM),
        Region(*KMEM_RANGE, KMEM),
        Region(*UMEM1_RANGE, umem(ATTACKER)),
        Region(*UMEM2_RANGE, umem(VICTIM)),
    ]


def standard_map() -> MemoryMap:
    return MemoryMap(standard_regions())


def standard_mem() -> SparseMemory:
    return SparseMemory()


def page(addr: int) -> int:
    return addr >> 12


def random_board_map(rng) -> MemoryMap:
    """A small randomized board: required regions, random sizes and gaps."""
    regions = []
    cursor = 0

    def add(kind, npages):
        nonlocal cursor
        start = cursor
        cursor += npages
        regions.append(Region(start << 12, cursor << 12, kind))
        if rng.random() < 0.5:
            cursor += rng.randint(1, 3)

    add(AIMEM, rng.randint(8, 24))
    add(DMEM, rng.randint(16, 48))
    add(AIRMEM, rng.randint(8, 24))
    if rng.random() < 0.8:
        add(HMEM, rng.randint(4, 16))
    if rng.random() < 0.8:
        add(KMEM, rng.randint(4, 16))
    add(umem(1), rng.randint(8, 16))
    add(umem(2), rng.randint(8, 16))
    return MemoryMap(regions)


def brute_reachable(h) -> set[int]:
    """Recompute what the attacker can reach using only translate()."""
    ctx = h.ctx
    model, mmap = ctx.model, ctx.map
    shift = mmap.page_shift
    pages = set()
    if model.kind == "message_passing":
        return pages
    if hasattr(model, "set_active"):
        model.set_active(ctx.attacker_pid)

    if model.kind == "identity":
        for p in mmap.all_pages():
            if isinstance(model.translate(p << shift), Phys):
                pages.add(p)
        return pages

    if model.kind == "two_level":
        slots = [s << shift for s in range(len(model.simple))]
        for hi in model.extended:
            for lo in range(model.leaf_slots):
                pn = hi * model.leaf_slots + lo
                slots.append((1 << model.extended_bit) | (pn << shift))
        for smid in slots:
            out = model.translate(smid)
            if isinstance(out, Phys):
                pages.add(out.addr >> shift)
        return pages

    if model.kind == "per_use":
        for pn in range(model.slots):
            out = model.translate(pn << shift)
            if isinstance(out, Phys):
                pages.add(out.addr >> shift)
        return pages

    if model.kind == "flat_mtlb_stlb":
        for p in mmap.all_pages():
            if isinstance(model.translate(p << shift), Phys):
                pages.add(p)
        for granule in model.stlb:
            for idx in range(model.stlb_entries):
                dva = (granule << model.GRANULE_SHIFT) | (idx << shift)
                out = model.translate(dva)
                if isinstance(out, Phys):
                    pages.add(out.addr >> shift)
        if pages & model.table_pages():
            return set(mmap.all_pages())
        return pages

    assert model.kind == "pagetable_base"
    if mmap.pages_of("UMem", pid=ctx.attacker_pid):
        return set(mmap.all_pages())  # forged table in any owned page
    for slot in range(model.l1_entries):
        out = model.translate(model.l1_base, slot << model.granule_shift)
        if isinstance(out, Phys):
            span = 1 << (model.granule_shift - shift)
            start = (out.addr >> model.granule_shift) << (model.granule_shift - shift)
            known = set(mmap.all_pages())
            pages.update(p for p in range(start, start + span) if p in known)
    if pages & model.table_pages():
        return set(mmap.all_pages())
    return pages


class LruOracle:
    """Timestamp-based reference: evict the least recently used page."""

    def __init__(self, size):
        self.size = size
        self.last_use = {}
        self.clock = 0

    def access(self, page_index):
        self.clock += 1
        hit = page_index in self.last_use
        if not hit and len(self.last_use) == self.size:
            victim = min(self.last_use, key=lambda p: self.last_use[p])
            del self.last_use[victim]
        self.last_use[page_index] = self.clock
        return hit

    def order(self):
        return sorted(self.last_use, key=lambda p: -self.last_use[p])
