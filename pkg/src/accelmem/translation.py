"""Six accelerator address-translation designs as pluggable models.

Each model owns explicit table state and answers three questions: how a
shared-memory identifier (SMID) resolves to a physical address, what the
kernel driver installs or removes when buffers are mapped, and which SMIDs
an unprivileged client can construct for a chosen physical target.

Table entries that live in simulated memory are 8-byte little-endian
words: bit 0 is the valid flag, bits 1..52 hold the mapped granule index.
Walkers read whatever bytes the simulated memory holds, so forged tables
behave exactly like real ones.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from .errors import ConfigError
from .memory import MemoryMap, SparseMemory

_PAGE_MASK_52 = (1 << 52) - 1


class FaultReason(enum.Enum):
    NO_MAPPING = "NoMapping"
    OUT_OF_RANGE = "OutOfRange"
    NOT_ZERO_COPY = "NotZeroCopy"


@dataclass(frozen=True)
class Phys:
    addr: int


@dataclass(frozen=True)
class Fault:
    reason: FaultReason


class Propagation(enum.Enum):
    EAGER = "eager"
    TEARDOWN_ONLY = "teardown_only"


class TranslationError(Exception):
    """Base for errors raised by install-time operations (never by translate)."""


class OutOfRangeError(TranslationError):
    pass


class NotZeroCopyError(TranslationError):
    pass


def encode_entry(granule_index: int, valid: bool = True) -> int:
    return ((granule_index & _PAGE_MASK_52) << 1) | (1 if valid else 0)


def decode_entry(word: int) -> tuple[bool, int]:
    return bool(word & 1), (word >> 1) & _PAGE_MASK_52


class TranslationModel:
    """Common surface; concrete designs override what applies to them."""

    kind = "abstract"

    def __init__(self, mmap: MemoryMap, mem: SparseMemory):
        self.map = mmap
        self.mem = mem

    # -- mapping lifecycle -------------------------------------------------

    def alloc_slot(self, pid: int):
        """Pick the next free install slot for designs where the KD chooses."""
        return None

    def install_mapping(self, pid: int, smid_or_slot, phys_page: int) -> None:
        raise NotImplementedError

    def remove_mapping(self, pid: int, smid_or_slot, propagation: Propagation) -> None:
        raise NotImplementedError

    def teardown(self, pid: int, scrub: bool) -> None:
        raise NotImplementedError

    def smid_after_map(self, slot, phys_page: int) -> int:
        """The identifier handed back to user space after a successful map."""
        return slot

    def slot_at(self, base, index: int):
        """The slot of page number `index` within a multi-page mapping."""
        return None if base is None else base + index * self.map.page_size

    def map_page(self, pid: int, phys_page: int, requested_slot=None):
        """Install one page and return (slot, smid) as the KD would."""
        slot = requested_slot if requested_slot is not None else self.alloc_slot(pid)
        self.install_mapping(pid, slot, phys_page)
        return slot, self.smid_after_map(slot, phys_page)

    def route_for_issued(self, smid: int, phys_page: int):
        """(smid, dva_offset) pair that reaches the mapped page."""
        return (smid, 0)

    # -- resolution --------------------------------------------------------

    def translate(self, smid: int, dva_offset: int = 0):
        raise NotImplementedError

    def construct_smid_for_phys(self, pid: int, target_page: int):
        route = self.construct_route_for_phys(pid, target_page)
        return None if route is None else route[0]

    def construct_route_for_phys(self, pid: int, target_page: int):
        """An (smid, dva) the attacker can present to reach target_page, or None."""
        return None

    def table_pages(self) -> set[int]:
        """Pages holding translation tables inside simulated memory."""
        return set()


# --------------------------------------------------------------------------
# Two-level tables with user-chosen device addresses; the top address bit
# selects the extended (two-step) walk. The KD owns all installs.
# --------------------------------------------------------------------------


class TwoLevelSimpleExtended(TranslationModel):
    kind = "two_level"

    def __init__(
        self,
        mmap: MemoryMap,
        mem: SparseMemory,
        simple_slots: int = 512,
        root_slots: int = 512,
        leaf_slots: int = 512,
        extended_bit: int = 63,
        entry_page_shift: int = 12,
    ):
        super().__init__(mmap, mem)
        self.simple: list[tuple[int, int] | None] = [None] * simple_slots
        self.extended: dict[int, list[tuple[int, int] | None]] = {}
        self.root_slots = root_slots
        self.leaf_slots = leaf_slots
        self.extended_bit = extended_bit
        self.entry_page_shift = entry_page_shift
        self._next_simple = 0

    def _decode(self, va: int) -> tuple[bool, int, int]:
        ext = bool((va >> self.extended_bit) & 1)
        va &= (1 << self.extended_bit) - 1
        return ext, va >> self.entry_page_shift, va & ((1 << self.entry_page_shift) - 1)

    def alloc_slot(self, pid: int) -> int:
        if self._next_simple >= len(self.simple):
            raise OutOfRangeError("simple table full")
        slot = self._next_simple
        self._next_simple += 1
        return slot << self.entry_page_shift

    def install_mapping(self, pid, smid_or_slot, phys_page):
        ext, pn, _ = self._decode(smid_or_slot)
        if ext:
            hi, lo = divmod(pn, self.leaf_slots)
            if hi >= self.root_slots:
                raise OutOfRangeError("extended root %d exceeds capacity" % hi)
            leaf = self.extended.setdefault(hi, [None] * self.leaf_slots)
            leaf[lo] = (phys_page, pid)
        else:
            if pn >= len(self.simple):
                raise OutOfRangeError("simple slot %d exceeds capacity" % pn)
            self.simple[pn] = (phys_page, pid)

    def remove_mapping(self, pid, smid_or_slot, propagation):
        if propagation is Propagation.TEARDOWN_ONLY:
            return
        ext, pn, _ = self._decode(smid_or_slot)
        if ext:
            hi, lo = divmod(pn, self.leaf_slots)
            leaf = self.extended.get(hi)
            if leaf is not None:
                leaf[lo] = None
        elif pn < len(self.simple):
            self.simple[pn] = None

    def teardown(self, pid, scrub):
        if not scrub:
            return
        self.simple = [e if e is not None and e[1] != pid else None for e in self.simple]
        for leaf in self.extended.values():
            for i, e in enumerate(leaf):
                if e is not None and e[1] == pid:
                    leaf[i] = None

    def translate(self, smid, dva_offset=0):
        ext, pn, off = self._decode((smid + dva_offset) & ((1 << 64) - 1))
        if ext:
            hi, lo = divmod(pn, self.leaf_slots)
            if hi >= self.root_slots:
                return Fault(FaultReason.OUT_OF_RANGE)
            leaf = self.extended.get(hi)
            entry = leaf[lo] if leaf is not None else None
        else:
            if pn >= len(self.simple):
                return Fault(FaultReason.OUT_OF_RANGE)
            entry = self.simple[pn]
        if entry is None:
            return Fault(FaultReason.NO_MAPPING)
        return Phys((entry[0] << self.entry_page_shift) | off)

    def iter_entries(self):
        """(smid, phys_page, pid) for every installed entry."""
        for pn, e in enumerate(self.simple):
            if e is not None:
                yield pn << self.entry_page_shift, e[0], e[1]
        for hi, leaf in sorted(self.extended.items()):
            for lo, e in enumerate(leaf):
                if e is not None:
                    pn = hi * self.leaf_slots + lo
                    yield (1 << self.extended_bit) | (pn << self.entry_page_shift), e[0], e[1]


# --------------------------------------------------------------------------
# Boot-time flat mapping of the DMA window at 16 MB granules, plus dynamic
# 4 KB second-level tables allocated from inside that same window. The
# tables being self-mapped is what the two-step escalation abuses.
# --------------------------------------------------------------------------


class FlatMapMtlbStlb(TranslationModel):
    kind = "flat_mtlb_stlb"
    GRANULE_SHIFT = 24  # 16 MB first-level granules

    def __init__(
        self,
        mmap: MemoryMap,
        mem: SparseMemory,
        mtlb_entries: int = 256,
        stlb_entries: int = 4096,
    ):
        super().__init__(mmap, mem)
        flat_kinds = ("DMem", "AIRMem")
        self.flat_ranges = [
            (r.start, r.end) for r in mmap.regions if r.kind.name in flat_kinds
        ]
        dmem = [r for r in mmap.regions if r.kind.name == "DMem"]
        if not dmem:
            raise ConfigError("flat-map design requires a DMem region for its tables")
        self.mtlb_entries = mtlb_entries
        self.stlb_entries = stlb_entries
        self.mtlb: dict[int, str] = {}
        for start, end in self.flat_ranges:
            top = math.ceil(end / (1 << self.GRANULE_SHIFT))
            for g in range(start >> self.GRANULE_SHIFT, top):
                if g >= mtlb_entries:
                    raise ConfigError("flat window exceeds first-level capacity")
                self.mtlb[g] = "flat"
        self.stlb: dict[int, int] = {}  # granule -> table base address
        self._owners: dict[tuple[int, int], int] = {}
        # Tables are carved from the top of the last DMem region, downward.
        self._table_region = dmem[-1]
        self._table_top = self._table_region.end
        self._pages_per_table = (stlb_entries * SparseMemory.WORD) // mmap.page_size
        # Dynamic device addresses live above every mapped physical range.
        self._next_dva = ((mmap.top_addr() >> self.GRANULE_SHIFT) + 1) << self.GRANULE_SHIFT

    def _in_flat_window(self, addr: int) -> bool:
        return any(start <= addr < end for start, end in self.flat_ranges)

    def alloc_dva(self) -> int:
        dva = self._next_dva
        if (dva >> self.GRANULE_SHIFT) >= self.mtlb_entries:
            raise ConfigError("device address space exhausted")
        self._next_dva += self.map.page_size
        return dva

    alloc_slot = lambda self, pid: self.alloc_dva()  # noqa: E731 - same operation

    def _table_for(self, granule: int) -> int:
        base = self.stlb.get(granule)
        if base is None:
            size = self._pages_per_table * self.map.page_size
            base = self._table_top - size
            if base < self._table_region.start:
                raise ConfigError("DMem exhausted by second-level tables")
            self._table_top = base
            self.mem.write(base, bytes(size))  # tables start zeroed
            self.stlb[granule] = base
        return base

    def _entry_addr(self, table_base: int, addr: int) -> int:
        idx = (addr >> self.map.page_shift) & (self.stlb_entries - 1)
        return table_base + idx * SparseMemory.WORD

    def install_mapping(self, pid, smid_or_slot, phys_page):
        dva = smid_or_slot
        if self._in_flat_window(dva):
            raise OutOfRangeError("device address collides with the flat window")
        g = dva >> self.GRANULE_SHIFT
        if g >= self.mtlb_entries:
            raise OutOfRangeError("device address beyond first-level capacity")
        table = self._table_for(g)
        self.mem.write_word(self._entry_addr(table, dva), encode_entry(phys_page))
        self._owners[(g, (dva >> self.map.page_shift) & (self.stlb_entries - 1))] = pid

    def remove_mapping(self, pid, smid_or_slot, propagation):
        if propagation is Propagation.TEARDOWN_ONLY:
            return
        addr = self.stlb_entry_addr(smid_or_slot)
        if addr is not None:
            self.mem.write_word(addr, 0)

    def teardown(self, pid, scrub):
        if not scrub:
            return
        for (g, idx), owner in list(self._owners.items()):
            if owner == pid and g in self.stlb:
                self.mem.write_word(self.stlb[g] + idx * SparseMemory.WORD, 0)
                del self._owners[(g, idx)]

    def smid_after_map(self, slot, phys_page):
        return slot

    def map_page(self, pid, phys_page, requested_slot=None):
        addr = phys_page << self.map.page_shift
        if self._in_flat_window(addr):
            return None, addr  # flat-mapped at boot: the address is the SMID
        slot = requested_slot if requested_slot is not None else self.alloc_dva()
        self.install_mapping(pid, slot, phys_page)
        return slot, slot

    def translate(self, smid, dva_offset=0):
        addr = (smid + dva_offset) & ((1 << 64) - 1)
        if self._in_flat_window(addr):
            return Phys(addr)
        table = self.stlb.get(addr >> self.GRANULE_SHIFT)
        if table is None:
            return Fault(FaultReason.NO_MAPPING)
        valid, page = decode_entry(self.mem.read_word(self._entry_addr(table, addr)))
        if not valid:
            return Fault(FaultReason.NO_MAPPING)
        return Phys((page << self.map.page_shift) | (addr & (self.map.page_size - 1)))

    def stlb_entry_addr(self, dva: int) -> int | None:
        table = self.stlb.get(dva >> self.GRANULE_SHIFT)
        if table is None:
            return None
        return self._entry_addr(table, dva)

    def construct_route_for_phys(self, pid, target_page):
        addr = target_page << self.map.page_shift
        return (addr, 0) if self._in_flat_window(addr) else None

    def table_pages(self):
        out: set[int] = set()
        for base in self.stlb.values():
            first = base >> self.map.page_shift
            out.update(range(first, first + self._pages_per_table))
        return out

    def installed_entries(self):
        """(dva, phys_page, pid) read back from the in-memory tables."""
        for (g, idx), pid in sorted(self._owners.items()):
            base = self.stlb.get(g)
            if base is None:
                continue
            valid, page = decode_entry(self.mem.read_word(base + idx * SparseMemory.WORD))
            if valid:
                yield (g << self.GRANULE_SHIFT) | (idx << self.map.page_shift), page, pid


# --------------------------------------------------------------------------
# The SMID is a pagetable base physical address; the walker starts wherever
# the caller points it. 64 KB granules, single-level, entries in memory.
# --------------------------------------------------------------------------


class PagetableBaseAsSmid(TranslationModel):
    kind = "pagetable_base"

    def __init__(
        self,
        mmap: MemoryMap,
        mem: SparseMemory,
        l1_entries: int = 1024,
        l1_base: int | None = None,
        granule_shift: int = 16,
    ):
        super().__init__(mmap, mem)
        dmem = [r for r in mmap.regions if r.kind.name == "DMem"]
        if not dmem:
            raise ConfigError("pagetable-base design requires a DMem region")
        if l1_base is None:
            l1_base = dmem[0].start  # same physical address on every run
        span = l1_entries * SparseMemory.WORD
        if not any(r.start <= l1_base and l1_base + span <= r.end for r in dmem):
            raise ConfigError("first-level table does not fit inside DMem")
        self.l1_base = l1_base
        self.l1_entries = l1_entries
        self.granule_shift = granule_shift
        self._owners: dict[int, int] = {}  # slot -> pid
        self._next_slot = 0

    def _granule_of(self, page: int) -> int:
        return page >> (self.granule_shift - self.map.page_shift)

    def _dva_low_bits(self, page: int) -> int:
        within = page & ((1 << (self.granule_shift - self.map.page_shift)) - 1)
        return within << self.map.page_shift

    def alloc_slot(self, pid: int) -> int:
        if self._next_slot >= self.l1_entries:
            raise OutOfRangeError("first-level table full")
        slot = self._next_slot
        self._next_slot += 1
        return slot

    def install_mapping(self, pid, smid_or_slot, phys_page):
        slot = smid_or_slot
        if not 0 <= slot < self.l1_entries:
            raise OutOfRangeError("slot %d exceeds table capacity" % slot)
        addr = self.l1_base + slot * SparseMemory.WORD
        self.mem.write_word(addr, encode_entry(self._granule_of(phys_page)))
        self._owners[slot] = pid

    def remove_mapping(self, pid, smid_or_slot, propagation):
        if propagation is Propagation.TEARDOWN_ONLY:
            return
        slot = smid_or_slot
        if 0 <= slot < self.l1_entries:
            self.mem.write_word(self.l1_base + slot * SparseMemory.WORD, 0)

    def teardown(self, pid, scrub):
        if not scrub:
            return  # entries survive session release
        for slot, owner in list(self._owners.items()):
            if owner == pid:
                self.mem.write_word(self.l1_base + slot * SparseMemory.WORD, 0)
                del self._owners[slot]

    def smid_after_map(self, slot, phys_page):
        return self.l1_base

    def slot_at(self, base, index):
        return base + index

    def route_for_issued(self, smid, phys_page):
        dva = self.dva_for_page(smid, phys_page)
        return (smid, dva if dva is not None else 0)

    def translate(self, smid, dva_offset=0):
        # Any base is walked; unregistered ones read raw simulated memory.
        idx = dva_offset >> self.granule_shift
        word = self.mem.read_word(smid + idx * SparseMemory.WORD)
        valid, granule = decode_entry(word)
        if not valid:
            return Fault(FaultReason.NO_MAPPING)
        low = dva_offset & ((1 << self.granule_shift) - 1)
        return Phys((granule << self.granule_shift) | low)

    def dva_for_page(self, base: int, page: int) -> int | None:
        want = self._granule_of(page)
        limit = self.l1_entries if base == self.l1_base else self.l1_entries
        for idx in range(limit):
            valid, granule = decode_entry(self.mem.read_word(base + idx * SparseMemory.WORD))
            if valid and granule == want:
                return (idx << self.granule_shift) | self._dva_low_bits(page)
        return None

    def construct_route_for_phys(self, pid, target_page):
        own = sorted(self.map.pages_of("UMem", pid=pid))
        if not own:
            return None
        # The last owned page hosts the forged table, away from data buffers.
        fake_base = own[-1] << self.map.page_shift
        self.mem.write_word(fake_base, encode_entry(self._granule_of(target_page)))
        return (fake_base, self._dva_low_bits(target_page))

    def table_pages(self):
        first = self.l1_base >> self.map.page_shift
        span = self.l1_entries * SparseMemory.WORD
        count = (span + self.map.page_size - 1) // self.map.page_size
        return set(range(first, first + count))

    def iter_entries(self):
        for slot, pid in sorted(self._owners.items()):
            valid, granule = decode_entry(
                self.mem.read_word(self.l1_base + slot * SparseMemory.WORD)
            )
            if valid:
                yield slot, granule, pid


# --------------------------------------------------------------------------
# The SMID is the physical address itself, valid only inside fixed windows.
# --------------------------------------------------------------------------


class IdentitySmid(TranslationModel):
    kind = "identity"

    def __init__(self, mmap: MemoryMap, mem: SparseMemory, kinds=("DMem", "AIRMem")):
        super().__init__(mmap, mem)
        self.window_kinds = tuple(kinds)
        self.ranges = [
            (r.start, r.end) for r in mmap.regions if r.kind.name in self.window_kinds
        ]
        if not self.ranges:
            raise ConfigError("identity design requires at least one window region")

    def install_mapping(self, pid, smid_or_slot, phys_page):
        pass  # nothing to install: the address is the identifier

    def remove_mapping(self, pid, smid_or_slot, propagation):
        pass

    def teardown(self, pid, scrub):
        pass

    def smid_after_map(self, slot, phys_page):
        return phys_page << self.map.page_shift

    def map_page(self, pid, phys_page, requested_slot=None):
        addr = phys_page << self.map.page_shift
        if not any(start <= addr < end for start, end in self.ranges):
            raise OutOfRangeError("page outside the addressable windows")
        return None, addr

    def translate(self, smid, dva_offset=0):
        addr = smid + dva_offset
        if any(start <= addr < end for start, end in self.ranges):
            return Phys(addr)
        return Fault(FaultReason.OUT_OF_RANGE)

    def construct_route_for_phys(self, pid, target_page):
        addr = target_page << self.map.page_shift
        if any(start <= addr < end for start, end in self.ranges):
            return (addr, 0)
        return None


# --------------------------------------------------------------------------
# Per-client private tables with an active-context switch.
# --------------------------------------------------------------------------


class PerUsePagetables(TranslationModel):
    kind = "per_use"

    def __init__(self, mmap: MemoryMap, mem: SparseMemory, slots: int = 512):
        super().__init__(mmap, mem)
        self.slots = slots
        self.tables: dict[int, dict[int, int]] = {}
        self.active_pid: int | None = None
        self._next_slot = 0

    def set_active(self, pid: int | None) -> None:
        self.active_pid = pid

    def alloc_slot(self, pid: int) -> int:
        if self._next_slot >= self.slots:
            raise OutOfRangeError("device address space full")
        slot = self._next_slot
        self._next_slot += 1
        return slot << self.map.page_shift

    def install_mapping(self, pid, smid_or_slot, phys_page):
        pn = smid_or_slot >> self.map.page_shift
        if pn >= self.slots:
            raise OutOfRangeError("device page %d exceeds capacity" % pn)
        self.tables.setdefault(pid, {})[pn] = phys_page

    def remove_mapping(self, pid, smid_or_slot, propagation):
        if propagation is Propagation.TEARDOWN_ONLY:
            return
        self.tables.get(pid, {}).pop(smid_or_slot >> self.map.page_shift, None)

    def teardown(self, pid, scrub):
        if scrub:
            self.tables.pop(pid, None)

    def translate(self, smid, dva_offset=0):
        va = smid + dva_offset
        pn = va >> self.map.page_shift
        if pn >= self.slots:
            return Fault(FaultReason.OUT_OF_RANGE)
        table = self.tables.get(self.active_pid)
        if table is None or pn not in table:
            return Fault(FaultReason.NO_MAPPING)
        return Phys((table[pn] << self.map.page_shift) | (va & (self.map.page_size - 1)))

    def iter_entries(self, pid: int):
        for pn, page in sorted(self.tables.get(pid, {}).items()):
            yield pn << self.map.page_shift, page


# --------------------------------------------------------------------------
# No shared memory at all: buffers are copied through the kernel.
# --------------------------------------------------------------------------


class MessagePassing(TranslationModel):
    kind = "message_passing"

    def install_mapping(self, pid, smid_or_slot, phys_page):
        raise NotZeroCopyError("design shares no memory")

    def remove_mapping(self, pid, smid_or_slot, propagation):
        pass

    def teardown(self, pid, scrub):
        pass

    def translate(self, smid, dva_offset=0):
        return Fault(FaultReason.NOT_ZERO_COPY)


_MODEL_KINDS = {
    "two_level": TwoLevelSimpleExtended,
    "flat_mtlb_stlb": FlatMapMtlbStlb,
    "pagetable_base": PagetableBaseAsSmid,
    "identity": IdentitySmid,
    "per_use": PerUsePagetables,
    "message_passing": MessagePassing,
}


def build_model(kind: str, mmap: MemoryMap, mem: SparseMemory, **knobs) -> TranslationModel:
    cls = _MODEL_KINDS.get(kind)
    if cls is None:
        raise ConfigError(
            "unknown translation kind %r (expected one of %s)"
            % (kind, ", ".join(sorted(_MODEL_KINDS)))
        )
    return cls(mmap, mem, **knobs)
