"""Tests for the six accelerator address-translation designs."""

from __future__ import annotations

import math

import pytest
from hypothesis import given, settings, strategies as st

from accelmem.errors import ConfigError
from accelmem.memory import AIRMEM, DMEM, MemoryMap, Region, SparseMemory, umem
from accelmem.translation import (
    Fault,
    FaultReason,
    FlatMapMtlbStlb,
    IdentitySmid,
    MessagePassing,
    OutOfRangeError,
    PagetableBaseAsSmid,
    PerUsePagetables,
    Phys,
    Propagation,
    TwoLevelSimpleExtended,
    build_model,
    decode_entry,
    encode_entry,
)

from helpers import (
    ATTACKER,
    DMEM_RANGE,
    HMEM_RANGE,
    KMEM_RANGE,
    UMEM1_RANGE,
    VICTIM,
    standard_map,
    standard_mem,
)


def flat_granule_oracle(ranges, shift=24):
    """Independent granule count: per-region ceiling division, then union."""
    granules = set()
    for start, end in ranges:
        granules.update(range(start >> shift, math.ceil(end / (1 << shift))))
    return len(granules)


# ---------------------------------------------------------------- entry encoding


def test_entry_encoding_round_trip():
    word = encode_entry(0xABCDE)
    valid, page = decode_entry(word)
    assert valid and page == 0xABCDE
    assert decode_entry(0) == (False, 0)
    assert word & 1 == 1  # valid bit is bit 0


# ---------------------------------------------------------------- flat map init


def test_flat_map_single_granule():
    m = MemoryMap([Region(0x0, 0x100_0000, DMEM)])
    model = FlatMapMtlbStlb(m, SparseMemory())
    assert len(model.mtlb) == 1 == flat_granule_oracle([(0x0, 0x100_0000)])


def test_flat_map_six_granules():
    # 64 MB of DMA window plus 32 MB of shared region: 4 + 2 granules.
    ranges = [(0x0, 0x400_0000), (0x400_0000, 0x600_0000)]
    m = MemoryMap([Region(*ranges[0], DMEM), Region(*ranges[1], AIRMEM)])
    model = FlatMapMtlbStlb(m, SparseMemory())
    assert len(model.mtlb) == 6 == flat_granule_oracle(ranges)


def test_flat_map_requires_dma_window():
    m = MemoryMap([Region(0x0, 0x10_0000, AIRMEM)])
    with pytest.raises(ConfigError):
        FlatMapMtlbStlb(m, SparseMemory())


def test_flat_map_identity_window_is_region_exact():
    m = standard_map()
    model = FlatMapMtlbStlb(m, SparseMemory())
    inside = DMEM_RANGE[0] + 0x2345
    assert model.translate(inside) == Phys(inside)
    # Same 16 MB granule, but outside the declared windows: not identity.
    outside = KMEM_RANGE[0]
    assert model.translate(outside) == Fault(FaultReason.NO_MAPPING)


def test_flat_map_self_mapping_tables_live_in_dma_window():
    m = standard_map()
    mem = SparseMemory()
    model = FlatMapMtlbStlb(m, mem)
    dva = model.alloc_dva()
    model.install_mapping(ATTACKER, dva, UMEM1_RANGE[0] >> 12)
    assert model.table_pages()  # a second-level table was allocated
    dmem_pages = set(range(DMEM_RANGE[0] >> 12, DMEM_RANGE[1] >> 12))
    assert model.table_pages() <= dmem_pages
    # The freshly installed mapping resolves through the table.
    assert model.translate(dva) == Phys(UMEM1_RANGE[0])


def test_flat_map_dynamic_entry_visible_in_memory():
    m = standard_map()
    mem = SparseMemory()
    model = FlatMapMtlbStlb(m, mem)
    dva = model.alloc_dva()
    target = UMEM1_RANGE[0] >> 12
    model.install_mapping(ATTACKER, dva, target)
    entry_addr = model.stlb_entry_addr(dva)
    assert entry_addr is not None
    assert decode_entry(mem.read_word(entry_addr)) == (True, target)
    # Overwriting the in-memory entry redirects the walk (the escalation lever).
    victim = KMEM_RANGE[0] >> 12
    mem.write_word(entry_addr, encode_entry(victim))
    assert model.translate(dva) == Phys(victim << 12)


# ---------------------------------------------------------------- message passing


def test_message_passing_never_translates():
    model = MessagePassing(standard_map(), SparseMemory())
    assert model.translate(0x1234) == Fault(FaultReason.NOT_ZERO_COPY)
    assert model.construct_smid_for_phys(ATTACKER, 300) is None


# ---------------------------------------------------------------- two level


def two_level_walk_oracle(model, va):
    """Manual table walk, independent of translate()."""
    ext = (va >> 63) & 1
    pn = (va & ~(1 << 63)) >> 12
    if ext:
        leaf = model.extended.get(pn // 512)
        entry = leaf[pn % 512] if leaf is not None else None
    else:
        entry = model.simple[pn] if pn < len(model.simple) else None
    if entry is None:
        return None
    return (entry[0] << 12) | (va & 0xFFF)


def test_two_level_simple_slot_install_and_walk():
    model = TwoLevelSimpleExtended(standard_map(), SparseMemory())
    smid = 3 << 12  # simple slot 3
    model.install_mapping(ATTACKER, smid, 0x321)
    got = model.translate(smid + 0x10)
    assert got == Phys((0x321 << 12) | 0x10)
    assert got == Phys(two_level_walk_oracle(model, smid + 0x10))


def test_two_level_extended_slot_install_and_walk():
    model = TwoLevelSimpleExtended(standard_map(), SparseMemory())
    pn = 5 * 512 + 7  # root 5, leaf 7
    smid = (1 << 63) | (pn << 12)
    model.install_mapping(ATTACKER, smid, 0x400)
    assert model.translate(smid) == Phys(0x400 << 12)
    assert model.translate(smid) == Phys(two_level_walk_oracle(model, smid))


def test_two_level_empty_slot_faults():
    model = TwoLevelSimpleExtended(standard_map(), SparseMemory())
    assert model.translate(9 << 12) == Fault(FaultReason.NO_MAPPING)


def test_two_level_slot_capacity():
    model = TwoLevelSimpleExtended(standard_map(), SparseMemory())
    with pytest.raises(OutOfRangeError):
        model.install_mapping(ATTACKER, 512 << 12, 0x300)
    assert model.translate(512 << 12) == Fault(FaultReason.OUT_OF_RANGE)


def test_two_level_never_constructs_arbitrary_smids():
    model = TwoLevelSimpleExtended(standard_map(), SparseMemory())
    assert model.construct_smid_for_phys(ATTACKER, KMEM_RANGE[0] >> 12) is None


# ---------------------------------------------------------------- removal semantics


def test_remove_eager_clears_entry():
    model = TwoLevelSimpleExtended(standard_map(), SparseMemory())
    smid = 4 << 12
    model.install_mapping(ATTACKER, smid, 0x300)
    model.remove_mapping(ATTACKER, smid, Propagation.EAGER)
    assert model.translate(smid) == Fault(FaultReason.NO_MAPPING)


def test_remove_teardown_only_leaves_stale_entry():
    model = TwoLevelSimpleExtended(standard_map(), SparseMemory())
    smid = 4 << 12
    model.install_mapping(ATTACKER, smid, 0x300)
    before = model.translate(smid)
    model.remove_mapping(ATTACKER, smid, Propagation.TEARDOWN_ONLY)
    assert model.translate(smid) == before == Phys(0x300 << 12)


def test_removing_missing_mapping_is_noop():
    model = TwoLevelSimpleExtended(standard_map(), SparseMemory())
    model.remove_mapping(ATTACKER, 8 << 12, Propagation.EAGER)


# ---------------------------------------------------------------- pagetable base


def test_pagetable_base_install_entry_zero():
    mem = SparseMemory()
    model = PagetableBaseAsSmid(standard_map(), mem)
    model.install_mapping(ATTACKER, 0, 0x330)  # slot 0
    got = model.translate(model.l1_base, 0)
    # Entry 0 maps a 64 KB granule; page 0x330 sits at offset 0 inside it.
    assert got == Phys(0x330 << 12)
    # Manual walk oracle straight from memory bytes.
    valid, granule = decode_entry(mem.read_word(model.l1_base))
    assert valid and (granule << 16) == 0x330 << 12


def test_pagetable_base_attacker_fake_table():
    mem = SparseMemory()
    model = PagetableBaseAsSmid(standard_map(), mem)
    fake_base = UMEM1_RANGE[0]  # attacker writes a table into its own page
    target = KMEM_RANGE[0] >> 12
    mem.write_word(fake_base, encode_entry(target >> 4))
    dva = (target & 0xF) << 12
    assert model.translate(fake_base, dva) == Phys(target << 12)


def test_pagetable_base_unregistered_base_reads_raw_memory():
    mem = SparseMemory()
    model = PagetableBaseAsSmid(standard_map(), mem)
    # Nothing written: the walk sees a zero word, i.e. an invalid entry.
    assert model.translate(0x5000, 0) == Fault(FaultReason.NO_MAPPING)


def test_pagetable_base_deterministic_l1_base():
    m = standard_map()
    a = PagetableBaseAsSmid(m, SparseMemory())
    b = PagetableBaseAsSmid(m, SparseMemory())
    assert a.l1_base == b.l1_base == DMEM_RANGE[0]


def test_pagetable_base_no_scrub_survives_teardown():
    mem = SparseMemory()
    model = PagetableBaseAsSmid(standard_map(), mem)
    model.install_mapping(ATTACKER, 2, 0x331)
    model.teardown(ATTACKER, scrub=False)
    assert decode_entry(mem.read_word(model.l1_base + 2 * 8)) == (True, 0x331 >> 4)
    model.teardown(ATTACKER, scrub=True)
    assert mem.read_word(model.l1_base + 2 * 8) == 0


def test_pagetable_base_route_construction():
    mem = SparseMemory()
    model = PagetableBaseAsSmid(standard_map(), mem)
    target = HMEM_RANGE[0] >> 12
    route = model.construct_route_for_phys(ATTACKER, target)
    assert route is not None
    smid, dva = route
    assert model.translate(smid, dva) == Phys(target << 12)
    assert model.construct_smid_for_phys(ATTACKER, target) == smid


# ---------------------------------------------------------------- identity


def test_identity_inside_window():
    model = IdentitySmid(standard_map(), SparseMemory())
    addr = DMEM_RANGE[0] + 0x4321
    assert model.translate(addr) == Phys(addr)


def test_identity_outside_window_faults():
    model = IdentitySmid(standard_map(), SparseMemory())
    assert model.translate(HMEM_RANGE[0]) == Fault(FaultReason.OUT_OF_RANGE)


def test_identity_window_kinds_configurable():
    model = IdentitySmid(standard_map(), SparseMemory(), kinds=("AIMem",))
    assert model.translate(0x1000) == Phys(0x1000)
    assert model.translate(DMEM_RANGE[0]) == Fault(FaultReason.OUT_OF_RANGE)


def test_identity_construct_is_identity():
    model = IdentitySmid(standard_map(), SparseMemory())
    target = DMEM_RANGE[0] >> 12
    assert model.construct_smid_for_phys(ATTACKER, target) == DMEM_RANGE[0]
    assert model.construct_smid_for_phys(ATTACKER, KMEM_RANGE[0] >> 12) is None


# ---------------------------------------------------------------- per use


def test_per_use_wrong_context_faults():
    model = PerUsePagetables(standard_map(), SparseMemory())
    model.install_mapping(VICTIM, 2 << 12, 0x322)
    model.set_active(ATTACKER)
    assert model.translate(2 << 12) == Fault(FaultReason.NO_MAPPING)
    model.set_active(VICTIM)
    assert model.translate(2 << 12) == Phys(0x322 << 12)


def test_per_use_teardown_scrub_drops_table():
    model = PerUsePagetables(standard_map(), SparseMemory())
    model.install_mapping(ATTACKER, 1 << 12, 0x300)
    model.set_active(ATTACKER)
    model.teardown(ATTACKER, scrub=True)
    assert model.translate(1 << 12) == Fault(FaultReason.NO_MAPPING)


# ---------------------------------------------------------------- factory


def test_build_model_kinds():
    m, mem = standard_map(), standard_mem()
    assert isinstance(build_model("two_level", m, mem), TwoLevelSimpleExtended)
    assert isinstance(build_model("flat_mtlb_stlb", m, mem), FlatMapMtlbStlb)
    assert isinstance(build_model("pagetable_base", m, mem), PagetableBaseAsSmid)
    assert isinstance(build_model("identity", m, mem), IdentitySmid)
    assert isinstance(build_model("per_use", m, mem), PerUsePagetables)
    assert isinstance(build_model("message_passing", m, mem), MessagePassing)
    with pytest.raises(ConfigError):
        build_model("bogus", m, mem)


# ---------------------------------------------------------------- properties


@st.composite
def aligned_region_pair(draw):
    # Two disjoint page-aligned regions below 16 MB.
    a = draw(st.integers(0, 200)) * 0x1000
    asize = draw(st.integers(1, 64)) * 0x1000
    b = a + asize + draw(st.integers(0, 50)) * 0x1000
    bsize = draw(st.integers(1, 64)) * 0x1000
    return [Region(a, a + asize, DMEM), Region(b, b + bsize, AIRMEM)]


@settings(max_examples=50)
@given(aligned_region_pair(), st.data())
def test_flat_identity_property(regions, data):
    m = MemoryMap(regions)
    model = FlatMapMtlbStlb(m, SparseMemory())
    for r in regions:
        page = data.draw(st.integers(r.start >> 12, (r.end >> 12) - 1))
        assert model.translate(page << 12) == Phys(page << 12)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 500), st.integers(0, 0xFFF)), max_size=20))
def test_stale_entry_property(pairs):
    # Under teardown-only propagation, removal never changes translation.
    model = TwoLevelSimpleExtended(standard_map(), SparseMemory())
    for slot, page in pairs:
        smid = slot << 12
        model.install_mapping(ATTACKER, smid, page)
        before = model.translate(smid)
        model.remove_mapping(ATTACKER, smid, Propagation.TEARDOWN_ONLY)
        assert model.translate(smid) == before


def test_translate_is_deterministic():
    mem = SparseMemory()
    model = FlatMapMtlbStlb(standard_map(), mem)
    dva = model.alloc_dva()
    model.install_mapping(ATTACKER, dva, 0x310)
    assert model.translate(dva) == model.translate(dva)
