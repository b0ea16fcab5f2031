"""Kernel-driver simulation: SMID issuance, map/unmap lifecycle, inference.

The driver is the software side of the confused-deputy setup. Its policy
knobs (validation on map, unmap propagation, scrubbing, exclusivity,
entry tagging) are exactly the settings that make one device safe and
its neighbor exploitable, so they are explicit data rather than code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import Busy, ConfigError, PermissionDenied, SessionError
from .memory import (
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
from .translation import (
    Fault,
    Phys,
    Propagation,
    TranslationModel,
    build_model,
)


@dataclass(frozen=True)
class KdPolicy:
    validate_on_map: bool
    unmap_propagation: Propagation
    scrub_on_release: bool
    exclusive_access: bool
    tagged_entries: bool


@dataclass
class MappingRecord:
    """One installed page: what the KD used, what user space received."""

    slot: object
    smid: int
    dva: int
    page: int


@dataclass
class Session:
    pid: int
    owned_pages: set[int]
    issued: dict[int, int] = field(default_factory=dict)
    open: bool = True
    mappings: list[MappingRecord] = field(default_factory=list)


@dataclass(frozen=True)
class Ok:
    pass


OK = Ok()


@dataclass(frozen=True)
class InferenceRequest:
    """One accelerator job: read the input buffer, write the class scores.

    model_output None selects the identity model, which copies the input
    page verbatim; a word list writes those exact values instead.
    """

    input_smid: int
    output_smid: int
    model_output: list[int] | None = None
    input_dva: int = 0
    output_dva: int = 0

    def __post_init__(self):
        if self.model_output is not None and len(self.model_output) > 512:
            raise ConfigError("model output exceeds one page of 64-bit words")


class KernelDriver:
    """Owns the policy, the translation model, and all open sessions."""

    def __init__(self, policy: KdPolicy, model: TranslationModel,
                 mmap: MemoryMap, mem: SparseMemory):
        self.policy = policy
        self.model = model
        self.map = mmap
        self.mem = mem
        self.sessions: list[Session] = []

    def _open_count(self) -> int:
        return sum(1 for s in self.sessions if s.open)

    def open_session(self, pid: int) -> Session:
        if self.policy.exclusive_access and self._open_count():
            raise Busy("another session holds exclusive access")
        session = Session(pid=pid, owned_pages=set(self.map.pages_of("UMem", pid=pid)))
        self.sessions.append(session)
        return session

    def grant_page(self, session: Session, page: int) -> None:
        """Model an allocation handing the session one extra page."""
        session.owned_pages.add(page)

    def map_request(self, session: Session, pages: list[int],
                    requested_slot=None) -> int:
        self._require_open(session)
        if self.policy.validate_on_map:
            rogue = [p for p in pages if p not in session.owned_pages]
            if rogue:
                raise PermissionDenied("page %d is not owned by pid %d"
                                       % (rogue[0], session.pid))
        first_smid = None
        for i, page in enumerate(pages):
            want = None if requested_slot is None else self.model.slot_at(requested_slot, i)
            slot, smid = self.model.map_page(session.pid, page, requested_slot=want)
            _, dva = self.model.route_for_issued(smid, page)
            session.issued[smid] = page
            session.mappings.append(MappingRecord(slot, smid, dva, page))
            if first_smid is None:
                first_smid = smid
        return first_smid

    def unmap(self, session: Session, pages: list[int]) -> None:
        self._require_open(session)
        doomed = set(pages)
        for rec in session.mappings:
            if rec.page in doomed and rec.slot is not None:
                self.model.remove_mapping(session.pid, rec.slot,
                                          self.policy.unmap_propagation)
        session.owned_pages -= doomed
        session.mappings = [r for r in session.mappings if r.page not in doomed]
        session.issued = {s: p for s, p in session.issued.items() if p not in doomed}

    def teardown(self, session: Session) -> None:
        if not session.open:
            return
        self.model.teardown(session.pid, self.policy.scrub_on_release)
        session.mappings.clear()
        session.issued.clear()
        session.open = False

    def submit_inference(self, session: Session, req: InferenceRequest):
        self._require_open(session)
        if hasattr(self.model, "set_active"):
            self.model.set_active(session.pid)
        src = self.model.translate(req.input_smid, req.input_dva)
        if isinstance(src, Fault):
            return src
        dst = self.model.translate(req.output_smid, req.output_dva)
        if isinstance(dst, Fault):
            return dst
        if req.model_output is None:
            data = self.mem.read(src.addr, self.map.page_size)
            self.mem.write(dst.addr, data)
        else:
            self.mem.read_word(src.addr)  # the model consumes its input
            for i, word in enumerate(req.model_output):
                self.mem.write_word(dst.addr + i * SparseMemory.WORD, word)
        return OK

    def _require_open(self, session: Session) -> None:
        if not session.open:
            raise SessionError("session for pid %d is closed" % session.pid)


# --------------------------------------------------------------------------
# Per-device presets. Each bundles a translation kind with the policy knobs
# observed on that device, plus a probe scenario (who attacks whom, and
# which buffer the attacker may legitimately use).
# --------------------------------------------------------------------------


def default_map(page_shift: int = 12) -> MemoryMap:
    """Desk-scale board layout shared by the CLI and the probe presets."""
    return MemoryMap(
        [
            Region(0x0, 0x2_0000, AIMEM),        # device SRAM + MMIO
            Region(0x10_0000, 0x20_0000, DMEM),  # driver-reserved DMA heap
            Region(0x20_0000, 0x28_0000, AIRMEM),
            Region(0x28_0000, 0x2C_0000, HMEM),
            Region(0x2C_0000, 0x30_0000, KMEM),
            Region(0x30_0000, 0x32_0000, umem(1)),
            Region(0x32_0000, 0x34_0000, umem(2)),
        ],
        page_shift=page_shift,
    )


@dataclass
class ProbeContext:
    """Everything a probe needs: the board, the device, and the actors."""

    name: str
    map: MemoryMap
    mem: SparseMemory
    model: TranslationModel
    policy: KdPolicy
    driver: KernelDriver
    attacker_pid: int
    victim_pid: int
    attacker_buf: int  # page the attacker legitimately reads back


_PRESETS = {
    "google": ("two_level", KdPolicy(
        validate_on_map=True, unmap_propagation=Propagation.TEARDOWN_ONLY,
        scrub_on_release=True, exclusive_access=True, tagged_entries=True)),
    "nxp": ("flat_mtlb_stlb", KdPolicy(
        validate_on_map=True, unmap_propagation=Propagation.EAGER,
        scrub_on_release=True, exclusive_access=False, tagged_entries=False)),
    "hailo": ("pagetable_base", KdPolicy(
        validate_on_map=True, unmap_propagation=Propagation.TEARDOWN_ONLY,
        scrub_on_release=False, exclusive_access=False, tagged_entries=False)),
    "ti": ("identity", KdPolicy(
        validate_on_map=False, unmap_propagation=Propagation.EAGER,
        scrub_on_release=True, exclusive_access=False, tagged_entries=False)),
    "nvidia": ("per_use", KdPolicy(
        validate_on_map=True, unmap_propagation=Propagation.TEARDOWN_ONLY,
        scrub_on_release=False, exclusive_access=False, tagged_entries=True)),
    "aws": ("identity", KdPolicy(
        validate_on_map=False, unmap_propagation=Propagation.EAGER,
        scrub_on_release=True, exclusive_access=False, tagged_entries=False)),
    "rknpu": ("message_passing", KdPolicy(
        validate_on_map=True, unmap_propagation=Propagation.EAGER,
        scrub_on_release=True, exclusive_access=False, tagged_entries=True)),
}

PRESET_NAMES = tuple(sorted(_PRESETS))


def build_preset(name: str, mmap: MemoryMap | None = None,
                 attacker_pid: int = 1, victim_pid: int = 2) -> ProbeContext:
    spec = _PRESETS.get(name)
    if spec is None:
        raise ConfigError("unknown preset %r (expected one of %s)"
                          % (name, ", ".join(PRESET_NAMES)))
    kind, policy = spec
    if mmap is None:
        mmap = default_map()
    mem = SparseMemory(page_shift=mmap.page_shift)
    knobs = {}
    if name == "ti":
        knobs["kinds"] = ("DMem", "AIRMem")
    elif name == "aws":
        knobs["kinds"] = ("AIMem",)
    model = build_model(kind, mmap, mem, **knobs)
    driver = KernelDriver(policy, model, mmap, mem)
    attacker_buf = _attacker_buffer(name, mmap, attacker_pid)
    return ProbeContext(name, mmap, mem, model, policy, driver,
                        attacker_pid, victim_pid, attacker_buf)


def _attacker_buffer(name: str, mmap: MemoryMap, pid: int) -> int:
    # TI and AWS devices only address fixed windows, so the attacker's own
    # legitimate buffer must come from inside those windows.
    if name == "ti":
        return min(mmap.pages_of("AIRMem"))
    if name == "aws":
        return min(mmap.pages_of("AIMem")) + 16
    return min(mmap.pages_of("UMem", pid=pid))
