"""Confused-deputy probes and the three-axis capability classification.

Each probe stages an attack end to end: fill a victim page with a sentinel,
construct (or replay) an identifier for it, submit an inference, and judge
the outcome from memory contents alone. The classification then combines
probe evidence with a brute-force reachability oracle, so every claimed
capability is demonstrated, not inferred.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .errors import ConfigError, PermissionDenied
from .kd import InferenceRequest, ProbeContext, Session
from .memory import (
    RESTRICTED_KIND_NAMES,
    SentinelResult,
    check_sentinel,
    fill_sentinel,
)
from .translation import (
    Fault,
    NotZeroCopyError,
    OutOfRangeError,
    Phys,
    encode_entry,
)

SENTINEL_PATTERN = 0x6B


class Status(enum.Enum):
    CONFIRMED = "confirmed"
    BLOCKED = "blocked"
    FAULTED = "faulted"


class StaleVerdict(enum.Enum):
    VULNERABLE = "vulnerable"
    SAFE = "safe"


class AddrLevel(enum.Enum):
    FULL = "full"
    LIMITED = "limited"
    NONE = "none"


class ValueControl(enum.Enum):
    FULL = "full"
    LIMITED = "limited"
    NONE = "none"


@dataclass(frozen=True)
class AddrControl:
    level: AddrLevel
    kinds: frozenset = frozenset()

    def __post_init__(self):
        if self.level is AddrLevel.LIMITED:
            if not self.kinds or not self.kinds < RESTRICTED_KIND_NAMES:
                raise ConfigError("limited address control needs a proper, "
                                  "non-empty subset of region kinds")
        elif self.kinds:
            raise ConfigError("kinds only accompany limited address control")


@dataclass(frozen=True)
class CdaClass:
    read: bool
    write: bool
    addr: AddrControl
    value: ValueControl | None
    stale_only: bool

    def __post_init__(self):
        if (self.value is not None) != self.write:
            raise ConfigError("value control is defined exactly when the "
                              "attacker can write")
        if self.stale_only and self.addr.level is not AddrLevel.NONE:
            raise ConfigError("stale-only capability implies no address control")


@dataclass(frozen=True)
class ProbeResult:
    probe: str
    victim_page: int | None
    status: Status
    words: tuple = ()
    fault: object = None


@dataclass(frozen=True)
class Evidence:
    probe: str
    victim_page: int | None
    result: str
    words: tuple


@dataclass
class ProbeReport:
    cda: CdaClass
    evidence: list[Evidence]
    preset: str = ""

    def to_dict(self) -> dict:
        c = self.cda
        return {
            "preset": self.preset,
            "class": {
                "read": c.read,
                "write": c.write,
                "addr": {
                    "level": c.addr.level.value,
                    "kinds": sorted(c.addr.kinds),
                },
                "value": None if c.value is None else c.value.value,
                "stale_only": c.stale_only,
            },
            "evidence": [
                {
                    "probe": e.probe,
                    "victim_page": e.victim_page,
                    "result": e.result,
                    "words": list(e.words),
                }
                for e in self.evidence
            ],
        }

    def summary_line(self) -> str:
        c = self.cda
        if not (c.read or c.write):
            return "no-CDA"
        parts = []
        if c.read:
            parts.append("R")
        if c.write:
            parts.append("W")
        if c.addr.level is AddrLevel.LIMITED:
            parts.append("A=limited:" + "+".join(sorted(c.addr.kinds)))
        else:
            parts.append("A=" + c.addr.level.value)
        # The compact line shows value control only alongside address
        # control; stale-only rows carry it in the JSON report instead.
        if c.value is not None and c.addr.level is not AddrLevel.NONE:
            parts.append("V=" + c.value.value)
        parts.append("stale_only=" + ("true" if c.stale_only else "false"))
        return " ".join(parts)


@dataclass
class Harness:
    """One prepared attacker: an open session plus a mapped I/O buffer."""

    ctx: ProbeContext
    session: Session
    input_smid: int | None
    input_dva: int
    spares: list[int] = field(default_factory=list)


def prepare(ctx: ProbeContext) -> Harness:
    driver = ctx.driver
    session = driver.open_session(ctx.attacker_pid)
    if ctx.attacker_buf not in session.owned_pages:
        # Windowed designs allocate the attacker's buffers inside the window.
        for p in range(ctx.attacker_buf, ctx.attacker_buf + 4):
            driver.grant_page(session, p)
    input_smid = input_dva = None
    try:
        smid = driver.map_request(session, [ctx.attacker_buf])
        input_smid, input_dva = ctx.model.route_for_issued(smid, ctx.attacker_buf)
    except (NotZeroCopyError, OutOfRangeError):
        pass
    spares = [p for p in sorted(session.owned_pages - {ctx.attacker_buf})
              if _mappable(ctx, p)]
    _background_client(ctx)
    return Harness(ctx, session, input_smid, input_dva, spares)


def _mappable(ctx: ProbeContext, page: int) -> bool:
    if ctx.model.kind == "identity":
        return isinstance(ctx.model.translate(page << ctx.map.page_shift), Phys)
    return True


def _background_client(ctx: ProbeContext) -> None:
    """A second, honest client maps one of its pages where designs allow."""
    if ctx.policy.exclusive_access:
        return
    if ctx.model.kind in ("identity", "message_passing"):
        return
    pages = sorted(ctx.map.pages_of("UMem", pid=ctx.victim_pid))
    if not pages:
        return
    other = ctx.driver.open_session(ctx.victim_pid)
    try:
        ctx.driver.map_request(other, [pages[0]])
    except (PermissionDenied, OutOfRangeError, NotZeroCopyError):
        pass


def _require_restricted(h: Harness, victim: int) -> None:
    ctx = h.ctx
    if victim in h.session.owned_pages or victim == ctx.attacker_buf:
        raise ConfigError("victim page %d is attacker-owned" % victim)
    kind = ctx.map.classify(victim << ctx.map.page_shift)
    if victim in ctx.map.restricted_for(ctx.attacker_pid):
        return
    if kind.name == "AIMem":
        return  # another client's device-internal buffer
    raise ConfigError("victim page %d is not restricted for the attacker" % victim)


def _stale_route(h: Harness):
    """Map a spare owned page, record its route, free the page."""
    ctx = h.ctx
    if not h.spares:
        return None
    page = h.spares.pop(0)
    try:
        smid = ctx.driver.map_request(h.session, [page])
    except (NotZeroCopyError, OutOfRangeError, PermissionDenied):
        return None
    smid, dva = ctx.model.route_for_issued(smid, page)
    ctx.driver.unmap(h.session, [page])
    return page, smid, dva


def _escalated_route(h: Harness, victim: int):
    """Forge a second-level entry through the flat window, then use it.

    Self-mapped tables sit inside the flat window, so one inference can
    rewrite the entry behind the attacker's own device address and point
    it anywhere.
    """
    ctx = h.ctx
    model = ctx.model
    if model.kind != "flat_mtlb_stlb" or h.input_smid is None or not h.spares:
        return None
    page = h.spares.pop(0)
    try:
        dva = ctx.driver.map_request(h.session, [page])
    except (NotZeroCopyError, OutOfRangeError, PermissionDenied):
        return None
    entry_addr = model.stlb_entry_addr(dva)
    if entry_addr is None:
        return None
    res = ctx.driver.submit_inference(h.session, InferenceRequest(
        h.input_smid, entry_addr, model_output=[encode_entry(victim)],
        input_dva=h.input_dva))
    if isinstance(res, Fault):
        return None
    return dva, 0


def probe_write(h: Harness, victim: int | None = None, route: str = "direct",
                model_output: tuple = (0x6121,), probe_name: str | None = None
                ) -> ProbeResult:
    ctx = h.ctx
    if route == "direct":
        name = probe_name or "write-direct"
        if victim is None:
            raise ConfigError("direct write probe needs a victim page")
        _require_restricted(h, victim)
        out_route = ctx.model.construct_route_for_phys(ctx.attacker_pid, victim)
        if out_route is None:
            out_route = _escalated_route(h, victim)
        if out_route is None or h.input_smid is None:
            return ProbeResult(name, victim, Status.BLOCKED)
        out_smid, out_dva = out_route
    else:
        name = probe_name or "write-stale"
        got = _stale_route(h)
        if got is None:
            return ProbeResult(name, None, Status.BLOCKED)
        victim, out_smid, out_dva = got
    sentinel = fill_sentinel(ctx.mem, victim, pattern=SENTINEL_PATTERN)
    req = InferenceRequest(h.input_smid, out_smid, model_output=list(model_output),
                           input_dva=h.input_dva, output_dva=out_dva)
    res = ctx.driver.submit_inference(h.session, req)
    if isinstance(res, Fault):
        return ProbeResult(name, victim, Status.FAULTED, fault=res.reason)
    if check_sentinel(ctx.mem, sentinel) is SentinelResult.INTACT:
        return ProbeResult(name, victim, Status.BLOCKED)
    base = victim << ctx.map.page_shift
    words = tuple(ctx.mem.read_word(base + 8 * i) for i in range(len(model_output)))
    return ProbeResult(name, victim, Status.CONFIRMED, words=words)


def probe_read(h: Harness, victim: int | None = None, route: str = "direct",
               probe_name: str | None = None) -> ProbeResult:
    ctx = h.ctx
    shift = ctx.map.page_shift
    if route == "direct":
        name = probe_name or "read-direct"
        if victim is None:
            raise ConfigError("direct read probe needs a victim page")
        _require_restricted(h, victim)
        in_route = ctx.model.construct_route_for_phys(ctx.attacker_pid, victim)
        if in_route is None:
            in_route = _escalated_route(h, victim)
        if in_route is None or h.input_smid is None:
            return ProbeResult(name, victim, Status.BLOCKED)
        in_smid, in_dva = in_route
    else:
        name = probe_name or "read-stale"
        got = _stale_route(h)
        if got is None or h.input_smid is None:
            return ProbeResult(name, None, Status.BLOCKED)
        victim, in_smid, in_dva = got
    secret = ctx.mem.read(victim << shift, ctx.map.page_size)
    if not any(secret):
        # Untouched victim: plant recognizable data so an all-zero match
        # cannot pass as a leak.
        _plant_secret(ctx, victim)
        secret = ctx.mem.read(victim << shift, ctx.map.page_size)
    req = InferenceRequest(in_smid, h.input_smid, model_output=None,
                           input_dva=in_dva, output_dva=h.input_dva)
    res = ctx.driver.submit_inference(h.session, req)
    if isinstance(res, Fault):
        return ProbeResult(name, victim, Status.FAULTED, fault=res.reason)
    leaked = ctx.mem.read(ctx.attacker_buf << shift, ctx.map.page_size)
    if leaked != secret:
        return ProbeResult(name, victim, Status.BLOCKED)
    words = tuple(int.from_bytes(leaked[8 * i:8 * i + 8], "little") for i in range(4))
    return ProbeResult(name, victim, Status.CONFIRMED, words=words)


def _plant_secret(ctx: ProbeContext, page: int) -> None:
    base = page << ctx.map.page_shift
    for i in range(64):
        ctx.mem.write_word(base + 8 * i, (0x5EC0_0000 | (page << 8) | i))


def probe_stale(h: Harness) -> StaleVerdict:
    res = probe_write(h, route="stale", probe_name="stale-reuse")
    if res.status is Status.CONFIRMED:
        return StaleVerdict.VULNERABLE
    return StaleVerdict.SAFE


@dataclass(frozen=True)
class EscalationResult:
    victim_page: int
    with_forge: SentinelResult
    without_forge: SentinelResult


def probe_table_escalation(make_ctx) -> EscalationResult:
    """Two-step attack on self-mapped tables: forge an entry, then use it."""
    victim, altered = _escalate(prepare(make_ctx()), forge=True)
    _, control = _escalate(prepare(make_ctx()), forge=False)
    return EscalationResult(victim, altered, control)


def _escalate(h: Harness, forge: bool):
    ctx = h.ctx
    model = ctx.model
    if model.kind != "flat_mtlb_stlb":
        raise ConfigError("the escalation probe targets the flat-map design")
    kmem = ctx.map.pages_of("KMem")
    if not kmem:
        raise ConfigError("escalation needs a kernel region to aim at")
    victim = min(kmem)
    hijack_page = h.spares.pop(0)
    dva = ctx.driver.map_request(h.session, [hijack_page])
    entry_addr = model.stlb_entry_addr(dva)
    sentinel = fill_sentinel(ctx.mem, victim, pattern=SENTINEL_PATTERN)
    if forge:
        # Step 1: the table lives inside the flat window, so an inference
        # can overwrite this mapping's own entry word.
        ctx.driver.submit_inference(h.session, InferenceRequest(
            h.input_smid, entry_addr, model_output=[encode_entry(victim)],
            input_dva=h.input_dva))
    # Step 2: write through the (possibly redirected) device address.
    ctx.driver.submit_inference(h.session, InferenceRequest(
        h.input_smid, dva, model_output=[0x0BAD_F00D], input_dva=h.input_dva))
    return victim, check_sentinel(ctx.mem, sentinel)


# --------------------------------------------------------------------------
# Reachability oracle and the classification built on it.
# --------------------------------------------------------------------------


def oracle_reachable(h: Harness) -> set[int]:
    """Pages the attacker can reach right now, stale routes excluded.

    Enumerates the current table state per design, then applies a single
    forge step: once any in-memory table page is reachable, everything is.
    """
    ctx = h.ctx
    model, mmap, policy = ctx.model, ctx.map, ctx.policy
    pid = ctx.attacker_pid
    all_pages = set(mmap.all_pages())
    kind = model.kind

    if kind == "message_passing":
        return set()
    if kind == "identity":
        shift = mmap.page_shift
        return {p for p in all_pages
                if isinstance(model.translate(p << shift), Phys)}
    if kind == "two_level":
        return {page for _, page, owner in model.iter_entries()
                if not policy.tagged_entries or owner == pid}
    if kind == "per_use":
        return {page for _, page in model.iter_entries(pid)}
    if kind == "flat_mtlb_stlb":
        shift = mmap.page_shift
        pages = {p for p in all_pages
                 if isinstance(model.translate(p << shift), Phys)}
        for _, page, owner in model.installed_entries():
            if policy.tagged_entries and owner != pid:
                continue
            pages.add(page)
        if pages & model.table_pages():
            return all_pages
        return pages

    assert kind == "pagetable_base"
    if mmap.pages_of("UMem", pid=pid):
        return all_pages  # a forged table in any owned page reaches everything
    span = 1 << (model.granule_shift - mmap.page_shift)
    pages: set[int] = set()
    for _, granule, owner in model.iter_entries():
        if policy.tagged_entries and owner != pid:
            continue
        start = granule * span
        pages.update(p for p in range(start, start + span) if p in all_pages)
    if pages & model.table_pages():
        return all_pages
    return pages


def _addr_axis(mmap, reach: set[int]) -> AddrControl:
    smem = mmap.smem_pages()
    if smem and smem <= reach:
        return AddrControl(AddrLevel.FULL)
    covered = set()
    for name in sorted(RESTRICTED_KIND_NAMES):
        pages = mmap.pages_of(name)
        if pages and pages <= reach:
            covered.add(name)
    if covered:
        return AddrControl(AddrLevel.LIMITED, frozenset(covered))
    return AddrControl(AddrLevel.NONE)


def _pick_victim(h: Harness, reach: set[int]) -> int | None:
    ctx = h.ctx
    owned = set(h.session.owned_pages) | {ctx.attacker_buf}
    tables = ctx.model.table_pages()
    candidates = sorted(reach - owned)
    for p in candidates:
        if ctx.map.classify(p << ctx.map.page_shift).name == "KMem":
            return p
    for p in candidates:
        if ctx.map.classify(p << ctx.map.page_shift).name == "Unmapped":
            continue
        if p in tables:
            continue  # do not saw off the branch the walk sits on
        return p
    return None


def classify(make_ctx) -> ProbeReport:
    """Run the full checking procedure against a fresh context."""
    h = prepare(make_ctx())
    reach = oracle_reachable(h)
    addr = _addr_axis(h.ctx.map, reach)

    route = "direct" if addr.level is not AddrLevel.NONE else "stale"
    victim = _pick_victim(h, reach) if route == "direct" else None
    if route == "direct" and victim is None:
        route, addr = "stale", AddrControl(AddrLevel.NONE)

    w1 = probe_write(h, victim, route, model_output=(0x1111,))
    w2 = probe_write(h, victim, route, model_output=(0x2222,))
    r1 = probe_read(h, victim, route)
    write = w1.status is Status.CONFIRMED and w2.status is Status.CONFIRMED
    read = r1.status is Status.CONFIRMED

    value = None
    if write:
        controlled = w1.words == (0x1111,) and w2.words == (0x2222,)
        value = ValueControl.FULL if controlled else ValueControl.LIMITED
    stale_only = addr.level is AddrLevel.NONE and (read or write)

    evidence = [Evidence(r.probe, r.victim_page, r.status.name, r.words)
                for r in (w1, w2, r1)]
    cda = CdaClass(read=read, write=write, addr=addr, value=value,
                   stale_only=stale_only)
    return ProbeReport(cda, evidence, preset=h.ctx.name)
