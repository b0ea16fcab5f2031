"""Trace-driven tick simulator for accelerator pipelines under a defense.

A workload is a set of independent pipelines, each a list of operations.
The engine replays them against an optional defense mechanism (validator,
per-transaction IOMMU, or driver-side pre-issue checks) and reports exact
tick counts for the protected run next to a defense-free baseline.
"""

import dataclasses
import hashlib
import math
import random
from dataclasses import dataclass
from fractions import Fraction

from . import iommu as iommu_mod
from . import validator as validator_mod
from .errors import ConfigError, TraceError
from .iommu import IommuConfig, IotlbState
from .validator import Outcome, ValidatorConfig, ValidatorState

DMA_REGS = ("SRC", "DST")


# -- operations --------------------------------------------------------------------


@dataclass(frozen=True)
class Comp:
    """Pure compute for a fixed number of ticks."""

    duration: int

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigError("compute duration must be positive")


@dataclass(frozen=True)
class Load:
    addr: int

    def __post_init__(self):
        if self.addr < 0:
            raise ConfigError("address must be non-negative")


@dataclass(frozen=True)
class Store:
    addr: int

    def __post_init__(self):
        if self.addr < 0:
            raise ConfigError("address must be non-negative")


@dataclass(frozen=True)
class DmaCtl:
    """Descriptor write programming a DMA channel with a target address."""

    reg: str
    addr: int

    def __post_init__(self):
        if self.reg not in DMA_REGS:
            raise ConfigError("DMA descriptor register must be SRC or DST")
        if self.addr < 0:
            raise ConfigError("address must be non-negative")


@dataclass(frozen=True)
class DmaPio:
    """Control-register poke that carries no memory address."""

    reg: str


@dataclass(frozen=True)
class MsgSub:
    """Message submission carrying `count` buffer identifiers to the driver."""

    count: int

    def __post_init__(self):
        if self.count <= 0:
            raise ConfigError("message must carry at least one identifier")


# -- configuration ------------------------------------------------------------------


@dataclass(frozen=True)
class ValidatorDefense:
    cfg: ValidatorConfig


@dataclass(frozen=True)
class IommuDefense:
    cfg: IommuConfig


@dataclass(frozen=True)
class KdCheckDefense:
    """Driver checks each submitted identifier before the job may start."""

    latency_ticks: int

    def __post_init__(self):
        if self.latency_ticks <= 0:
            raise ConfigError("check latency must be positive")


@dataclass(frozen=True)
class SimConfig:
    mem_lat: int
    defense: object = None

    def __post_init__(self):
        if self.mem_lat < 0:
            raise ConfigError("memory latency must be non-negative")
        ok = (ValidatorDefense, IommuDefense, KdCheckDefense, type(None))
        if not isinstance(self.defense, ok):
            raise ConfigError("unknown defense: %r" % (self.defense,))


@dataclass
class Workload:
    pipelines: list
    pid: int = 1
    page_shift: int = 12
    declared_pages: frozenset = frozenset()


@dataclass(frozen=True)
class SimResult:
    baseline_ticks: int
    protected_ticks: int
    overhead_pct: Fraction
    outcomes: dict
    validations: int
    iotlb: tuple
    pipeline_ticks: tuple
    digest: str


# -- core loop ----------------------------------------------------------------------


def overhead(baseline_ticks, protected_ticks):
    """Slowdown of the protected run over the baseline, in exact percent."""
    if baseline_ticks <= 0:
        raise ConfigError("baseline must be positive to compute overhead")
    return Fraction(protected_ticks - baseline_ticks, baseline_ticks) * 100


def format_pct(value):
    """Render an exact percentage with two decimals, ties to even."""
    scaled = round(Fraction(value) * 100)
    sign = "-" if scaled < 0 else ""
    scaled = abs(scaled)
    return "%s%d.%02d" % (sign, scaled // 100, scaled % 100)


def _simulate(workload, mem_lat, defense, events=None):
    pid = workload.pid
    shift = workload.page_shift
    vstate = ValidatorState() if isinstance(defense, ValidatorDefense) else None
    istate = IotlbState() if isinstance(defense, IommuDefense) else None
    host_ready = 0
    validations = 0

    def mem_defer(page, now, access):
        nonlocal validations
        if vstate is not None:
            outcome, defer = validator_mod.charge(
                vstate, defense.cfg, pid, access, now)
            if outcome in (Outcome.COLD_MISS, Outcome.DMA_CTRL):
                validations += 1
            return defer
        if istate is not None:
            _, defer = iommu_mod.translate_charge(istate, defense.cfg, page, now)
            return defer
        return 0

    pipelines = workload.pipelines
    n = len(pipelines)
    clocks = [0] * n
    idx = [0] * n
    remaining = sum(len(p) for p in pipelines)
    while remaining:
        live = (j for j in range(n) if idx[j] < len(pipelines[j]))
        i = min(live, key=lambda j: (clocks[j], j))
        now = clocks[i]
        op = pipelines[i][idx[i]]
        if isinstance(op, Comp):
            cost = op.duration
        elif isinstance(op, (Load, Store)):
            page = op.addr >> shift
            access = (validator_mod.Load if isinstance(op, Load)
                      else validator_mod.Store)(page)
            cost = mem_lat + mem_defer(page, now, access)
        elif isinstance(op, DmaCtl):
            if vstate is not None:
                cost = mem_defer(None, now, validator_mod.DmaCtrlWrite(op.reg))
            else:
                cost = mem_defer(op.addr >> shift, now, None) if istate else 0
        elif isinstance(op, DmaPio):
            if vstate is not None:
                cost = mem_defer(None, now, validator_mod.DmaPio(op.reg))
            else:
                cost = 0
        elif isinstance(op, MsgSub):
            if isinstance(defense, KdCheckDefense):
                done = max(now, host_ready) + op.count * defense.latency_ticks
                host_ready = done
                validations += op.count
                cost = done - now
            else:
                cost = 0
        else:
            raise ConfigError("unknown operation: %r" % (op,))
        clocks[i] = now + cost
        if events is not None:
            events.append((i, idx[i], now, clocks[i]))
        idx[i] += 1
        remaining -= 1

    outcomes = {o.value: 0 for o in Outcome}
    if vstate is not None:
        for o in Outcome:
            outcomes[o.value] = vstate.counts[o]
    iotlb = (istate.hits, istate.misses) if istate is not None else (0, 0)
    runtime = max(clocks) if clocks else 0
    return runtime, tuple(clocks), outcomes, validations, iotlb


def simulate_events(workload, config):
    """Protected-pass issue/completion log: (pipeline, op_index, start, end)."""
    events = []
    _simulate(workload, config.mem_lat, config.defense, events=events)
    return events


def run(workload, config):
    protected, clocks, outcomes, validations, iotlb = _simulate(
        workload, config.mem_lat, config.defense)
    baseline, _, _, _, _ = _simulate(workload, config.mem_lat, None)
    pct = overhead(baseline, protected) if baseline > 0 else Fraction(0)
    digest_src = repr((baseline, protected, pct.numerator, pct.denominator,
                       sorted(outcomes.items()), validations, iotlb, clocks))
    digest = hashlib.sha256(digest_src.encode()).hexdigest()[:16]
    return SimResult(baseline_ticks=baseline, protected_ticks=protected,
                     overhead_pct=pct, outcomes=outcomes,
                     validations=validations, iotlb=iotlb,
                     pipeline_ticks=clocks, digest=digest)


# -- workload synthesis ---------------------------------------------------------------


PATTERNS = ("sequential", "strided", "random")


@dataclass(frozen=True)
class SynthParams:
    pipelines: int
    ops_per_pipeline: int
    unique_pages: int
    mem_to_compute_ratio: float
    pattern: str
    stride: int = 1
    dma_reprogram_every: int = None
    comp_ticks: int = 500
    page_shift: int = 12

    def __post_init__(self):
        if self.pipelines < 1 or self.ops_per_pipeline < 0:
            raise ConfigError("need at least one pipeline")
        if self.unique_pages < 1:
            raise ConfigError("need at least one page")
        if not 0.0 <= self.mem_to_compute_ratio <= 1.0:
            raise ConfigError("memory ratio must lie in [0, 1]")
        if self.pattern not in PATTERNS:
            raise ConfigError("unknown access pattern: %r" % (self.pattern,))
        if self.stride < 1:
            raise ConfigError("stride must be positive")
        if self.dma_reprogram_every is not None and self.dma_reprogram_every < 1:
            raise ConfigError("reprogram interval must be positive")
        if self.comp_ticks <= 0:
            raise ConfigError("compute ticks must be positive")

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _mem_slots(ops, ratio):
    """Which op slots are memory ops, spacing them evenly at the given ratio."""
    r = Fraction(ratio)
    return [math.floor((j + 1) * r) > math.floor(j * r) for j in range(ops)]


def _page_series(params, total_mem, rng):
    n = params.unique_pages
    if params.pattern == "random":
        series = rng.sample(range(n), n)
        series += [rng.randrange(n) for _ in range(total_mem - n)]
        return series
    stride = params.stride if params.pattern == "strided" else 1
    if math.gcd(stride, n) != 1:
        raise ConfigError("stride %d cannot cover %d pages" % (stride, n))
    return [(k * stride) % n for k in range(total_mem)]


def synth(params, seed):
    """Deterministic benchmark generator; same params and seed, same workload."""
    rng = random.Random(seed)
    slots = _mem_slots(params.ops_per_pipeline, params.mem_to_compute_ratio)
    total_mem = sum(slots) * params.pipelines
    if params.mem_to_compute_ratio > 0:
        if total_mem < params.unique_pages:
            raise ConfigError(
                "%d memory ops cannot cover %d distinct pages"
                % (total_mem, params.unique_pages))
        series = _page_series(params, total_mem, rng)
    else:
        series = []

    pipelines = []
    g = 0
    for _ in range(params.pipelines):
        ops = []
        for is_mem in slots:
            if not is_mem:
                ops.append(Comp(params.comp_ticks))
                continue
            addr = series[g] << params.page_shift
            ops.append(Load(addr) if g % 2 == 0 else Store(addr))
            g += 1
            every = params.dma_reprogram_every
            if every is not None and g % every == 0:
                ops.append(DmaCtl("SRC", addr))
                ops.append(DmaCtl("DST", addr))
        pipelines.append(ops)
    return Workload(pipelines=pipelines, pid=1, page_shift=params.page_shift,
                    declared_pages=frozenset(series))


# -- trace format ---------------------------------------------------------------------


def format_trace(workload):
    """Render a workload in the line-oriented trace format parse_trace reads."""
    lines = []
    for ident, ops in enumerate(workload.pipelines):
        lines.append("P %d" % ident)
        for op in ops:
            if isinstance(op, Comp):
                lines.append("C %d" % op.duration)
            elif isinstance(op, Load):
                lines.append("L 0x%x" % op.addr)
            elif isinstance(op, Store):
                lines.append("S 0x%x" % op.addr)
            elif isinstance(op, DmaCtl):
                lines.append("D %s 0x%x" % (op.reg, op.addr))
            elif isinstance(op, DmaPio):
                lines.append("Q %s" % op.reg)
            elif isinstance(op, MsgSub):
                lines.append("M %d" % op.count)
            else:
                raise ConfigError("unknown operation: %r" % (op,))
    return "\n".join(lines) + "\n"


def parse_trace(text):
    """Parse the line-oriented trace format into a workload.

    `P <id>` opens a pipeline; subsequent ops attach to it.  `C <ticks>`,
    `L <hex>`, `S <hex>`, `D SRC|DST <hex>`, `Q <reg>`, `M <count>`.
    `#` starts a comment.  Malformed lines raise TraceError with the line
    number.
    """
    pipelines = {}
    current = None
    pages = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind, args = parts[0], parts[1:]
        try:
            if kind == "P":
                (ident,) = args
                pid = int(ident)
                if pid in pipelines:
                    raise ValueError("duplicate pipeline id %d" % pid)
                current = pipelines[pid] = []
                continue
            if current is None:
                raise ValueError("operation before any P header")
            if kind == "C":
                (ticks,) = args
                op = Comp(int(ticks))
            elif kind == "L":
                (addr,) = args
                op = Load(int(addr, 16))
            elif kind == "S":
                (addr,) = args
                op = Store(int(addr, 16))
            elif kind == "D":
                reg, addr = args
                op = DmaCtl(reg, int(addr, 16))
            elif kind == "Q":
                (reg,) = args
                op = DmaPio(reg)
            elif kind == "M":
                (count,) = args
                op = MsgSub(int(count))
            else:
                raise ValueError("unknown opcode %r" % kind)
        except (ValueError, ConfigError) as exc:
            raise TraceError("line %d: %s" % (lineno, exc)) from exc
        current.append(op)
        if isinstance(op, (Load, Store, DmaCtl)):
            pages.add(op.addr >> 12)
    ordered = [pipelines[k] for k in sorted(pipelines)]
    return Workload(pipelines=ordered, pid=1, page_shift=12,
                    declared_pages=frozenset(pages))
