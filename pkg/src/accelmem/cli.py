"""Command-line surface: simulate, probe, synth, sweep, derive-latency.

Config and reports are JSON, sweep summaries are CSV.  Every artifact is
written atomically so failed runs never leave partial files behind.
"""

import argparse
import csv
import io
import json
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction

from .engine import (
    IommuDefense,
    KdCheckDefense,
    SimConfig,
    SynthParams,
    ValidatorDefense,
    format_pct,
    format_trace,
    overhead,
    parse_trace,
    run,
    synth,
)
from .errors import ConfigError, TraceError
from .iommu import IommuConfig
from .kd import KdPolicy, PRESET_NAMES, build_preset, default_map
from .memory import MapError, MemoryMap, Region, RegionKind, SparseMemory
from .probe import classify
from .translation import Propagation, build_model
from .validator import (
    ValidatorConfig,
    derive_validation_latency_ns,
    ns_to_cycles,
    ns_to_ticks,
)

DEFAULT_PAGEWALK_NS = 125
DEFAULT_IRQ_NS = 4121
DEFAULT_IOMMU_HIT_NS = 2

CONFIG_KEYS = frozenset(
    ("memory_map", "translation", "kd_policy", "defense", "engine", "seed"))
CSV_COLUMNS = ("workload", "defense", "tlb_size", "miss_ns", "latency_ns",
               "validations", "overhead_pct")

EXIT_CONFIG = 2
EXIT_TRACE = 3


# -- small IO helpers ---------------------------------------------------------------


def _read_text(path, what):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError("%s %s: %s" % (what, path, exc)) from exc


def _load_json(path, what):
    try:
        return json.loads(_read_text(path, what))
    except json.JSONDecodeError as exc:
        raise ConfigError("%s %s: %s" % (what, path, exc)) from exc


def _write_text_atomic(path, text):
    tmp = "%s.tmp" % path
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json_atomic(path, obj):
    _write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _num(value, what):
    if isinstance(value, bool) or not isinstance(value, int):
        if isinstance(value, str):
            try:
                return int(value, 0)
            except ValueError:
                pass
        raise ConfigError("%s must be an integer, got %r" % (what, value))
    return value


def _frac_str(value):
    """Exact decimal rendering when one exists, else the plain ratio."""
    frac = Fraction(value)
    digits = 0
    den = frac.denominator
    while den % 2 == 0:
        den //= 2
        digits += 1
    fives = 0
    while den % 5 == 0:
        den //= 5
        fives += 1
    if den != 1:
        return "%d/%d" % (frac.numerator, frac.denominator)
    digits = max(digits, fives)
    if digits == 0:
        return str(frac.numerator)
    scaled = abs(frac.numerator) * 10 ** digits // frac.denominator
    sign = "-" if frac.numerator < 0 else ""
    return "%s%d.%s" % (sign, scaled // 10 ** digits,
                        str(scaled % 10 ** digits).rjust(digits, "0"))


# -- config loading -----------------------------------------------------------------


def _build_map(section):
    if section is None or section.get("preset") == "default":
        return default_map()
    regions = section.get("regions")
    if not isinstance(regions, list) or not regions:
        raise ConfigError("memory_map needs preset=default or a regions list")
    built = []
    for entry in regions:
        kind = RegionKind(entry.get("kind", ""), entry.get("pid"))
        built.append(Region(start=_num(entry.get("start"), "region start"),
                            end=_num(entry.get("end"), "region end"),
                            kind=kind))
    return MemoryMap(built, page_shift=section.get("page_shift", 12))


def _build_policy(section):
    if not isinstance(section, dict):
        raise ConfigError("kd_policy must be an object")
    names = {"eager": Propagation.EAGER,
             "teardown_only": Propagation.TEARDOWN_ONLY}
    prop = section.get("unmap_propagation", "teardown_only")
    if prop not in names:
        raise ConfigError("unknown unmap_propagation: %r" % (prop,))
    return KdPolicy(
        validate_on_map=bool(section.get("validate_on_map", True)),
        unmap_propagation=names[prop],
        scrub_on_release=bool(section.get("scrub_on_release", True)),
        exclusive_access=bool(section.get("exclusive_access", False)),
        tagged_entries=bool(section.get("tagged_entries", True)),
    )


def _build_defense(section):
    if not isinstance(section, dict):
        raise ConfigError("defense must be an object")
    kind = section.get("kind", "none")
    if kind == "none":
        return None
    if kind == "validator":
        ticks = section.get("latency_ticks")
        if ticks is None:
            default_ns = derive_validation_latency_ns(
                DEFAULT_PAGEWALK_NS, DEFAULT_IRQ_NS)
            ticks = ns_to_ticks(_num(section.get("latency_ns", default_ns),
                                     "latency_ns"))
        return ValidatorDefense(ValidatorConfig(
            latency_ticks=_num(ticks, "latency_ticks")))
    if kind == "iommu":
        hit = section.get("hit_ticks")
        if hit is None:
            hit = ns_to_ticks(_num(section.get("hit_ns", DEFAULT_IOMMU_HIT_NS),
                                   "hit_ns"))
        miss = section.get("miss_ticks")
        if miss is None:
            miss = ns_to_ticks(_num(section.get("miss_ns", 1000), "miss_ns"))
        return IommuDefense(IommuConfig(
            tlb_size=_num(section.get("tlb_size", 8), "tlb_size"),
            hit_ticks=_num(hit, "hit_ticks"),
            miss_ticks=_num(miss, "miss_ticks")))
    if kind == "kd_check":
        ticks = section.get("latency_ticks")
        if ticks is None:
            ticks = ns_to_ticks(_num(section.get("latency_ns", 8367),
                                     "latency_ns"))
        return KdCheckDefense(latency_ticks=_num(ticks, "latency_ticks"))
    raise ConfigError("unknown defense kind: %r" % (kind,))


def _load_run_config(cfg):
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    missing = CONFIG_KEYS - cfg.keys()
    if missing:
        raise ConfigError("config missing sections: %s" % ", ".join(sorted(missing)))
    extra = cfg.keys() - CONFIG_KEYS
    if extra:
        raise ConfigError("config has unknown sections: %s" % ", ".join(sorted(extra)))

    mmap = _build_map(cfg["memory_map"])
    translation = cfg["translation"]
    if not isinstance(translation, dict) or "kind" not in translation:
        raise ConfigError("translation section needs a kind")
    knobs = {k: tuple(v) if isinstance(v, list) else v
             for k, v in translation.items() if k != "kind"}
    build_model(translation["kind"], mmap, SparseMemory(mmap.page_shift), **knobs)
    _build_policy(cfg["kd_policy"])

    engine = cfg["engine"]
    if not isinstance(engine, dict) or "mem_lat_ticks" not in engine:
        raise ConfigError("engine section needs mem_lat_ticks")
    sim_cfg = SimConfig(mem_lat=_num(engine["mem_lat_ticks"], "mem_lat_ticks"),
                        defense=_build_defense(cfg["defense"]))
    return sim_cfg, _num(cfg["seed"], "seed")


def _synth_params(text):
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("synth params: %s" % exc) from exc
    if not isinstance(raw, dict):
        raise ConfigError("synth params must be a JSON object")
    try:
        return SynthParams(**raw)
    except TypeError as exc:
        raise ConfigError("synth params: %s" % exc) from exc


def _report_dict(config_echo, seed, res):
    return {
        "config_echo": config_echo,
        "seed": seed,
        "baseline_ticks": res.baseline_ticks,
        "protected_ticks": res.protected_ticks,
        "overhead_pct": {
            "text": format_pct(res.overhead_pct),
            "num": res.overhead_pct.numerator,
            "den": res.overhead_pct.denominator,
        },
        "outcomes": dict(sorted(res.outcomes.items())),
        "validations": res.validations,
        "iotlb": {"hits": res.iotlb[0], "misses": res.iotlb[1]},
        "digest": res.digest,
    }


# -- subcommands --------------------------------------------------------------------


def cmd_simulate(args):
    cfg_dict = _load_json(args.config, "config")
    sim_cfg, seed = _load_run_config(cfg_dict)
    if (args.trace is None) == (args.synth is None):
        raise ConfigError("exactly one of --trace or --synth is required")
    if args.trace is not None:
        workload = parse_trace(_read_text(args.trace, "trace"))
    else:
        workload = synth(_synth_params(args.synth), seed)
    res = run(workload, sim_cfg)
    _write_json_atomic(args.out, _report_dict(cfg_dict, seed, res))
    print("baseline %d protected %d overhead %s%%"
          % (res.baseline_ticks, res.protected_ticks, format_pct(res.overhead_pct)))
    return 0


def cmd_probe(args):
    if args.model not in PRESET_NAMES:
        raise ConfigError("unknown preset %r (expected one of %s)"
                          % (args.model, ", ".join(PRESET_NAMES)))
    map_spec = _load_json(args.map, "memory map") if args.map else None

    def make_ctx():
        mmap = _build_map(map_spec) if map_spec is not None else None
        return build_preset(args.model, mmap=mmap)

    report = classify(make_ctx)
    print(report.summary_line())
    if args.out:
        _write_json_atomic(args.out, report.to_dict())
    return 0


def cmd_synth(args):
    workload = synth(_synth_params(args.params), args.seed)
    _write_text_atomic(args.out, format_trace(workload))
    return 0


def _load_sweep(spec, spec_dir):
    if not isinstance(spec, dict):
        raise ConfigError("sweep spec must be a JSON object")
    sizes = spec.get("tlb_sizes")
    misses = spec.get("miss_lat_ns")
    entries = spec.get("workloads")
    for name, axis in (("tlb_sizes", sizes), ("miss_lat_ns", misses),
                       ("workloads", entries)):
        if not isinstance(axis, list) or not axis:
            raise ConfigError("sweep spec needs a non-empty %s list" % name)
    seed = _num(spec.get("seed", 0), "seed")
    mem_lat = ns_to_ticks(_num(spec.get("mem_lat_ns", 100), "mem_lat_ns"))
    validator_ns = _num(
        spec.get("validator_latency_ns",
                 derive_validation_latency_ns(DEFAULT_PAGEWALK_NS, DEFAULT_IRQ_NS)),
        "validator_latency_ns")
    hit_ns = _num(spec.get("iommu_hit_ns", DEFAULT_IOMMU_HIT_NS), "iommu_hit_ns")

    workloads = []
    for entry in entries:
        if not isinstance(entry, dict) or "name" not in entry:
            raise ConfigError("each workload needs a name")
        name = entry["name"]
        if not re.fullmatch(r"[A-Za-z0-9_-]+", name):
            raise ConfigError("workload name %r is not filesystem-safe" % (name,))
        if ("synth" in entry) == ("trace" in entry):
            raise ConfigError("workload %r needs exactly one of synth or trace"
                              % name)
        if "synth" in entry:
            wl = synth(SynthParams(**entry["synth"]), seed)
        else:
            path = entry["trace"]
            if not os.path.isabs(path):
                path = os.path.join(spec_dir, path)
            wl = parse_trace(_read_text(path, "trace"))
        workloads.append((name, wl))

    points = []
    for name, wl in workloads:
        vd = ValidatorDefense(ValidatorConfig(ns_to_ticks(validator_ns)))
        points.append({"workload": name, "wl": wl, "defense": "validator",
                       "size": None, "miss": None, "latency_ns": validator_ns,
                       "cfg": SimConfig(mem_lat=mem_lat, defense=vd),
                       "file": "%s_validator.json" % name})
        for size in sizes:
            for miss in misses:
                defense = IommuDefense(IommuConfig(
                    tlb_size=_num(size, "tlb_size"),
                    hit_ticks=ns_to_ticks(hit_ns),
                    miss_ticks=ns_to_ticks(_num(miss, "miss_ns"))))
                points.append({"workload": name, "wl": wl, "defense": "iommu",
                               "size": size, "miss": miss, "latency_ns": None,
                               "cfg": SimConfig(mem_lat=mem_lat, defense=defense),
                               "file": "%s_iommu_s%d_m%d.json" % (name, size, miss)})
    return points, seed


def _render_figures(outdir, points, results):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    figdir = os.path.join(outdir, "figures")
    os.makedirs(figdir, exist_ok=True)
    names = sorted({p["workload"] for p in points})
    for name in names:
        fig, ax = plt.subplots(figsize=(6, 4))
        sizes = sorted({p["size"] for p in points
                        if p["workload"] == name and p["size"] is not None})
        for size in sizes:
            xs, ys = [], []
            for p, r in zip(points, results):
                if p["workload"] == name and p["size"] == size:
                    xs.append(p["miss"])
                    ys.append(float(r.overhead_pct))
            order = sorted(range(len(xs)), key=xs.__getitem__)
            ax.plot([xs[i] for i in order], [ys[i] for i in order],
                    marker="o", label="IOTLB size %d" % size)
        for p, r in zip(points, results):
            if p["workload"] == name and p["defense"] == "validator":
                ax.axhline(float(r.overhead_pct), linestyle="--", color="gray",
                           label="validator")
        ax.set_xlabel("IOTLB miss latency (ns)")
        ax.set_ylabel("overhead (%)")
        ax.set_title(name)
        ax.legend()
        fig.tight_layout()
        fig.savefig(os.path.join(figdir, "overhead_%s.png" % name))
        plt.close(fig)


def cmd_sweep(args):
    spec = _load_json(args.spec, "sweep spec")
    points, seed = _load_sweep(spec, os.path.dirname(os.path.abspath(args.spec)))
    os.makedirs(args.out_dir, exist_ok=True)

    jobs = max(1, args.jobs)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda p: run(p["wl"], p["cfg"]), points))
    else:
        results = [run(p["wl"], p["cfg"]) for p in points]

    rows = []
    for point, res in zip(points, results):
        echo = {"workload": point["workload"], "defense": point["defense"],
                "tlb_size": point["size"], "miss_ns": point["miss"],
                "latency_ns": point["latency_ns"],
                "mem_lat_ticks": point["cfg"].mem_lat}
        _write_json_atomic(os.path.join(args.out_dir, point["file"]),
                           _report_dict(echo, seed, res))
        rows.append((point["workload"], point["defense"],
                     point["size"], point["miss"], point["latency_ns"],
                     res.validations, format_pct(res.overhead_pct)))

    rows.sort(key=lambda r: (r[0], r[1], r[2] or 0, r[3] or 0))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(["" if v is None else v for v in row])
    _write_text_atomic(os.path.join(args.out_dir, "summary.csv"), buf.getvalue())

    if not args.no_figures:
        _render_figures(args.out_dir, points, results)
    return 0


def cmd_derive_latency(args):
    total_ns = derive_validation_latency_ns(args.pagewalk_ns, args.irq_ns)
    cycles = ns_to_cycles(args.pagewalk_ns, args.freq_mhz * 1_000_000)
    print("%d ns" % total_ns)
    print("{:,} ticks".format(ns_to_ticks(total_ns)))
    print("pagewalk %s cycles at %d MHz" % (_frac_str(cycles), args.freq_mhz))
    return 0


# -- entry point --------------------------------------------------------------------


def _parser():
    parser = argparse.ArgumentParser(
        prog="accelmem",
        description="Host/accelerator shared-memory simulator and CDA probe")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="replay a workload under a defense")
    sim.add_argument("--config", required=True, help="run config JSON")
    sim.add_argument("--trace", help="trace file to replay")
    sim.add_argument("--synth", help="inline synth params JSON")
    sim.add_argument("--out", required=True, help="report JSON path")
    sim.set_defaults(func=cmd_simulate)

    probe = sub.add_parser("probe", help="classify a preset's CDA exposure")
    probe.add_argument("--model", required=True,
                       help="preset name (%s)" % ", ".join(PRESET_NAMES))
    probe.add_argument("--map", help="memory map JSON (defaults to built-in)")
    probe.add_argument("--out", help="probe report JSON path")
    probe.set_defaults(func=cmd_probe)

    syn = sub.add_parser("synth", help="emit a trace file from synth params")
    syn.add_argument("--params", required=True, help="synth params JSON")
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--out", required=True, help="trace file path")
    syn.set_defaults(func=cmd_synth)

    sweep = sub.add_parser("sweep", help="sweep IOTLB sizes and miss latencies")
    sweep.add_argument("--spec", required=True, help="sweep spec JSON")
    sweep.add_argument("--out-dir", required=True)
    sweep.add_argument("--jobs", type=int, default=1)
    sweep.add_argument("--no-figures", action="store_true",
                       help="skip PNG rendering")
    sweep.set_defaults(func=cmd_sweep)

    derive = sub.add_parser("derive-latency",
                            help="print the validation round-trip cost")
    derive.add_argument("--pagewalk-ns", type=int, default=DEFAULT_PAGEWALK_NS)
    derive.add_argument("--irq-ns", type=int, default=DEFAULT_IRQ_NS)
    derive.add_argument("--freq-mhz", type=int, default=100)
    derive.set_defaults(func=cmd_derive_latency)
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except TraceError as exc:
        print("trace error: %s" % exc, file=sys.stderr)
        return EXIT_TRACE
    except (ConfigError, MapError) as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print("io error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
