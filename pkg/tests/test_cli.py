"""CLI tests: subcommands, exit codes, report schema, sweep determinism."""

import json
import os

import pytest

from accelmem.cli import main
from accelmem.engine import Load, SynthParams, parse_trace, synth

SERIAL_TRACE = "P 0\n" + "L 0x5000\n" * 10

SYNTH_PARAMS = {
    "pipelines": 1,
    "ops_per_pipeline": 10,
    "unique_pages": 5,
    "mem_to_compute_ratio": 1.0,
    "pattern": "sequential",
}

REPORT_KEYS = {"config_echo", "seed", "baseline_ticks", "protected_ticks",
               "overhead_pct", "outcomes", "validations", "iotlb", "digest"}


def base_config(defense):
    return {
        "memory_map": {"preset": "default"},
        "translation": {"kind": "two_level"},
        "kd_policy": {
            "validate_on_map": True,
            "unmap_propagation": "teardown_only",
            "scrub_on_release": True,
            "exclusive_access": False,
            "tagged_entries": True,
        },
        "defense": defense,
        "engine": {"mem_lat_ticks": 100},
        "seed": 7,
    }


def write(path, text):
    path.write_text(text)
    return str(path)


def simulate(tmp_path, defense, trace=SERIAL_TRACE, extra=()):
    cfg = write(tmp_path / "config.json", json.dumps(base_config(defense)))
    trc = write(tmp_path / "run.trace", trace)
    out = tmp_path / "report.json"
    rc = main(["simulate", "--config", cfg, "--trace", trc,
               "--out", str(out), *extra])
    return rc, out


# -- simulate ----------------------------------------------------------------------


def test_simulate_writes_schema_stable_report(tmp_path):
    rc, out = simulate(tmp_path, {"kind": "validator", "latency_ticks": 1000})
    assert rc == 0
    report = json.loads(out.read_text())
    assert set(report) == REPORT_KEYS
    assert report["baseline_ticks"] == 1000
    assert report["protected_ticks"] == 2000
    assert report["overhead_pct"] == {"text": "100.00", "num": 100, "den": 1}
    assert report["outcomes"]["cold_miss"] == 1
    assert report["outcomes"]["cache_hit"] == 9
    assert report["validations"] == 1
    assert report["iotlb"] == {"hits": 0, "misses": 0}
    assert len(report["digest"]) == 16
    assert report["config_echo"]["engine"]["mem_lat_ticks"] == 100


def test_simulate_defense_none_is_identity(tmp_path):
    rc, out = simulate(tmp_path, {"kind": "none"})
    report = json.loads(out.read_text())
    assert rc == 0
    assert report["protected_ticks"] == report["baseline_ticks"]
    assert report["overhead_pct"]["text"] == "0.00"


def test_simulate_bad_trace_exits_3_and_writes_nothing(tmp_path, capsys):
    rc, out = simulate(tmp_path, {"kind": "none"}, trace="P 0\nL zz\n")
    assert rc == 3
    assert not out.exists()
    assert "line 2" in capsys.readouterr().err


def test_simulate_bad_config_exits_2(tmp_path, capsys):
    cfg_dict = base_config({"kind": "none"})
    del cfg_dict["engine"]
    cfg = write(tmp_path / "config.json", json.dumps(cfg_dict))
    trc = write(tmp_path / "run.trace", SERIAL_TRACE)
    out = tmp_path / "report.json"
    rc = main(["simulate", "--config", cfg, "--trace", trc, "--out", str(out)])
    assert rc == 2
    assert not out.exists()
    assert capsys.readouterr().err.strip()


def test_simulate_unknown_defense_exits_2(tmp_path):
    rc, out = simulate(tmp_path, {"kind": "moat"})
    assert rc == 2
    assert not out.exists()


def test_simulate_synth_flag(tmp_path):
    cfg = write(tmp_path / "config.json",
                json.dumps(base_config({"kind": "validator"})))
    out = tmp_path / "report.json"
    rc = main(["simulate", "--config", cfg, "--synth", json.dumps(SYNTH_PARAMS),
               "--out", str(out)])
    assert rc == 0
    assert json.loads(out.read_text())["validations"] == 5


# -- probe -------------------------------------------------------------------------


@pytest.mark.parametrize("preset,needle", [
    ("nxp", "A=full V=full"),
    ("rknpu", "no-CDA"),
    ("google", "A=none stale_only=true"),
])
def test_probe_prints_classification(tmp_path, capsys, preset, needle):
    out = tmp_path / "probe.json"
    rc = main(["probe", "--model", preset, "--out", str(out)])
    assert rc == 0
    assert needle in capsys.readouterr().out
    assert json.loads(out.read_text())["preset"] == preset


def test_probe_unknown_preset_exits_2(tmp_path, capsys):
    rc = main(["probe", "--model", "toaster", "--out", str(tmp_path / "x.json")])
    assert rc == 2
    assert not (tmp_path / "x.json").exists()


# -- synth -------------------------------------------------------------------------


def test_synth_emits_parseable_trace(tmp_path):
    out = tmp_path / "bench.trace"
    rc = main(["synth", "--params", json.dumps(SYNTH_PARAMS), "--seed", "3",
               "--out", str(out)])
    assert rc == 0
    parsed = parse_trace(out.read_text())
    wl = synth(SynthParams(**SYNTH_PARAMS), seed=3)
    assert parsed.pipelines == wl.pipelines
    assert parsed.declared_pages == wl.declared_pages

    again = tmp_path / "bench2.trace"
    main(["synth", "--params", json.dumps(SYNTH_PARAMS), "--seed", "3",
          "--out", str(again)])
    assert again.read_bytes() == out.read_bytes()


# -- sweep -------------------------------------------------------------------------


def sweep_spec(tmp_path):
    trace = write(tmp_path / "fixed.trace", SERIAL_TRACE)
    return {
        "tlb_sizes": [8, 16],
        "miss_lat_ns": [100, 1000],
        "mem_lat_ns": 100,
        "validator_latency_ns": 8367,
        "seed": 42,
        "workloads": [
            {"name": "synthetic", "synth": dict(SYNTH_PARAMS, unique_pages=4)},
            {"name": "fixed", "trace": trace},
        ],
    }


def run_sweep(tmp_path, outdir, extra=("--no-figures",)):
    spec = write(tmp_path / "sweep.json", json.dumps(sweep_spec(tmp_path)))
    rc = main(["sweep", "--spec", spec, "--out-dir", str(outdir), *extra])
    assert rc == 0
    return outdir


def test_sweep_layout_and_csv(tmp_path):
    outdir = run_sweep(tmp_path, tmp_path / "out")
    reports = sorted(p.name for p in outdir.glob("*.json"))
    assert len(reports) == 10  # 2 validator + 2*2*2 iommu points
    assert "synthetic_validator.json" in reports
    assert "fixed_iommu_s8_m100.json" in reports

    lines = (outdir / "summary.csv").read_text().splitlines()
    assert lines[0] == "workload,defense,tlb_size,miss_ns,latency_ns,validations,overhead_pct"
    rows = [line.split(",") for line in lines[1:]]
    assert len(rows) == 10
    assert rows == sorted(rows, key=lambda r: (r[0], r[1],
                                               int(r[2] or 0), int(r[3] or 0)))
    for row in rows:
        if row[1] == "validator":
            assert row[2] == "" and row[3] == "" and row[4] == "8367"
        else:
            assert row[1] == "iommu" and row[4] == ""


def test_sweep_runs_are_byte_identical(tmp_path):
    a = run_sweep(tmp_path, tmp_path / "a")
    b = run_sweep(tmp_path, tmp_path / "b")
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    for report in sorted(a.glob("*.json")):
        assert report.read_bytes() == (b / report.name).read_bytes()


def test_sweep_jobs_do_not_change_output(tmp_path):
    serial = run_sweep(tmp_path, tmp_path / "serial")
    threaded = run_sweep(tmp_path, tmp_path / "threaded",
                         extra=("--no-figures", "--jobs", "4"))
    assert ((serial / "summary.csv").read_bytes()
            == (threaded / "summary.csv").read_bytes())


def test_sweep_renders_figures_by_default(tmp_path):
    outdir = run_sweep(tmp_path, tmp_path / "fig", extra=())
    pngs = list((outdir / "figures").glob("*.png"))
    assert {p.name for p in pngs} == {"overhead_synthetic.png",
                                      "overhead_fixed.png"}
    assert all(p.stat().st_size > 0 for p in pngs)


def test_sweep_rejects_empty_axis(tmp_path, capsys):
    spec = sweep_spec(tmp_path)
    spec["tlb_sizes"] = []
    path = write(tmp_path / "sweep.json", json.dumps(spec))
    rc = main(["sweep", "--spec", path, "--out-dir", str(tmp_path / "out")])
    assert rc == 2
    assert not (tmp_path / "out" / "summary.csv").exists()


# -- derive-latency ------------------------------------------------------------------


def test_derive_latency_prints_exact_numbers(capsys):
    rc = main(["derive-latency", "--pagewalk-ns", "125", "--irq-ns", "4121"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "8367 ns" in out
    assert "8,367,000 ticks" in out
    assert "12.5" in out
