"""Command line front end.

Subcommands: run (decode a trace and report metrics), sweep (grid over
window/band/tau/seed, one CSV row per cell), calibrate (tau for a
false-accept target), sched-sim (worker-balancing comparison), gen (write
a synthetic trace directory).

Options resolve in three layers: built-in defaults, then a JSON --config
file, then explicit flags.  Exit codes: 0 success, 2 bad usage or config,
3 missing or malformed input data.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .engine import EngineConfig, compute_metrics, fidelity_efficiency, run_decode
from .matching import MATCH_POST_ROPE, MATCH_PRE_ROPE, calibrate_tau, chi2_cdf, threshold
from .report import (
    render_run_figure,
    render_schedsim_figure,
    render_sweep_figure,
    write_csv,
    write_json,
)
from .sched import baselines, gen_skewed_spans, optimal_makespan, plan_lpt
from .workload import PRESETS, SyntheticSpec, TraceError, gen_synthetic, read_trace, write_trace

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3

SWEEP_FIELDS = (
    "window",
    "band",
    "tau",
    "seed",
    "acceptance_rate",
    "skip_ratio",
    "kv_fraction",
    "err_mean",
    "fidelity_efficiency",
    "pass",
)

SCHED_FIELDS = (
    "sigma",
    "workers",
    "tile",
    "perfect",
    "lpt",
    "naive",
    "lpt_over_perfect",
    "naive_over_perfect",
)

_COMMON_DEFAULTS = dict(
    d=64,
    d_v=64,
    layers=1,
    q_heads=1,
    kv_heads=1,
    trace=None,
    synthetic="default",
    seq_len=2048,
    seed=0,
    rep_prob=None,
    noise_eps=None,
    rep_gap_max=None,
    rep_gap_min=None,
    key_corr=None,
    key_gain=None,
)

_ENGINE_DEFAULTS = dict(
    window=1024,
    band=256,
    tau=0.45,
    tau_per_layer=None,
    delta_max=None,
    match_space="pre",
    rope_base=10000.0,
    storage="f32",
    downdate="split",
    refresh_every=0,
    roi_gate=False,
    mass_check=False,
)

DEFAULTS = {
    "run": dict(
        _COMMON_DEFAULTS,
        **_ENGINE_DEFAULTS,
        oracle=False,
        oracle_mode="step",
        out=None,
        plots=False,
    ),
    "sweep": dict(
        _COMMON_DEFAULTS,
        **_ENGINE_DEFAULTS,
        windows="1024",
        bands="256",
        taus="0.45",
        seeds="0",
        err_gate=0.05,
        oracle_mode="batch",
        out=None,
        plots=False,
    ),
    "calibrate": dict(dim=128, alpha=None, out=None),
    "sched-sim": dict(
        workers=8,
        tile=64,
        spans=None,
        items=64,
        mean_span=1024.0,
        sigma=0.3,
        seeds=20,
        exact=False,
        out=None,
        plots=False,
    ),
    "gen": dict(_COMMON_DEFAULTS, out=None),
}


class UsageError(Exception):
    """Semantic argument/config problem; maps to exit code 2."""


def _add_dims(p):
    p.add_argument("--d", type=int, help="head dim (even)")
    p.add_argument("--d-v", type=int, help="value dim")
    p.add_argument("--layers", type=int)
    p.add_argument("--q-heads", type=int)
    p.add_argument("--kv-heads", type=int)


def _add_engine(p):
    p.add_argument("--window", type=int, help="ring capacity K per (layer, head)")
    p.add_argument("--band", type=int, help="recompute band width r")
    p.add_argument("--tau", type=float, help="match threshold knob in [0, 1)")
    p.add_argument("--tau-per-layer", help="comma list overriding --tau per layer")
    p.add_argument("--delta-max", type=int, help="reject hits further back than this")
    p.add_argument("--match-space", choices=("pre", "post"))
    p.add_argument("--rope-base", type=float)
    p.add_argument("--storage", choices=("f32", "f64"))
    p.add_argument("--downdate", choices=("split", "remove"))
    p.add_argument("--refresh-every", type=int, help="force a miss every N steps (0 off)")
    p.add_argument("--roi-gate", action="store_true", help="drop hits that fail the byte break-even")
    p.add_argument("--mass-check", action="store_true", help="record the band-mass bound per hit")


def _add_workload(p):
    p.add_argument("--trace", help="trace directory (overrides synthetic options)")
    p.add_argument(
        "--synthetic",
        "--preset",
        dest="synthetic",
        help="synthetic preset: " + ", ".join(sorted(PRESETS)),
    )
    p.add_argument("--seq-len", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--rep-prob", type=float)
    p.add_argument("--noise-eps", type=float)
    p.add_argument("--rep-gap-max", type=int)
    p.add_argument("--rep-gap-min", type=int)
    p.add_argument("--key-corr", type=float)
    p.add_argument("--key-gain", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnreuse",
        description="Decode-time attention reuse: run, measure, and plan.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True, metavar="command")

    def new(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file with option defaults")
        return p

    p = new("run", "decode one trace and print a metrics report")
    _add_dims(p)
    _add_engine(p)
    _add_workload(p)
    p.add_argument("--oracle", action="store_true", help="measure error against full attention")
    p.add_argument(
        "--oracle-mode",
        choices=("step", "batch"),
        help="per-step reference (exact) or one vectorized pass (fast)",
    )
    p.add_argument("--out", help="file to write the JSON report to")
    p.add_argument("--plots", action="store_true", help="render a figure next to --out")

    p = new("sweep", "grid over window/band/tau/seed, one CSV row per cell")
    _add_dims(p)
    _add_engine(p)
    _add_workload(p)
    p.add_argument("--windows", help="comma list of ring capacities K")
    p.add_argument("--bands", help="comma list of band widths r")
    p.add_argument("--taus", help="comma list of match thresholds")
    p.add_argument("--seeds", help="comma list of workload seeds")
    p.add_argument("--err-gate", type=float, help="pass threshold on err_mean")
    p.add_argument("--oracle-mode", choices=("step", "batch"))
    p.add_argument("--out", help="file to write the CSV grid to")
    p.add_argument("--plots", action="store_true")

    p = new("calibrate", "map a false-accept target to tau at a head dim")
    p.add_argument("--dim", type=int, help="head dim")
    p.add_argument("--alpha", action="append", type=float, help="false-accept target (repeatable)")
    p.add_argument("--out", help="file to write the CSV table to")

    p = new("sched-sim", "compare naive, longest-first, and ideal makespans")
    p.add_argument("--workers", type=int)
    p.add_argument("--tile", type=int, help="tokens per schedulable tile")
    p.add_argument("--spans", help="comma list of explicit token spans (single instance)")
    p.add_argument("--items", type=int, help="spans per generated instance")
    p.add_argument("--mean-span", type=float)
    p.add_argument("--sigma", type=float, help="lognormal skew of span lengths")
    p.add_argument("--seeds", type=int, help="number of generated instances")
    p.add_argument("--exact", action="store_true", help="add brute-force optimum columns (<= 12 items)")
    p.add_argument("--out", help="file to write the CSV to")
    p.add_argument("--plots", action="store_true")

    p = new("gen", "write a synthetic trace directory")
    _add_dims(p)
    _add_workload(p)
    p.add_argument("--out", required=True, help="trace directory to create")

    return parser


def _options(ns: argparse.Namespace) -> dict:
    """Layer defaults < --config file < explicit flags."""
    defaults = DEFAULTS[ns.cmd]
    explicit = {k: v for k, v in vars(ns).items() if k != "cmd"}
    opts = dict(defaults)
    cfg_path = explicit.pop("config", None)
    if cfg_path is not None:
        try:
            with open(cfg_path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {cfg_path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys for '{ns.cmd}': {', '.join(unknown)}")
        opts.update(loaded)
    opts.update(explicit)
    return opts


def _synth_spec(o: dict, seed: int | None = None) -> SyntheticSpec:
    name = o["synthetic"]
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    kw = dict(PRESETS[name])
    for f in ("rep_prob", "noise_eps", "rep_gap_max", "rep_gap_min", "key_corr", "key_gain"):
        if o[f] is not None:
            kw[f] = o[f]
    return SyntheticSpec(
        seq_len=o["seq_len"],
        d=o["d"],
        d_v=o["d_v"],
        n_layers=o["layers"],
        n_q_heads=o["q_heads"],
        n_kv_heads=o["kv_heads"],
        seed=o["seed"] if seed is None else seed,
        **kw,
    )


def _load_trace(o: dict, seed: int | None = None):
    if o["trace"]:
        return read_trace(o["trace"])
    return gen_synthetic(_synth_spec(o, seed))


def _tau_per_layer(raw):
    if raw is None:
        return None
    if isinstance(raw, str):
        raw = raw.split(",")
    return tuple(float(x) for x in raw)


def _engine_cfg(o: dict, trace, *, oracle: bool, window=None, band=None, tau=None) -> EngineConfig:
    space = {"pre": MATCH_PRE_ROPE, "post": MATCH_POST_ROPE}[o["match_space"]]
    return EngineConfig(
        d=trace.d,
        d_v=trace.d_v,
        n_layers=trace.n_layers,
        n_q_heads=trace.n_q_heads,
        n_kv_heads=trace.n_kv_heads,
        window=o["window"] if window is None else window,
        band=o["band"] if band is None else band,
        tau=o["tau"] if tau is None else tau,
        tau_per_layer=_tau_per_layer(o["tau_per_layer"]),
        delta_max=o["delta_max"],
        match_space=space,
        rope_base=o["rope_base"],
        storage=o["storage"],
        oracle_mode=oracle,
        roi_gate=o["roi_gate"],
        downdate_mode=o["downdate"],
        refresh_every=o["refresh_every"],
        mass_check=o["mass_check"],
    )


def _prep_out(o: dict) -> str | None:
    out = o.get("out")
    if o.get("plots") and not out:
        raise UsageError("--plots needs --out to know where the figure goes")
    if out:
        parent = os.path.dirname(os.path.abspath(out))
        os.makedirs(parent, exist_ok=True)
    return out


def _figure_path(out: str) -> str:
    return os.path.splitext(out)[0] + ".png"


def _parse_list(raw, cast, flag):
    vals = [x for x in (raw.split(",") if isinstance(raw, str) else list(raw))]
    if not vals:
        raise UsageError(f"{flag} is empty")
    try:
        return [cast(x) for x in vals]
    except (TypeError, ValueError):
        raise UsageError(f"{flag} has a non-numeric entry: {raw!r}") from None


def cmd_run(o: dict) -> int:
    out = _prep_out(o)
    trace = _load_trace(o)
    cfg = _engine_cfg(o, trace, oracle=o["oracle"])
    engine = run_decode(trace, cfg, per_step_oracle=(o["oracle_mode"] == "step"))
    report = compute_metrics(engine.metrics)
    print(json.dumps(report, indent=2))
    samples = engine.metrics.mass_bound_samples
    if samples:
        held = sum(1 for lhs, rhs in samples if lhs <= rhs + 1e-12)
        print(
            f"mass bound held on {held}/{len(samples)} reused steps ({held / len(samples):.1%})",
            file=sys.stderr,
        )
    if out:
        write_json(out, report)
        if o["plots"]:
            render_run_figure(engine.metrics, report, _figure_path(out))
    return EXIT_OK


def cmd_sweep(o: dict) -> int:
    out = _prep_out(o)
    windows = _parse_list(o["windows"], int, "--windows")
    bands = _parse_list(o["bands"], int, "--bands")
    taus = _parse_list(o["taus"], float, "--taus")
    seeds = _parse_list(o["seeds"], int, "--seeds")
    if o["trace"] and len(seeds) > 1:
        raise UsageError("a seed axis needs a synthetic workload; drop --trace or --seeds")
    err_gate = o["err_gate"]
    traces = {seed: _load_trace(o, seed) for seed in seeds}
    rows = []
    for window in windows:
        for band in bands:
            for tau in taus:
                for seed in seeds:
                    trace = traces[seed]
                    cfg = _engine_cfg(o, trace, oracle=True, window=window, band=band, tau=tau)
                    engine = run_decode(trace, cfg, per_step_oracle=(o["oracle_mode"] == "step"))
                    report = compute_metrics(engine.metrics)
                    rows.append(
                        {
                            "window": window,
                            "band": band,
                            "tau": tau,
                            "seed": seed,
                            "acceptance_rate": report["acceptance_rate"],
                            "skip_ratio": report["skip_ratio"],
                            "kv_fraction": report["kv_fraction"],
                            "err_mean": report["err_mean"],
                            "fidelity_efficiency": fidelity_efficiency(
                                report["err_mean"], report["kv_fraction"]
                            ),
                            "pass": "true" if report["err_mean"] <= err_gate else "false",
                        }
                    )
    _emit_csv(rows, SWEEP_FIELDS, out)
    if out and o["plots"]:
        x_key = max(
            (("window", windows), ("band", bands), ("tau", taus)),
            key=lambda kv: len(kv[1]),
        )[0]
        render_sweep_figure(rows, x_key, _figure_path(out))
    return EXIT_OK


def cmd_calibrate(o: dict) -> int:
    out = _prep_out(o)
    d = o["dim"]
    alphas = o["alpha"] if o["alpha"] else [0.01, 0.05, 0.1]
    rows = []
    for a in alphas:
        if not 0.0 < a < 1.0:
            raise UsageError(f"alpha must lie in (0, 1), got {a}")
        tau = calibrate_tau(d, a)
        t = threshold(d, tau)
        rows.append(
            {
                "alpha": a,
                "tau": tau,
                "threshold": t,
                "false_accept": chi2_cdf(d, t * t / 2.0),
            }
        )
    _emit_csv(rows, ("alpha", "tau", "threshold", "false_accept"), out)
    return EXIT_OK


def cmd_sched_sim(o: dict) -> int:
    out = _prep_out(o)
    workers, tile, sigma = o["workers"], o["tile"], o["sigma"]
    if o["spans"]:
        raw = o["spans"]
        instances = [[int(x) for x in (raw.split(",") if isinstance(raw, str) else raw)]]
    else:
        instances = [
            gen_skewed_spans(o["items"], o["mean_span"], sigma, seed) for seed in range(o["seeds"])
        ]
    fields = list(SCHED_FIELDS)
    if o["exact"]:
        fields += ["optimal", "lpt_over_optimal"]
    rows = []
    for spans in instances:
        plan = plan_lpt(spans, tile, workers)
        perfect, naive = baselines(spans, tile, workers)
        row = {
            "sigma": sigma,
            "workers": workers,
            "tile": tile,
            "perfect": perfect,
            "lpt": plan.makespan,
            "naive": naive,
            "lpt_over_perfect": plan.makespan / perfect if perfect else 1.0,
            "naive_over_perfect": naive / perfect if perfect else 1.0,
        }
        if o["exact"]:
            try:
                opt = optimal_makespan(spans, tile, workers)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            row["optimal"] = opt
            row["lpt_over_optimal"] = plan.makespan / opt if opt else 1.0
        rows.append(row)
    _emit_csv(rows, fields, out)
    print(
        "means: perfect={:.1f} lpt={:.1f} naive={:.1f}".format(
            float(np.mean([r["perfect"] for r in rows])),
            float(np.mean([r["lpt"] for r in rows])),
            float(np.mean([r["naive"] for r in rows])),
        ),
        file=sys.stderr,
    )
    if out and o["plots"]:
        render_schedsim_figure(rows, _figure_path(out))
    return EXIT_OK


def cmd_gen(o: dict) -> int:
    if o["trace"]:
        raise UsageError("gen creates traces; --trace makes no sense here")
    if not o["out"]:
        raise UsageError("gen needs --out, the trace directory to create")
    trace = gen_synthetic(_synth_spec(o))
    write_trace(trace, o["out"])
    print(json.dumps({"out": o["out"], "seq_len": trace.seq_len, "d": trace.d}))
    return EXIT_OK


def _emit_csv(rows, fields, out):
    writer = csv.DictWriter(sys.stdout, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fields})
    if out:
        write_csv(out, rows, fields)


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "calibrate": cmd_calibrate,
    "sched-sim": cmd_sched_sim,
    "gen": cmd_gen,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        opts = _options(ns)
        return COMMANDS[ns.cmd](opts)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
