"""``guikv`` command-line front end.

Exit codes: 0 success, 2 usage, 3 unreadable input, 4 invalid values.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    LayerBudgetPlan,
    plan_select,
    pyramidkv_budgets,
    recency_select,
    uniform_budgets,
    vlcache_budgets,
)
from .cache_model import CompressionConfig, KeepSet, LayerTrace, build_layout
from .flops import CFG_STAR, ModelConfig, decode_flops_per_token, flops_report
from .numerics import budget_count
from .pixel_saliency import METHODS as SALIENCY_METHODS
from .pixel_saliency import ImageFormatError, compute_saliency, read_pnm, saliency_to_scores
from .scoring import Method, _map_ordered, compress_prompt, default_workers
from .sparsity import layer_sparsity_profile
from .traceio import TraceFormatError, read_trace, write_trace
from .workload import TrajectoryParams, derive_probes, gen_trajectory, reconstruction_error

KEEPSET_SCHEMA = "guikv.keepset/1"
SCORES_SCHEMA = "guikv.scores/1"
SWEEP_SCHEMA = "guikv.sweep/1"
RUN_SCHEMA = "guikv.run/1"

SELECTORS = ("gui-kv", "spatial-only", "temporal-only", "attention-only", "snapkv",
             "pyramidkv", "vl-cache", "recency")
_SCORING = {"gui-kv": Method.GUI_KV, "spatial-only": Method.SPATIAL_ONLY,
            "temporal-only": Method.TEMPORAL_ONLY, "attention-only": Method.ATTENTION_ONLY,
            "snapkv": Method.ATTENTION_ONLY}


class ValidationError(Exception):
    def __init__(self, flag: str, message: str):
        super().__init__(f"{flag}: {message}")
        self.flag = flag


class InputError(Exception):
    pass


# -- helpers -------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _dump_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _write_text(text: str, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _sha256(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_trace(path: str):
    try:
        return read_trace(path)
    except TraceFormatError as exc:
        raise InputError(f"{path}: {type(exc).__name__}: {exc}") from exc
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from exc


def _unit_interval(flag: str, value: float, open_low: bool = False) -> None:
    lo_ok = value > 0 if open_low else value >= 0
    if not (lo_ok and value <= 1):
        raise ValidationError(flag, f"must be in {'(0' if open_low else '[0'}, 1], got {value}")


def _restrict_omega(layout, traces, omega: int | None):
    """Use only the last ``omega`` observation queries of the trace."""
    if omega is None or omega == layout.omega:
        return layout, traces
    if not 1 <= omega <= layout.omega:
        raise ValidationError("--omega", f"must be between 1 and the trace window {layout.omega}")
    new_layout = build_layout(layout.segments, omega)
    new_traces = [
        LayerTrace(layer=t.layer, keys=t.keys, obs_queries=t.obs_queries[:, -omega:],
                   hidden_norms=t.hidden_norms, group=t.group, values=t.values)
        for t in traces
    ]
    return new_layout, new_traces


def _config(args, gamma: float, rank: int, omega: int) -> CompressionConfig:
    flags = {"budget": "--budget", "alpha": "--alpha", "tau": "--tau", "rank": "--rank",
             "omega": "--omega", "pool kernel": "--pool-kernel"}
    pool = None if args.pool_kernel == 0 else args.pool_kernel
    try:
        return CompressionConfig(gamma=gamma, alpha=args.alpha, tau=args.tau, rank_r=rank,
                                 omega=omega, pool_kernel=pool)
    except ValueError as exc:
        msg = str(exc)
        flag = next((f for key, f in flags.items() if msg.startswith(key)), "--budget")
        raise ValidationError(flag, msg) from exc


def _budget_plan(method: str, traces, layout, gamma: float, args) -> LayerBudgetPlan:
    n, layers = layout.n, len(traces)
    base = budget_count(gamma, n)
    if method == "pyramidkv":
        if layers < 2 or base < layout.omega:
            return dataclasses.replace(uniform_budgets(layers, n, gamma), fallback=True)
        return pyramidkv_budgets(layers, n, gamma, beta=args.beta, omega=layout.omega)
    profile = layer_sparsity_profile(traces, layout, args.p)
    if base < layout.omega:
        return dataclasses.replace(uniform_budgets(layers, n, gamma), fallback=True)
    return vlcache_budgets(profile.layer_mean, layers, n, gamma, omega=layout.omega)


def _frame_signals(args, layout):
    """Pixel saliency per frame step from ``--frame-image STEP=PATH`` flags."""
    entries = getattr(args, "frame_image", None) or []
    if not entries:
        return None
    frames = {s.step: s for s in layout.visual_segments}
    signals = {}
    for entry in entries:
        step_text, sep, path = entry.partition("=")
        if not sep or not step_text.strip().isdigit():
            raise ValidationError("--frame-image", f"expected STEP=PATH, got {entry!r}")
        step = int(step_text)
        if step not in frames:
            raise ValidationError("--frame-image", f"trace has no frame with step {step}")
        try:
            image = read_pnm(path)
        except ImageFormatError as exc:
            raise InputError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise InputError(f"{path}: {exc.strerror or exc}") from exc
        grid = compute_saliency(image, args.saliency_method, args.patch_size)
        cells = grid.values.ravel()
        if cells.size != len(frames[step]):
            raise ValidationError(
                "--frame-image", f"{path} gives {cells.size} patches but frame step {step} "
                f"has {len(frames[step])} tokens")
        signals[step] = cells
    return signals


def _select(method: str, traces, layout, config: CompressionConfig, args, workers: int,
            frame_signals=None):
    """Returns (KeepSet, score sheets or None, budget plan or None)."""
    if method in _SCORING:
        keep, sheets = compress_prompt(traces, layout, config, _SCORING[method],
                                       frame_signals=frame_signals, workers=workers)
        return keep, sheets, None
    if method == "recency":
        keep = recency_select(layout, config.gamma, sink_count=args.sink_count,
                              layers=len(traces), kv_heads=traces[0].kv_heads)
        return keep, None, None
    plan = _budget_plan(method, traces, layout, config.gamma, args)
    keep = plan_select(traces, layout, plan, config.gamma, config.pool_kernel, workers)
    return keep, None, plan


def _segment_info(layout):
    kind = np.empty(layout.n, dtype=object)
    step = np.zeros(layout.n, dtype=np.int64)
    for s in layout.segments:
        kind[s.start:s.end] = "frame" if s.is_visual else "text"
        step[s.start:s.end] = s.step
    return kind, step


def _scores_csv(layout, sheets, keep: KeepSet) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {SCORES_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "head", "token", "kind", "step", "attention", "saliency",
                "redundancy", "gated", "final", "kept"])
    kind, step = _segment_info(layout)
    for li, layer in enumerate(sheets):
        for h, sh in enumerate(layer):
            rho = dict(zip(sh.previous_indices.tolist(), sh.redundancy.tolist()))
            kept = set(keep.kept[li][h].tolist())
            for i in range(layout.n):
                r = rho.get(i)
                gated = "" if r is None else int(r < sh.threshold)
                w.writerow([li, h, i, kind[i], int(step[i]), _fmt(sh.attention[i]),
                            _fmt(sh.saliency[i]), _fmt(r), gated, _fmt(sh.final[i]),
                            int(i in kept)])
    return buf.getvalue()


def _window_retention(keep: KeepSet, layout) -> float:
    window = layout.window_indices()
    heads = [np.isin(window, h).all() for layer in keep.kept for h in layer]
    return float(np.mean(heads))


def _jaccard(a: KeepSet, b: KeepSet) -> float:
    vals = []
    for la, lb in zip(a.kept, b.kept):
        for ha, hb in zip(la, lb):
            inter = np.intersect1d(ha, hb).size
            union = np.union1d(ha, hb).size
            vals.append(inter / union if union else 1.0)
    return float(np.mean(vals))


# -- commands ------------------------------------------------------------------

_PARAM_FLAGS = {
    "frames": "--frames", "tokens_per_frame": "--tokens-per-frame",
    "text_prefix": "--text-prefix", "text_suffix": "--text-suffix", "omega": "--omega",
    "layers": "--layers", "kv_heads": "--kv-heads", "group": "--group",
    "head_dim": "--head-dim", "overlap_eta": "--eta", "noise_sigma": "--noise-sigma",
    "frame_rank": "--frame-rank", "orthogonal_frames": "--orthogonal-frames",
    "register_fraction": "--register-fraction", "register_norm_scale": "--register-norm-scale",
    "concentration": "--concentration", "query_gain": "--query-gain",
    "target_boost": "--target-boost", "seed": "--seed",
}


def cmd_gen(args) -> int:
    kwargs = {field: getattr(args, field) for field in _PARAM_FLAGS}
    kwargs["with_values"] = not args.no_values
    try:
        params = TrajectoryParams(**kwargs)
    except ValueError as exc:
        msg = str(exc)
        field = next((f for f in sorted(_PARAM_FLAGS, key=len, reverse=True) if msg.startswith(f)),
                     None)
        raise ValidationError(_PARAM_FLAGS.get(field, "--params"), msg) from exc
    layout, traces = gen_trajectory(params)
    write_trace(args.output, layout, traces)
    return 0


def cmd_compress(args) -> int:
    layout, traces = _load_trace(args.trace)
    layout, traces = _restrict_omega(layout, traces, args.omega)
    config = _config(args, args.budget, args.rank, layout.omega)
    if args.method == "pyramidkv" and len(traces) < 2:
        raise ValidationError("--method", "pyramidkv needs a trace with at least 2 layers")
    signals = _frame_signals(args, layout)
    keep, sheets, plan = _select(args.method, traces, layout, config, args, args.workers, signals)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "schema": KEEPSET_SCHEMA,
        "method": args.method,
        "config": {
            "trace": args.trace, "trace_sha256": _sha256(args.trace),
            "budget": config.gamma, "rank": config.rank_r, "alpha": config.alpha,
            "tau": config.tau, "omega": config.omega, "pool_kernel": config.pool_kernel,
            "epsilon": config.epsilon, "p": args.p, "beta": args.beta,
            "sink_count": args.sink_count,
            "frame_images": [
                {"entry": entry, "sha256": _sha256(entry.partition("=")[2])}
                for entry in args.frame_image
            ],
            "saliency_method": args.saliency_method, "patch_size": args.patch_size,
        },
        "layout": layout.to_dict(),
        "keep": keep.to_dict(),
        "plan": plan.to_dict() if plan is not None else None,
        "heads": [
            {"layer": li, "head": h, "threshold": sh.threshold, "basis_cols": sh.basis_cols}
            for li, layer in enumerate(sheets) for h, sh in enumerate(layer)
        ] if sheets is not None else [],
    }
    _dump_json(doc, str(out / "keepset.json"))
    if sheets is not None:
        (out / "scores.csv").write_text(_scores_csv(layout, sheets, keep))
    return 0


def _parse_list(flag: str, text: str, conv):
    items = [x.strip() for x in text.split(",") if x.strip()]
    if not items:
        raise ValidationError(flag, "list must not be empty")
    try:
        return [conv(x) for x in items]
    except ValueError as exc:
        raise ValidationError(flag, str(exc)) from exc


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    methods = _parse_list("--methods", args.methods, str)
    for m in methods:
        if m not in SELECTORS:
            raise ValidationError("--methods", f"unknown method {m!r}; valid: {', '.join(SELECTORS)}")
    budgets = _parse_list("--budgets", args.budgets, float)
    for g in budgets:
        _unit_interval("--budgets", g, open_low=True)
    ranks = _parse_list("--ranks", args.ranks, int)
    for r in ranks:
        if r < 1:
            raise ValidationError("--ranks", f"rank must be >= 1, got {r}")
    layout, traces = _load_trace(args.trace)
    layout, traces = _restrict_omega(layout, traces, args.omega)
    for g in budgets:
        _config(args, g, ranks[0], layout.omega)
    has_values = traces[0].values is not None
    probes = [derive_probes(t, layout, args.probes, args.probe_seed) for t in traces] \
        if has_values else None

    reference = {}
    cells = [(m, g, r) for m in methods for g in budgets for r in ranks]

    def run(cell):
        m, g, r = cell
        keep, _, plan = _select(m, traces, layout, _config(args, g, r, layout.omega), args, 1)
        return keep, plan

    results = _map_ordered(run, cells, args.workers)
    for g in budgets:
        cfg = _config(args, g, ranks[0], layout.omega)
        reference[g] = compress_prompt(traces, layout, cfg, Method.ATTENTION_ONLY, workers=1)[0]

    rows = []
    for (m, g, r), (keep, plan) in zip(cells, results):
        counts = keep.kept_counts()
        row = {
            "method": m, "gamma": g, "rank": r, "n": layout.n,
            "expected_kept": budget_count(g, layout.n),
            "kept_min": int(counts.min()), "kept_max": int(counts.max()),
            "kept_mean": float(counts.mean()),
            "window_retained": _window_retention(keep, layout),
            "overlap_attention_only": _jaccard(keep, reference[g]),
            "plan_fallback": bool(plan.fallback) if plan is not None else False,
            "recon_mean": None, "recon_max": None,
        }
        if has_values:
            err = reconstruction_error(traces, layout, keep, probes)
            row["recon_mean"] = float(err["mean"].mean())
            row["recon_max"] = float(err["max"].max())
        rows.append(row)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"# schema: {SWEEP_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(rows[0]))
    for row in rows:
        w.writerow([_fmt(v) for v in row.values()])
    (out / "sweep.csv").write_text(buf.getvalue())

    profile = layer_sparsity_profile(traces, layout, args.p)
    full = decode_flops_per_token(CFG_STAR, [layout.n] * CFG_STAR.layers)
    flops = []
    for g in budgets:
        comp = decode_flops_per_token(CFG_STAR, [budget_count(g, layout.n)] * CFG_STAR.layers)
        flops.append({"gamma": g, "decode_mflops": comp, "reduction_pct": 100 * (1 - comp / full)})
    report = {
        "schema": RUN_SCHEMA,
        "version": __version__,
        "config": {
            "command": "sweep", "trace": args.trace, "trace_sha256": _sha256(args.trace),
            "methods": methods, "budgets": budgets, "ranks": ranks, "alpha": args.alpha,
            "tau": args.tau, "omega": layout.omega, "pool_kernel": args.pool_kernel,
            "p": args.p, "beta": args.beta, "sink_count": args.sink_count,
            "probes": args.probes,
        },
        "seeds": {"probe_seed": args.probe_seed},
        "layout": layout.to_dict(),
        "rows": rows,
        "sparsity": profile.summary(),
        "flops": {"config": "cfg*", "n": layout.n, "full_decode_mflops": full, "budgets": flops},
    }
    elapsed = time.perf_counter() - started
    if args.timing:
        report["wall_time_s"] = elapsed
    _dump_json(report, str(out / "report.json"))
    print(f"sweep: {len(rows)} cells in {elapsed:.2f} s", file=sys.stderr)
    return 0


def cmd_sparsity(args) -> int:
    if not 0 < args.p < 1:
        raise ValidationError("--p", f"must be in (0, 1), got {args.p}")
    layout, traces = _load_trace(args.trace)
    profile = layer_sparsity_profile(traces, layout, args.p)
    _write_text(profile.to_csv(), args.output)
    if args.summary:
        _dump_json(profile.summary(), args.summary)
    return 0


def _model_config(entry: str) -> ModelConfig:
    if entry == "cfg*":
        return CFG_STAR
    try:
        raw = json.loads(Path(entry).read_text())
    except OSError as exc:
        raise InputError(f"{entry}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{entry}: invalid JSON: {exc}") from exc
    try:
        return ModelConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError("--config", str(exc)) from exc


def cmd_flops(args) -> int:
    if args.screenshots < 1:
        raise ValidationError("--screenshots", "must be >= 1")
    _unit_interval("--budget", args.budget, open_low=True)
    if args.rank < 1:
        raise ValidationError("--rank", "must be >= 1")
    cfg = _model_config(args.config)
    try:
        report = flops_report(cfg, args.screenshots, args.budget, args.rank, args.omega)
    except ValueError as exc:
        raise ValidationError("--omega", str(exc)) from exc
    doc = report.to_dict()
    doc["config"] = {"name": args.config, "model": cfg.to_dict(), "rank": args.rank,
                     "omega": args.omega}
    _dump_json(doc, args.output)
    return 0


def cmd_pixel_saliency(args) -> int:
    if args.patch_size < 1:
        raise ValidationError("--patch-size", "must be >= 1")
    if not args.tau > 0:
        raise ValidationError("--tau", "must be > 0")
    try:
        image = read_pnm(args.image)
    except ImageFormatError as exc:
        raise InputError(f"{args.image}: {exc}") from exc
    except OSError as exc:
        raise InputError(f"{args.image}: {exc.strerror or exc}") from exc
    grid = compute_saliency(image, args.method, args.patch_size)
    scores = saliency_to_scores(grid, args.tau)
    _write_text(grid.to_csv(scores), args.output)
    return 0


# -- parser --------------------------------------------------------------------

def _add_selection_flags(p, budget_required: bool):
    if budget_required:
        p.add_argument("--budget", type=float, required=True, help="retained fraction gamma")
        p.add_argument("--rank", type=int, default=32, help="QR rank r")
    p.add_argument("--alpha", type=float, default=2.0, help="saliency weight")
    p.add_argument("--tau", type=float, default=3.5, help="saliency temperature")
    p.add_argument("--omega", type=int, default=None,
                   help="observation window (default: the trace's)")
    p.add_argument("--pool-kernel", type=int, default=7, help="max-pool width, 0 disables")
    p.add_argument("--p", type=float, default=0.01, help="sparsity threshold for vl-cache")
    p.add_argument("--beta", type=float, default=20.0, help="pyramidkv first/last ratio")
    p.add_argument("--sink-count", type=int, default=4, help="recency sink tokens")
    p.add_argument("--workers", type=int, default=default_workers(),
                   help="threads (default from GUIKV_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guikv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"guikv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    d = TrajectoryParams()
    p = sub.add_parser("gen", help="generate a synthetic trajectory trace")
    p.add_argument("-o", "--output", required=True, help="output .gkvt path")
    for field, flag in _PARAM_FLAGS.items():
        default = getattr(d, field)
        if isinstance(default, bool):
            p.add_argument(flag, dest=field, action="store_true")
        else:
            p.add_argument(flag, dest=field, type=type(default), default=default,
                           help=f"default {default}")
    p.add_argument("--no-values", action="store_true", help="omit value tensors")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("compress", help="select the KV entries to keep")
    p.add_argument("trace")
    p.add_argument("--method", choices=SELECTORS, default="gui-kv")
    _add_selection_flags(p, budget_required=True)
    p.add_argument("--frame-image", action="append", default=[], metavar="STEP=PATH",
                   help="replace a frame's hidden-norm saliency with pixel saliency")
    p.add_argument("--saliency-method", choices=list(SALIENCY_METHODS), default="sobel")
    p.add_argument("--patch-size", type=int, default=28)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("sweep", help="evaluate methods over budget and rank grids")
    p.add_argument("trace")
    p.add_argument("--methods", default="gui-kv,snapkv,pyramidkv,vl-cache,recency")
    p.add_argument("--budgets", default="0.01,0.03,0.05,0.1,0.15,0.2,0.4,0.8")
    p.add_argument("--ranks", default="32")
    _add_selection_flags(p, budget_required=False)
    p.add_argument("--probes", type=int, default=16, help="probe queries per query head")
    p.add_argument("--probe-seed", type=int, default=0)
    p.add_argument("--timing", action="store_true", help="record wall time in the report")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("sparsity", help="per-layer, per-head attention sparsity")
    p.add_argument("trace")
    p.add_argument("--p", type=float, default=0.01, help="relative threshold")
    p.add_argument("-o", "--output", default=None, help="CSV path (default stdout)")
    p.add_argument("--summary", default=None, help="also write a JSON summary here")
    p.set_defaults(func=cmd_sparsity)

    p = sub.add_parser("flops", help="decode and compression FLOPs")
    p.add_argument("--screenshots", type=int, required=True)
    p.add_argument("--budget", type=float, required=True)
    p.add_argument("--config", default="cfg*", help="'cfg*' or a ModelConfig JSON file")
    p.add_argument("--rank", type=int, default=32)
    p.add_argument("--omega", type=int, default=8)
    p.add_argument("-o", "--output", default=None, help="JSON path (default stdout)")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("pixel-saliency", help="patch saliency of a PGM/PPM image")
    p.add_argument("image")
    p.add_argument("--method", choices=list(SALIENCY_METHODS), required=True)
    p.add_argument("--patch-size", type=int, default=28)
    p.add_argument("--tau", type=float, default=3.5)
    p.add_argument("-o", "--output", default=None, help="CSV path (default stdout)")
    p.set_defaults(func=cmd_pixel_saliency)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("guikv: error: --workers: must be >= 1", file=sys.stderr)
        return 4
    try:
        return args.func(args)
    except InputError as exc:
        print(f"guikv: input error: {exc}", file=sys.stderr)
        return 3
    except ValidationError as exc:
        print(f"guikv: error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"guikv: error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
