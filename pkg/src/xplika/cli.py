"""Command-line interface.

Exit codes: 0 on success, 1 on usage errors, 2 on data or model errors.
Every run writes a JSON sidecar next to its primary output recording the
argument vector, the seed and a config digest; :func:`rerun` replays it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import attribution, concepts, featviz, io, metrics
from .engine import load_model_files
from .errors import XplikaError

SUBCOMMANDS = ("explain", "metric", "featviz", "cav-fit", "tcav", "cav-map")
METRIC_KINDS = ("deletion", "insertion", "mu_fidelity", "stability")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _grid(text: str):
    if text is None:
        return None
    parts = text.lower().replace(",", "x").split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; use N or HxW") from None
    return dims[0] if len(dims) == 1 else dims


def _float_or_inf(text: str) -> float:
    return math.inf if text.lower() in ("inf", "infinity") else float(text)


def _add_model_args(p, target=True):
    p.add_argument("--model", required=True, help="model manifest (JSON)")
    p.add_argument("--weights", required=True, help="float32 weight blob")
    if target:
        p.add_argument("--target", type=int, default=0)


def _add_method_args(p, required=True, steps_flag="--steps"):
    p.add_argument("--method", choices=attribution.METHODS, required=required)
    p.add_argument(steps_flag, dest="method_steps", type=int, default=64,
                   help="integration steps (integrated_gradients)")
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--conv-layer", default=None)
    p.add_argument("--patch", type=_grid, default=1)
    p.add_argument("--stride", type=_grid, default=1)
    p.add_argument("--grid", type=_grid, default=None)
    p.add_argument("--keep-prob", type=float, default=0.5)
    p.add_argument("--kernel-width", type=_float_or_inf, default=0.25)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xplika", description="Explainability toolkit for small feed-forward networks.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    p = sub.add_parser("explain", help="compute an attribution map")
    _add_model_args(p)
    p.add_argument("--input", required=True)
    _add_method_args(p)
    p.add_argument("--baseline", type=float, default=0.0)
    p.add_argument("--baseline-file", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--pgm", default=None)

    p = sub.add_parser("metric", help="evaluate an attribution map")
    _add_model_args(p)
    p.add_argument("--kind", choices=METRIC_KINDS, required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--map", default=None, help="attribution tensor (deletion/insertion/mu_fidelity)")
    p.add_argument("--steps", type=int, default=10, help="deletion/insertion steps")
    p.add_argument("--baseline", type=float, default=0.0)
    p.add_argument("--subset-size", type=int, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--radius", type=float, default=0.1)
    _add_method_args(p, required=False, steps_flag="--method-steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("featviz", help="synthesize a feature-visualization image")
    _add_model_args(p, target=False)
    p.add_argument("--objective", action="append", required=True,
                   help="LAYER:neuron:IDX[:W] | LAYER:channel:IDX[:W] | LAYER:layer[:W] | LAYER:direction:FILE[:W]")
    p.add_argument("--param", choices=("pixel", "fourier"), default="fourier")
    p.add_argument("--steps", type=int, default=256)
    p.add_argument("--step-size", type=float, default=0.05)
    p.add_argument("--jitter", type=int, default=0)
    p.add_argument("--scale-range", default="1,1")
    p.add_argument("--pad", type=int, default=None)
    p.add_argument("--decay", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--trajectory", default=None)
    p.add_argument("--pgm", default=None)

    p = sub.add_parser("cav-fit", help="fit a concept activation vector")
    _add_model_args(p, target=False)
    p.add_argument("--layer", required=True)
    p.add_argument("--positives", required=True, help="stacked concept inputs (N x input shape)")
    p.add_argument("--negatives", required=True, help="stacked random inputs (N x input shape)")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--holdout", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("tcav", help="score a CAV against a class")
    _add_model_args(p)
    p.add_argument("--cav", required=True)
    p.add_argument("--layer", default=None, help="defaults to the layer in the CAV sidecar")
    p.add_argument("--examples", required=True, help="stacked example inputs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("cav-map", help="locate a CAV on an input")
    _add_model_args(p, target=False)
    p.add_argument("--cav", required=True)
    p.add_argument("--layer", default=None)
    p.add_argument("--input", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--pgm", default=None)
    return parser


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _digest(args) -> str:
    skip = {"out", "pgm", "trajectory"}
    record = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    text = json.dumps(record, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _method_config(args, baseline) -> attribution.MethodConfig:
    return attribution.MethodConfig(
        method=args.method,
        baseline=baseline,
        steps=args.method_steps,
        sigma=args.sigma,
        n_samples=args.samples,
        conv_layer=args.conv_layer,
        patch=args.patch,
        stride=args.stride,
        grid=args.grid,
        keep_prob=args.keep_prob,
        kernel_width=args.kernel_width,
        seed=args.seed,
    )


def _model(args):
    return load_model_files(args.model, args.weights)


def _load_cav(args) -> concepts.CAV:
    vector = io.read_tensor(args.cav).reshape(-1)
    meta_path = io.sidecar_path(args.cav)
    meta = io.read_sidecar(meta_path) if meta_path.exists() else {}
    layer = args.layer or meta.get("layer")
    if layer is None:
        raise XplikaError("CAV layer unknown: pass --layer or keep the CAV sidecar")
    return concepts.CAV(layer, vector, meta.get("accuracy", float("nan")), meta.get("epochs", 0),
                        meta.get("loss", float("nan")), meta.get("seed", 0))


def _parse_objective(specs) -> featviz.Objective:
    terms = []
    for spec in specs:
        parts = spec.split(":")
        if len(parts) < 2:
            raise UsageError(f"bad objective {spec!r}")
        layer, sel, rest = parts[0], parts[1], parts[2:]
        try:
            if sel == "layer":
                terms.append(featviz.layer_mean(layer, float(rest[0]) if rest else 1.0))
            elif sel in ("neuron", "channel"):
                w = float(rest[1]) if len(rest) > 1 else 1.0
                make = featviz.neuron if sel == "neuron" else featviz.channel
                terms.append(make(layer, int(rest[0]), w))
            elif sel == "direction":
                w = float(rest[1]) if len(rest) > 1 else 1.0
                terms.append(featviz.direction(layer, io.read_tensor(rest[0]), w))
            else:
                raise UsageError(f"unknown selector {sel!r} in {spec!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, XplikaError):
                raise
            raise UsageError(f"bad objective {spec!r}") from None
    return featviz.Objective(tuple(terms))


def _finish(args, argv, record: dict) -> None:
    record.update(subcommand=args.command, argv=list(argv), seed=args.seed,
                  config_digest=record.get("config_digest") or _digest(args))
    io.write_sidecar(args.out, record)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def _cmd_explain(args, argv) -> str:
    model = _model(args)
    x = io.read_tensor(args.input).reshape(model.input_shape)
    baseline = io.read_tensor(args.baseline_file) if args.baseline_file else args.baseline
    config = _method_config(args, baseline)
    result = attribution.explain(model, x, args.target, config)
    io.write_tensor(args.out, result.values)
    if args.pgm:
        io.export_pgm(result.values, args.pgm)
    extras = {k: float(v) for k, v in result.extras.items() if np.ndim(v) == 0}
    _finish(args, argv, {"method": config.method, "config": config.to_dict(),
                         "config_digest": result.config_digest, "target": args.target, "extras": extras})
    return f"method={config.method} digest={result.config_digest} out={args.out}"


def _cmd_metric(args, argv) -> str:
    model = _model(args)
    x = io.read_tensor(args.input).reshape(model.input_shape)
    kind = args.kind
    if kind == "stability":
        if args.method is None:
            raise UsageError("metric --kind stability needs --method")
        config = _method_config(args, args.baseline)
        value = metrics.average_stability(config, model, x, args.target, args.radius, args.trials or 10, args.seed)
        io.write_tensor(args.out, np.array([value]))
        _finish(args, argv, {"metric": kind, "value": value, "config": config.to_dict()})
        return f"metric={kind} value={value!r}"
    if args.map is None:
        raise UsageError(f"metric --kind {kind} needs --map")
    amap = io.read_tensor(args.map).reshape(x.shape)
    if kind == "mu_fidelity":
        value = metrics.mu_fidelity(model, x, args.target, amap, args.subset_size, args.trials or 50,
                                    args.baseline, args.seed)
        io.write_tensor(args.out, np.array([value]))
        _finish(args, argv, {"metric": kind, "value": value})
        return f"metric={kind} value={value!r}"
    fn = metrics.deletion if kind == "deletion" else metrics.insertion
    curve = fn(model, x, args.target, amap, args.baseline, args.steps)
    io.write_tensor(args.out, curve.as_array())
    _finish(args, argv, {"metric": kind, "auc": curve.auc, "steps": args.steps})
    return f"metric={kind} auc={curve.auc!r}"


def _cmd_featviz(args, argv) -> str:
    model = _model(args)
    objective = _parse_objective(args.objective)
    try:
        lo, hi = (float(v) for v in args.scale_range.split(","))
    except ValueError:
        raise UsageError("--scale-range takes LO,HI") from None
    pad = args.jitter if args.pad is None else args.pad
    spec = featviz.TransformSpec(jitter=args.jitter, scale=(lo, hi), pad=pad)
    result = featviz.optimize(model, objective, args.param, args.steps, args.step_size, spec, args.seed, args.decay)
    io.write_tensor(args.out, result.image)
    traj = args.trajectory or str(args.out) + ".traj.xtns"
    io.write_tensor(traj, result.trajectory)
    if args.pgm:
        io.export_pgm(result.image, args.pgm)
    final = float(result.trajectory[-1])
    _finish(args, argv, {"trajectory": traj, "final_objective": final})
    return f"featviz final_objective={final!r} out={args.out}"


def _cmd_cav_fit(args, argv) -> str:
    model = _model(args)
    shape = model.input_shape

    def stacked(path):
        arr = io.read_tensor(path)
        return arr.reshape((-1,) + shape)

    pos = concepts.collect_activations(model, stacked(args.positives), args.layer)
    neg = concepts.collect_activations(model, stacked(args.negatives), args.layer)
    cav = concepts.fit_cav(pos, neg, args.epochs, args.lr, args.holdout, args.seed)
    io.write_tensor(args.out, cav.vector)
    _finish(args, argv, cav.metadata())
    return f"cav layer={cav.layer} accuracy={cav.held_out_accuracy!r} out={args.out}"


def _cmd_tcav(args, argv) -> str:
    model = _model(args)
    cav = _load_cav(args)
    examples = io.read_tensor(args.examples).reshape((-1,) + model.input_shape)
    value = concepts.tcav_score(model, cav.layer, cav, list(examples), args.target)
    io.write_tensor(args.out, np.array([value]))
    _finish(args, argv, {"layer": cav.layer, "tcav": value, "target": args.target})
    return f"tcav={value!r} layer={cav.layer}"


def _cmd_cav_map(args, argv) -> str:
    model = _model(args)
    cav = _load_cav(args)
    x = io.read_tensor(args.input).reshape(model.input_shape)
    result = concepts.cav_spatial_map(model, x, cav.layer, cav)
    io.write_tensor(args.out, result.values)
    if args.pgm:
        io.export_pgm(result.values, args.pgm)
    total = float(result.extras["grid"].sum())
    _finish(args, argv, {"layer": cav.layer, "grid_sum": total})
    return f"cav-map layer={cav.layer} grid_sum={total!r} out={args.out}"


COMMANDS = {
    "explain": _cmd_explain,
    "metric": _cmd_metric,
    "featviz": _cmd_featviz,
    "cav-fit": _cmd_cav_fit,
    "tcav": _cmd_tcav,
    "cav-map": _cmd_cav_map,
}


def run_cli(argv=None, stdout=None, stderr=None) -> int:
    """Run one subcommand and return its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        line = COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(str(exc), file=stderr)
        return 1
    except (XplikaError, ValueError, OSError) as exc:
        print(f"xplika: error: {exc}", file=stderr)
        return 2
    print(line, file=stdout)
    return 0


def rerun(sidecar, out=None, stdout=None, stderr=None) -> int:
    """Replay the run recorded in a sidecar, optionally redirecting ``--out``."""
    argv = list(io.read_sidecar(sidecar)["argv"])
    if out is not None:
        i = argv.index("--out")
        argv[i + 1] = str(out)
        # derived outputs follow the new primary path
        for flag, suffix in (("--trajectory", ".traj.xtns"), ("--pgm", ".pgm")):
            if flag in argv:
                j = argv.index(flag)
                argv[j + 1] = str(Path(str(out) + suffix))
    return run_cli(argv, stdout, stderr)


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
