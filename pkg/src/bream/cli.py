"""Command-line driver: ``bream {train,sweep,eval,curve,rerun}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
divergence.
"""

import argparse
import itertools
import json
import logging
import os
import sys
import time
from pathlib import Path


from . import __version__
from ._io import atomic_open
from .acquisition import content_key, episode_rng, format_trace, run_episode
from .data import (
    SplitSpec,
    Standardizer,
    fingerprint,
    load_csv,
    make_costs,
    split_thirds,
    standardize,
    write_split_manifest,
)
from .errors import ConfigError, DataError, DivergenceError
from .evaluation import EVAL_STREAM, evaluate, interpolate_accuracy, make_curve, read_curve, sweep, write_curve
from .model import load_params, save_params
from .training import TrainConfig, train, write_history

log = logging.getLogger("bream")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
DEFAULT_LEVELS = "0.9,0.75,0.5,0.25"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p, data=True):
    if data:
        p.add_argument("--data", required=True, help="CSV file with a header row")
        p.add_argument("--label", required=True, help="label column name or index")
        p.add_argument("--costs", default="uniform", help="uniform | linear | file:PATH")
    p.add_argument("--seed", type=int, default=None, help="master seed (split, init, sampling)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--eval-samples", type=int, default=1, dest="eval_samples", help="episodes per example (K)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    ap = _Parser(prog="bream", description="Budgeted sequential feature acquisition.")
    ap.add_argument("--version", action="version", version=f"bream {__version__}")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="split, standardize and train one configuration")
    _common(p)
    p.add_argument("--config", help="JSON file with TrainConfig keys")
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, dest="T")
    p.add_argument("--dim", type=int, dest="p")
    p.add_argument("--rollouts", type=int, dest="M")
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--cell", choices=("rnn", "gru"), dest="cell_type")

    p = sub.add_parser("sweep", help="train a grid, select the validation Pareto front, report on test")
    _common(p)
    p.add_argument("--grid", required=True, help="JSON list of configs, or {'base': {...}, 'grid': {key: [values]}}")

    p = sub.add_parser("eval", help="evaluate saved parameters")
    _common(p)
    p.add_argument("--params", required=True)
    p.add_argument("--split", choices=("all", "train", "valid", "test"), default="all",
                   help="re-derive this split (and its standardization) with --seed")
    p.add_argument("--standardizer", help="standardization record for --split all")
    p.add_argument("--trace", help="write per-example episode traces to this file")

    p = sub.add_parser("curve", help="interpolate accuracy on a test curve")
    p.add_argument("--curve", required=True)
    p.add_argument("--levels", default=DEFAULT_LEVELS, help="comma-separated cost levels")
    p.add_argument("--raw", action="store_true", help="levels are raw mean costs, not fractions of total cost")
    p.add_argument("--svg", help="write an SVG line plot")
    p.add_argument("--out", help="write level,accuracy CSV")

    p = sub.add_parser("rerun", help="repeat a run from its manifest.json")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=None)
    return ap


def _prepare(args, seed):
    d = load_csv(args.data, args.label)
    costs = make_costs(args.costs, d.n)
    tr, va, te = split_thirds(d, SplitSpec(seed=seed))
    tr_s, (va_s, te_s), rec = standardize(tr, [va, te])
    return d, costs, (tr, va, te), (tr_s, va_s, te_s), rec


def _manifest(args, argv, outputs, extra, started):
    return {
        "tool": "bream",
        "version": __version__,
        "command": args.command,
        "argv": argv,
        "cwd": os.getcwd(),
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": outputs,
        **extra,
    }


def _write_json(obj, path):
    with atomic_open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _config(args):
    overrides = {k: getattr(args, k, None) for k in ("lam", "epochs", "T", "p", "M", "learning_rate", "cell_type")}
    overrides["seed"] = args.seed
    if args.config:
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def cmd_train(args, argv):
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    cfg = _config(args)
    out = Path(args.out or "run")
    d, costs, raw, (tr, va, te), rec = _prepare(args, cfg.seed)
    params, hist = train(tr, va, costs, cfg, threads=args.threads)
    save_params(params, out / "params.npz")
    write_history(hist, out / "history.csv")
    rec.save(out / "standardizer.csv")
    write_split_manifest(raw, out / "splits.csv")
    _write_json(cfg.to_dict(), out / "config.json")
    outputs = ["params.npz", "history.csv", "standardizer.csv", "splits.csv", "config.json"]
    extra = {"config": cfg.to_dict(), "seed": cfg.seed, "dataset": fingerprint(d), "costs": args.costs}
    _write_json(_manifest(args, argv, outputs, extra, started), out / "manifest.json")
    last = hist[-1] if hist else {}
    print(f"trained {cfg.epochs} epochs; valid accuracy {last.get('valid_accuracy', float('nan')):.4f}, "
          f"mean cost {last.get('valid_mean_cost', float('nan')):.4f} -> {out}")
    return EXIT_OK


def load_grid(path, seed=None):
    try:
        spec = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read grid {path}: {e}") from None
    if isinstance(spec, dict) and "grid" in spec:
        base = spec.get("base", {})
        axes = spec["grid"]
        if not isinstance(base, dict) or not isinstance(axes, dict) or not all(isinstance(v, list) for v in axes.values()):
            raise ConfigError(f"grid {path}: 'base' must be an object and 'grid' an object of lists")
        keys = list(axes)
        entries = [dict(base, **dict(zip(keys, vals))) for vals in itertools.product(*(axes[k] for k in keys))]
    elif isinstance(spec, list) and all(isinstance(e, dict) for e in spec):
        entries = spec
    else:
        raise ConfigError(f"grid {path} must be a list of config objects or {{'base':..., 'grid':...}}")
    if not entries:
        raise ConfigError(f"grid {path} is empty")
    if seed is not None:
        entries = [dict(e, seed=seed) for e in entries]
    return [TrainConfig.from_dict(e) for e in entries]


def cmd_sweep(args, argv):
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    grid = load_grid(args.grid, args.seed)
    seed = args.seed if args.seed is not None else 0
    out = Path(args.out or "sweep")
    d, costs, raw, (tr, va, te), rec = _prepare(args, seed)
    front, curve, records = sweep(tr, va, te, costs, grid, out, eval_seed=seed, K=args.eval_samples, threads=args.threads)
    rec.save(out / "standardizer.csv")
    write_split_manifest(raw, out / "splits.csv")
    outputs = ["valid_front.csv", "test_curve.csv", "sweep_manifest.csv", "standardizer.csv", "splits.csv", "models/"]
    extra = {"grid": [g.to_dict() for g in grid], "seed": seed, "dataset": fingerprint(d), "costs": args.costs,
             "eval_samples": args.eval_samples}
    _write_json(_manifest(args, argv, outputs, extra, started), out / "manifest.json")
    print("model_id,mean_cost,normalized_cost,accuracy  (test, validation-front models)")
    for q in curve:
        print(f"{q.model_id},{q.mean_cost:.6g},{q.normalized_cost:.6g},{q.accuracy:.4f}")
    return EXIT_OK


def cmd_eval(args, argv):
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    params = load_params(args.params)
    seed = args.seed if args.seed is not None else 0
    if args.split == "all":
        d = load_csv(args.data, args.label)
        costs = make_costs(args.costs, d.n)
        if d.n != params.n:
            raise DataError(f"model expects {params.n} features, {args.data} has {d.n}")
        if args.standardizer:
            d = d.with_features(Standardizer.load(args.standardizer).apply(d.features))
        target = d
    else:
        d, costs, _, splits, _ = _prepare(args, seed)
        if d.n != params.n:
            raise DataError(f"model expects {params.n} features, {args.data} has {d.n}")
        target = splits[("train", "valid", "test").index(args.split)]
    pt = evaluate(params, target, costs, seed=seed, K=args.eval_samples, threads=args.threads,
                  model_id=Path(args.params).parent.name)
    print(f"accuracy {pt.accuracy:.6f} mean_cost {pt.mean_cost:.6g} normalized_cost {pt.normalized_cost:.6g}")
    out = Path(args.out) if args.out else None
    if out is not None:
        write_curve([pt], out / "eval.csv")
        extra = {"seed": seed, "dataset": fingerprint(d), "costs": args.costs, "eval_samples": args.eval_samples}
        _write_json(_manifest(args, argv, ["eval.csv"], extra, started), out / "manifest.json")
    if args.trace:
        with atomic_open(args.trace, "w") as fh:
            for k, (x, y) in enumerate(zip(target.features, target.labels)):
                rng = episode_rng(seed, EVAL_STREAM, *content_key(x))
                for s in range(args.eval_samples):
                    tr = run_episode(params, x, costs, rng)
                    fh.write(format_trace(tr, f"{k} sample {s} label {int(y)}") + "\n")
    return EXIT_OK


def _parse_levels(text):
    try:
        levels = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad --levels {text!r}") from None
    if not levels:
        raise UsageError("no cost levels given")
    return levels


def curve_svg(curve, normalized=True, width=480, height=320, pad=48):
    """Minimal SVG line plot of accuracy against cost."""
    pts = make_curve(curve, normalized)
    xs = [q.cost(normalized) for q in pts]
    ys = [q.accuracy for q in pts]
    x0, x1 = min(0.0, min(xs)), max(xs) if max(xs) > 0 else 1.0
    sx = lambda v: pad + (v - x0) / ((x1 - x0) or 1.0) * (width - 2 * pad)
    sy = lambda v: height - pad - v * (height - 2 * pad)
    poly = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
    label = "fraction of total cost" if normalized else "mean acquisition cost"
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle" font-size="12">{label}</text>',
        f'<text x="14" y="{height / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {height / 2})">accuracy</text>',
    ]
    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(f'<text x="{pad - 6}" y="{sy(v) + 4:.2f}" text-anchor="end" font-size="10">{v:g}</text>')
    parts.append(f'<text x="{sx(x0):.2f}" y="{height - pad + 14}" text-anchor="middle" font-size="10">{x0:g}</text>')
    parts.append(f'<text x="{sx(x1):.2f}" y="{height - pad + 14}" text-anchor="middle" font-size="10">{x1:.3g}</text>')
    parts.append(f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{poly}"/>')
    for x, y in zip(xs, ys):
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="steelblue"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_curve(args, argv):
    curve = read_curve(args.curve)
    if not curve:
        raise DataError(f"curve {args.curve} has no points")
    normalized = not args.raw
    levels = _parse_levels(args.levels)
    rows = [(lv, interpolate_accuracy(curve, lv, normalized)) for lv in levels]
    print("level,accuracy")
    for lv, acc in rows:
        print(f"{lv:g},{acc:.6f}")
    if args.out:
        with atomic_open(args.out, "w") as fh:
            fh.write("level,accuracy\n")
            fh.writelines(f"{lv!r},{acc!r}\n" for lv, acc in rows)
    if args.svg:
        with atomic_open(args.svg, "w") as fh:
            fh.write(curve_svg(curve, normalized))
    return EXIT_OK


def cmd_rerun(args, argv):
    try:
        man = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        old = list(man["argv"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise ConfigError(f"cannot use manifest {args.manifest}: {e}") from None
    new, skip = [], False
    for tok in old:
        if skip:
            skip = False
            continue
        if tok in ("--out", "--threads"):
            skip = True
            continue
        if tok.startswith(("--out=", "--threads=")):
            continue
        new.append(tok)
    new += ["--out", os.path.abspath(args.out)]
    if args.threads is not None:
        new += ["--threads", str(args.threads)]
    # relative paths in the recorded argv resolve against the original directory
    here = os.getcwd()
    os.chdir(man.get("cwd", here))
    try:
        return main(new)
    finally:
        os.chdir(here)


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "eval": cmd_eval, "curve": cmd_curve, "rerun": cmd_rerun}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: train, sweep, eval, curve or rerun")
        logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "threads", None) is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if getattr(args, "eval_samples", 1) < 1:
            raise UsageError("--eval-samples must be >= 1")
        return COMMANDS[args.command](args, argv)
    except UsageError as e:
        print(f"bream: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"bream: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"bream: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, FloatingPointError) as e:
        print(f"bream: numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
