"""Accuracy/cost evaluation, Pareto-front selection and the train/valid/test sweep."""

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_open
from .acquisition import content_key, episode_rng, rollout
from .errors import ConfigError, DataError, DivergenceError
from .model import DEFAULT_EPS, save_params

__all__ = [
    "ParetoPoint",
    "evaluate",
    "pareto_front",
    "make_curve",
    "interpolate_accuracy",
    "sweep",
    "write_curve",
    "read_curve",
]

log = logging.getLogger(__name__)

EVAL_STREAM = 2
CURVE_FIELDS = ("model_id", "mean_cost", "normalized_cost", "accuracy")


@dataclass(frozen=True)
class ParetoPoint:
    mean_cost: float
    accuracy: float
    model_id: str = ""
    normalized_cost: float = float("nan")

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if not self.mean_cost >= 0.0:
            raise ValueError(f"mean_cost {self.mean_cost} must be >= 0")

    def cost(self, normalized=False):
        return self.normalized_cost if normalized else self.mean_cost


def _example_uniforms(X, seed, K, T):
    n = X.shape[1]
    return np.stack([episode_rng(seed, EVAL_STREAM, *content_key(x)).random((K, T, n)) for x in X])


def evaluate(params, dataset, c, seed=0, K=1, eps=DEFAULT_EPS, threads=1, model_id="", chunk=4096):
    """Run ``K`` sampled episodes per example.

    Each example's random stream is keyed by the master seed and a hash of its
    feature values, so the result does not depend on row order or on how rows
    are batched across threads.
    """
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    costs = np.asarray(getattr(c, "c", c), dtype=np.float64)
    X, y = dataset.features, dataset.labels
    if X.shape[1] != params.n or costs.size != params.n:
        raise DataError(
            f"model expects {params.n} features; dataset has {X.shape[1]} and cost vector {costs.size}"
        )
    U = _example_uniforms(X, seed, K, params.T).reshape(-1, params.T, params.n)
    Xr = np.repeat(X, K, axis=0)
    yr = np.repeat(y, K)

    def work(sl):
        out = rollout(params, Xr[sl], U[sl], eps)
        pred = np.argmax(out["scores"], axis=-1)
        return pred == yr[sl], out["masks"].max(axis=1) @ costs

    R = Xr.shape[0]
    chunks = [slice(i, min(i + chunk, R)) for i in range(0, R, chunk)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(work, chunks))
    else:
        parts = [work(sl) for sl in chunks]
    correct = np.concatenate([p[0] for p in parts])
    ecost = np.concatenate([p[1] for p in parts])
    mean_cost = math.fsum(ecost) / R
    total = float(costs.sum())
    return ParetoPoint(mean_cost, int(correct.sum()) / R, str(model_id), mean_cost / total)


def _id_key(mid):
    return (0, int(mid)) if isinstance(mid, int) or str(mid).isdigit() else (1, str(mid))


def pareto_front(points):
    """Non-dominated subset sorted by cost.

    ``A`` dominates ``B`` iff ``A.accuracy >= B.accuracy`` and
    ``A.mean_cost <= B.mean_cost`` with at least one strict. Identical
    coordinate pairs keep the lowest ``model_id``.
    """
    if not points:
        raise ValueError("pareto_front needs at least one point")
    ordered = sorted(points, key=lambda q: (q.mean_cost, -q.accuracy, _id_key(q.model_id)))
    front, best = [], -math.inf
    for q in ordered:
        if q.accuracy > best:
            front.append(q)
            best = q.accuracy
    return front


def make_curve(points, normalized=False):
    """Sort by cost; merge equal costs keeping the best accuracy so costs strictly increase."""
    out = []
    for q in sorted(points, key=lambda q: (q.cost(normalized), -q.accuracy, _id_key(q.model_id))):
        if out and out[-1].cost(normalized) == q.cost(normalized):
            continue
        out.append(q)
    return out


def interpolate_accuracy(curve, cost_level, normalized=False):
    """Piecewise-linear accuracy at ``cost_level``; clamped to the end points outside the curve."""
    if not curve:
        raise ValueError("empty curve")
    curve = make_curve(curve, normalized)
    xs = np.array([q.cost(normalized) for q in curve])
    ys = np.array([q.accuracy for q in curve])
    return float(np.interp(cost_level, xs, ys))


def write_curve(points, path):
    with atomic_open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_FIELDS)
        for q in points:
            w.writerow([q.model_id, repr(float(q.mean_cost)), repr(float(q.normalized_cost)), repr(float(q.accuracy))])


def read_curve(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as e:
        raise DataError(f"cannot read curve {path}: {e}") from None
    try:
        return [
            ParetoPoint(float(r["mean_cost"]), float(r["accuracy"]), r["model_id"], float(r["normalized_cost"]))
            for r in rows
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed curve file {path}: {e}") from None


def _config_key(cfg):
    return json.dumps(cfg.to_dict(), sort_keys=True)


def sweep(train_set, valid_set, test_set, c, grid, out_dir=None, eval_seed=0, K=1, threads=1):
    """Train every config, select the validation Pareto front, re-evaluate the front on test.

    Returns ``(valid_front, test_curve, records)``. ``records`` has one entry
    per grid config (status, validation point, artifact paths). Diverged
    configs are logged and dropped; if every config diverges the sweep raises.
    """
    from .training import TrainConfig, train, write_history

    grid = list(grid)
    if not grid:
        raise ConfigError("empty sweep grid")
    for cfg in grid:
        if not isinstance(cfg, TrainConfig):
            raise ConfigError(f"grid entries must be TrainConfig, got {type(cfg).__name__}")
    ids = [f"m{i:03d}" for i in range(len(grid))]
    out_dir = Path(out_dir) if out_dir is not None else None

    # identical configs train identically; train each distinct config once
    first_of = {}
    for mid, cfg in zip(ids, grid):
        first_of.setdefault(_config_key(cfg), mid)
    unique = [(mid, cfg) for mid, cfg in zip(ids, grid) if first_of[_config_key(cfg)] == mid]

    def job(item):
        mid, cfg = item
        try:
            params, hist = train(train_set, valid_set, c, cfg)
            return mid, params, hist, None
        except DivergenceError as e:
            return mid, None, e.diagnostics.get("history", []), str(e)

    if threads > 1 and len(unique) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(job, unique))
    else:
        results = [job(u) for u in unique]
    trained = {mid: (params, hist, err) for mid, params, hist, err in results}

    records, valid_points, models = [], [], {}
    for mid, cfg in zip(ids, grid):
        src = first_of[_config_key(cfg)]
        params, hist, err = trained[src]
        rec = {"model_id": mid, "config": cfg.to_dict(), "same_as": src if src != mid else ""}
        if err is not None:
            log.warning("config %s diverged and is excluded: %s", mid, err)
            rec["status"] = "diverged"
            records.append(rec)
            continue
        pt = evaluate(params, valid_set, c, seed=eval_seed, K=K, eps=cfg.epsilon_clamp, threads=threads, model_id=mid)
        rec.update(status="ok", valid_mean_cost=pt.mean_cost, valid_accuracy=pt.accuracy)
        if out_dir is not None and src == mid:
            mdir = out_dir / "models" / mid
            save_params(params, mdir / "params.npz")
            write_history(hist, mdir / "history.csv")
            with atomic_open(mdir / "config.json", "w") as fh:
                json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        if out_dir is not None:
            rec["params_path"] = str(Path("models") / src / "params.npz")
            rec["history_path"] = str(Path("models") / src / "history.csv")
        records.append(rec)
        valid_points.append(pt)
        models[mid] = (params, cfg)

    if not valid_points:
        raise DivergenceError("every sweep configuration diverged", {"records": records})
    front = pareto_front(valid_points)
    test_points = []
    for q in front:
        params, cfg = models[q.model_id]
        test_points.append(
            evaluate(params, test_set, c, seed=eval_seed, K=K, eps=cfg.epsilon_clamp, threads=threads, model_id=q.model_id)
        )
    test_curve = sorted(test_points, key=lambda q: (q.mean_cost, _id_key(q.model_id)))

    if out_dir is not None:
        write_curve(front, out_dir / "valid_front.csv")
        write_curve(test_curve, out_dir / "test_curve.csv")
        _write_manifest(records, out_dir / "sweep_manifest.csv")
    return front, test_curve, records


MANIFEST_FIELDS = (
    "model_id",
    "status",
    "same_as",
    "lambda",
    "valid_mean_cost",
    "valid_accuracy",
    "params_path",
    "history_path",
    "config",
)


def _write_manifest(records, path):
    with atomic_open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            row = dict(r)
            row["lambda"] = r["config"]["lambda"]
            row["config"] = json.dumps(r["config"], sort_keys=True)
            w.writerow([repr(row[k]) if isinstance(row.get(k), float) else row.get(k, "") for k in MANIFEST_FIELDS])
