"""Surrogate objective, hybrid score-function / pathwise gradient, SGD loop.

For one sampled rollout with masks ``a_1..a_T`` the estimator is the exact
gradient of

    S = sum_t stop(w_t) * log Pr(a_t | p_t)
        + Delta(scores, y)
        + lam * sum_t p_t . c

taken with the masks held fixed, where ``p_t`` are the (clamped) policy
probabilities, ``Delta`` the squared error against the one-hot target and
``w_t = Delta - b`` with ``b`` an optional moving-average baseline (0 when
disabled).

With ``cost_to_go`` enabled, ``w_t`` additionally carries
``lam * sum_{t' > t} p_t' . c``: later steps' expected cost depends on the
earlier sampled masks through ``z``, and that dependence is otherwise only
followed pathwise. The default (off) is the plain estimator, which is
unbiased for ``lam = 0`` or ``T = 1`` but not in general.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from ._io import atomic_open
from .acquisition import episode_rng, rollout
from .errors import ConfigError, DivergenceError
from .model import (
    DEFAULT_EPS,
    ModelParams,
    cell_backward,
    cell_forward,
    init_params,
    masked_input,
    policy_logits,
    predict_scores,
    sigmoid,
)

__all__ = [
    "TrainConfig",
    "GradientEstimate",
    "loss_delta",
    "surrogate_objective",
    "surrogate_scalar",
    "episode_gradient",
    "rollout_gradients",
    "score_weights",
    "batch_gradient",
    "sgd_step",
    "Adam",
    "train",
    "write_history",
]

log = logging.getLogger(__name__)

# stream tag separating training draws from evaluation draws under one seed
TRAIN_STREAM = 1


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.0
    T: int = 3
    p: int = 20
    M: int = 1
    learning_rate: float = 0.05
    epochs: int = 50
    batch_size: int = 32
    cell_type: str = "gru"
    epsilon_clamp: float = DEFAULT_EPS
    seed: int = 0
    baseline_enabled: bool = False
    baseline_decay: float = 0.9
    grad_clip_norm: Optional[float] = 5.0
    shared_policy: bool = False
    optimizer: str = "sgd"
    init_scale: Optional[float] = None
    cost_to_go: bool = False

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.M < 1 or self.T < 1 or self.p < 1:
            raise ConfigError(f"M, T and p must be >= 1 (got M={self.M}, T={self.T}, p={self.p})")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0 < self.epsilon_clamp < 0.5:
            raise ConfigError(f"epsilon_clamp must be in (0, 0.5), got {self.epsilon_clamp}")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ConfigError("grad_clip_norm must be positive or null")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.cell_type not in ("rnn", "gru"):
            raise ConfigError(f"cell_type must be 'rnn' or 'gru', got {self.cell_type!r}")
        if not 0 <= self.baseline_decay < 1:
            raise ConfigError("baseline_decay must be in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_file(cls, path, **overrides):
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)


@dataclass(frozen=True)
class GradientEstimate:
    """Gradient arrays keyed and shaped exactly like ``ModelParams.arrays``."""

    arrays: dict

    def norm(self):
        return math.sqrt(math.fsum(float(np.sum(a * a)) for a in self.arrays.values()))

    def flat(self):
        return np.concatenate([a.reshape(-1) for a in self.arrays.values()])

    def scaled(self, s):
        return GradientEstimate({k: a * s for k, a in self.arrays.items()})

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())


def loss_delta(scores, y):
    """Squared error to the one-hot target and its gradient w.r.t. ``scores``.

    Works on a single score vector or a batch (``y`` then an int array).
    """
    scores = np.asarray(scores, dtype=np.float64)
    target = np.zeros_like(scores)
    np.put_along_axis(target, np.asarray(y).reshape(scores.shape[:-1] + (1,)), 1.0, axis=-1)
    resid = scores - target
    return np.sum(resid**2, axis=-1), 2.0 * resid


def surrogate_objective(trace, y, lam, c=None):
    """``Delta + lam * sum_t a_t.c`` for one rollout; upper-bounds ``Delta + lam * abar.c``."""
    if c is not None:
        costs = np.asarray(getattr(c, "c", c), dtype=np.float64)
        sur = float(trace.masks.sum(axis=0) @ costs)
    else:
        sur = trace.surrogate_cost
    return float(loss_delta(trace.scores, y)[0]) + lam * sur


def _log_bernoulli(a, p):
    return np.sum(a * np.log(p) + (1.0 - a) * np.log1p(-p), axis=-1)


def surrogate_scalar(params, x, y, c, masks, lam, weight, eps=DEFAULT_EPS):
    """Value of the per-rollout scalar ``S`` for fixed ``masks`` and fixed score weights.

    ``weight`` is one number or one per step.

    Forward only; used as the finite-difference target for the analytic
    gradient.
    """
    costs = np.asarray(getattr(c, "c", c), dtype=np.float64)
    weight = np.broadcast_to(np.asarray(weight, dtype=np.float64), (params.T,))
    z = np.zeros(params.p)
    logp, cost = 0.0, 0.0
    for t in range(1, params.T + 1):
        pr = np.clip(sigmoid(policy_logits(params, t, z)), eps, 1.0 - eps)
        a = masks[t - 1]
        logp += weight[t - 1] * float(_log_bernoulli(a, pr))
        cost += float(pr @ costs)
        z = cell_forward(params, z, masked_input(x, a))[0]
    delta = float(loss_delta(predict_scores(params, z), y)[0])
    return logp + delta + lam * cost


def _zero_grads(params, R):
    return {k: np.zeros((R,) + a.shape) for k, a in params.arrays.items()}


def _backward(params, out, dscores, dprobs):
    """Per-row reverse pass. ``dscores``: (R, Y); ``dprobs``: (R, T, n) seeds on clamped probs."""
    R = dscores.shape[0]
    grads = _zero_grads(params, R)
    reps = out["reps"]
    grads["theta_W"] += np.einsum("ry,rp->ryp", dscores, reps[:, -1])
    grads["theta_b"] += dscores
    dz = np.einsum("ry,yp->rp", dscores, params["theta_W"])
    probs, live = out["probs"], out["live"]
    for t in range(params.T, 0, -1):
        dz = cell_backward(params, out["caches"][t - 1], dz, grads)
        h = params.head_index(t)
        pr = probs[:, t - 1]
        dlogit = dprobs[:, t - 1] * pr * (1.0 - pr) * live[:, t - 1]
        zt = reps[:, t - 1]
        grads["policy_W"][:, h] += np.einsum("ri,rp->rip", dlogit, zt)
        grads["policy_b"][:, h] += dlogit
        dz = dz + np.einsum("ri,ip->rp", dlogit, params["policy_W"][h])
    return grads


def score_weights(delta, probs, costs, lam, baseline=0.0, cost_to_go=False):
    """Detached per-step weights ``w_t`` of the log-likelihood terms, shape (R, T)."""
    w = np.repeat((delta - baseline)[:, None], probs.shape[1], axis=1)
    if cost_to_go and lam != 0.0:
        step_cost = np.einsum("rtn,n->rt", probs, costs)
        later = np.cumsum(step_cost[:, ::-1], axis=1)[:, ::-1] - step_cost
        w = w + lam * later
    return w


def _rows(params, X, Yl, U, lam, costs, eps, baseline, terms=False, cost_to_go=False):
    """Forward + backward for rollout rows. Returns per-row grads and per-row stats."""
    out = rollout(params, X, U, eps)
    delta, dscores = loss_delta(out["scores"], Yl)
    a, pr = out["masks"], out["probs"]
    weight = score_weights(delta, pr, costs, lam, baseline, cost_to_go)
    dlogp = a / pr - (1.0 - a) / (1.0 - pr)
    dscore_seed = weight[:, :, None] * dlogp
    dcost_seed = np.broadcast_to(lam * costs, pr.shape)
    grads = _backward(params, out, dscores, dscore_seed + dcost_seed)
    stats = {
        "delta": delta,
        "surrogate_cost": np.einsum("rtn,n->r", a, costs),
        "eval_cost": a.max(axis=1) @ costs,
        "correct": np.argmax(out["scores"], axis=-1) == Yl,
        "masks": a,
        "weights": weight,
    }
    if terms:
        zeros_s = np.zeros_like(dscores)
        zeros_p = np.zeros_like(pr)
        stats["term_grads"] = {
            "score": _backward(params, out, zeros_s, dscore_seed),
            "loss": _backward(params, out, dscores, zeros_p),
            "cost": _backward(params, out, zeros_s, dcost_seed + zeros_p),
        }
    return grads, stats


def _mean_rows(grads, n_rows):
    return {k: g.sum(axis=0) / n_rows for k, g in grads.items()}


def rollout_gradients(params, x, y, c, cfg, rng, baseline=0.0, terms=False):
    """Per-rollout gradients of ``S`` for ``cfg.M`` rollouts of one example.

    Returns ``(grads, stats)`` where every gradient array has a leading axis
    of length ``M``.
    """
    costs = np.asarray(getattr(c, "c", c), dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    U = rng.random((cfg.M, params.T, params.n))
    X = np.broadcast_to(x, (cfg.M, params.n))
    Yl = np.full(cfg.M, int(y))
    b = baseline if cfg.baseline_enabled else 0.0
    grads, stats = _rows(params, X, Yl, U, cfg.lam, costs, cfg.epsilon_clamp, b, terms, cfg.cost_to_go)
    stats["baseline"] = b
    return grads, stats


def episode_gradient(params, x, y, c, cfg, rng, baseline=0.0):
    """Average over ``cfg.M`` rollouts of the per-rollout gradient of ``S``.

    Returns ``(GradientEstimate, diagnostics)``; diagnostics hold the rollout
    losses, sampled masks, score weights and the norm of each of the three
    terms (score-function, loss pathwise, cost pathwise).
    """
    grads, stats = rollout_gradients(params, x, y, c, cfg, rng, baseline, terms=True)
    g = GradientEstimate(_mean_rows(grads, cfg.M))
    diag = {
        "delta": stats["delta"],
        "masks": stats["masks"],
        "weights": stats["weights"],
        "baseline": stats["baseline"],
        "term_norms": {
            name: GradientEstimate(_mean_rows(tg, cfg.M)).norm() for name, tg in stats["term_grads"].items()
        },
    }
    if not g.is_finite():
        raise DivergenceError("non-finite gradient estimate", diag)
    return g, diag


def batch_gradient(params, X, Yl, costs, cfg, uniforms, baseline=0.0, threads=1):
    """Mean gradient over a minibatch.

    ``uniforms`` is ``(B, M, T, n)``. Per-row results are computed in chunks
    (optionally on threads) and reduced in example order, so the result does
    not depend on ``threads``.
    """
    B = X.shape[0]
    M = cfg.M
    Xr = np.repeat(X, M, axis=0)
    Yr = np.repeat(Yl, M)
    Ur = uniforms.reshape(B * M, params.T, params.n)
    b = baseline if cfg.baseline_enabled else 0.0

    def work(sl):
        return _rows(params, Xr[sl], Yr[sl], Ur[sl], cfg.lam, costs, cfg.epsilon_clamp, b, False, cfg.cost_to_go)

    R = B * M
    if threads > 1 and R > 1:
        step = -(-R // threads)
        chunks = [slice(i, min(i + step, R)) for i in range(0, R, step)]
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(work, chunks))
        grads = {k: np.concatenate([p[0][k] for p in parts]) for k in params.arrays}
        stats = {k: np.concatenate([p[1][k] for p in parts]) for k in parts[0][1]}
    else:
        grads, stats = work(slice(0, R))
    # per-example mean over rollouts, then mean over examples
    g = {k: v.reshape((B, M) + v.shape[1:]).sum(axis=1).sum(axis=0) / (B * M) for k, v in grads.items()}
    return GradientEstimate(g), stats


def _clip(grad, clip):
    if clip is None:
        return grad
    norm = grad.norm()
    if norm > clip:
        return grad.scaled(clip / norm)
    return grad


def sgd_step(params, grad, cfg):
    """``params - lr * clip(grad)`` with global-L2-norm clipping."""
    grad = _clip(grad, cfg.grad_clip_norm)
    return params.replace({k: params[k] - cfg.learning_rate * grad.arrays[k] for k in params.arrays})


class Adam:
    """Adam on top of the same clipping rule; opt-in via ``optimizer="adam"``."""

    def __init__(self, cfg, beta1=0.9, beta2=0.999, eps=1e-8):
        self.cfg = cfg
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grad):
        grad = _clip(grad, self.cfg.grad_clip_norm)
        if self.m is None:
            self.m = {k: np.zeros_like(a) for k, a in params.arrays.items()}
            self.v = {k: np.zeros_like(a) for k, a in params.arrays.items()}
        self.t += 1
        lr = self.cfg.learning_rate
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        new = {}
        for k, a in params.arrays.items():
            g = grad.arrays[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            new[k] = a - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return params.replace(new)


class _SGD:
    def __init__(self, cfg):
        self.cfg = cfg

    def step(self, params, grad):
        return sgd_step(params, grad, self.cfg)


def train(train_set, valid_set, c, cfg: TrainConfig, threads=1, params: Optional[ModelParams] = None):
    """Minibatch training on the surrogate objective.

    Returns ``(params, history)``; history has one dict per epoch with
    ``epoch, train_objective, valid_accuracy, valid_mean_cost``. A NaN/Inf
    raises :class:`DivergenceError` whose diagnostics include the last
    finite parameters and the history so far.
    """
    from .evaluation import evaluate

    costs = np.asarray(getattr(c, "c", c), dtype=np.float64)
    X, Yl = train_set.features, train_set.labels
    n = X.shape[1]
    if costs.size != n:
        raise ConfigError(f"{costs.size} costs for {n} features")
    if valid_set is not None and valid_set.n != n:
        raise ConfigError("train and validation feature counts differ")
    if params is None:
        params = init_params(
            n, train_set.n_classes, cfg.p, cfg.T, cfg.cell_type, cfg.seed, cfg.init_scale, cfg.shared_policy
        )
    opt = Adam(cfg) if cfg.optimizer == "adam" else _SGD(cfg)
    ell = len(train_set)
    baseline = None
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = episode_rng(cfg.seed, TRAIN_STREAM, epoch, 0).permutation(ell)
        objs = []
        for start in range(0, ell, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            U = np.stack(
                [episode_rng(cfg.seed, TRAIN_STREAM, epoch, 1, int(k)).random((cfg.M, cfg.T, n)) for k in idx]
            )
            b = 0.0 if baseline is None else baseline
            try:
                grad, stats = batch_gradient(params, X[idx], Yl[idx], costs, cfg, U, b, threads)
                if not grad.is_finite():
                    raise DivergenceError("non-finite gradient")
                new_params = opt.step(params, grad)
            except (DivergenceError, FloatingPointError) as e:
                diag = {"epoch": epoch, "batch_start": start, "last_params": params, "history": history}
                diag.update(getattr(e, "diagnostics", {}))
                raise DivergenceError(f"training diverged at epoch {epoch}: {e}", diag) from e
            params = new_params
            objs.extend((stats["delta"] + cfg.lam * stats["surrogate_cost"]).tolist())
            mean_delta = float(np.mean(stats["delta"]))
            if cfg.baseline_enabled:
                baseline = (
                    mean_delta
                    if baseline is None
                    else cfg.baseline_decay * baseline + (1.0 - cfg.baseline_decay) * mean_delta
                )
        rec = {"epoch": epoch, "train_objective": math.fsum(objs) / max(len(objs), 1)}
        if valid_set is not None:
            pt = evaluate(params, valid_set, c, seed=cfg.seed, K=1, eps=cfg.epsilon_clamp, threads=threads)
            rec["valid_accuracy"] = pt.accuracy
            rec["valid_mean_cost"] = pt.mean_cost
        else:
            rec["valid_accuracy"] = float("nan")
            rec["valid_mean_cost"] = float("nan")
        history.append(rec)
        log.debug("epoch %d %s", epoch, rec)
    return params, history


HISTORY_FIELDS = ("epoch", "train_objective", "valid_accuracy", "valid_mean_cost")


def write_history(history, path):
    with atomic_open(path, "w") as fh:
        fh.write(",".join(HISTORY_FIELDS) + "\n")
        for rec in history:
            fh.write(",".join(repr(rec[k]) if k != "epoch" else str(rec[k]) for k in HISTORY_FIELDS) + "\n")
