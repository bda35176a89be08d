"""Episode rollout: sample masks step by step, update the representation, predict.

Random numbers come from numpy's ``Generator`` (PCG64). A mask of ``n``
features consumes exactly ``n`` doubles from ``rng.random`` in feature-index
order, steps are consumed in order, and rollouts of the same example are
consumed one after another. Feature ``i`` is acquired iff ``u_i < p_i``.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError
from .model import (
    DEFAULT_EPS,
    cell_forward,
    masked_input,
    policy_logits,
    predict_class,
    predict_scores,
    sigmoid,
)

__all__ = [
    "AcquisitionTrace",
    "sample_mask",
    "run_episode",
    "predict",
    "rollout",
    "episode_rng",
    "content_key",
    "format_trace",
]


@dataclass(frozen=True)
class AcquisitionTrace:
    masks: np.ndarray  # (T, n) in {0, 1}
    probs: np.ndarray  # (T, n)
    reps: np.ndarray  # (T + 1, p), reps[0] == 0
    scores: np.ndarray  # (Y,)
    costs: np.ndarray  # (n,)

    @property
    def T(self):
        return self.masks.shape[0]

    @property
    def abar(self):
        return self.masks.max(axis=0)

    @property
    def surrogate_cost(self):
        return float(self.masks.sum(axis=0) @ self.costs)

    @property
    def eval_cost(self):
        return float(self.abar @ self.costs)

    @property
    def prediction(self):
        return int(predict_class(self.scores))


def episode_rng(seed, *key):
    """Independent generator for one example, derived from the master seed and ``key`` ints."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *key]))


def content_key(x):
    """Four 32-bit words hashed from the example's feature bytes."""
    h = hashlib.sha256(np.ascontiguousarray(x, dtype=np.float64).tobytes()).digest()
    return [int.from_bytes(h[i : i + 4], "little") for i in range(0, 16, 4)]


def sample_mask(probs, rng):
    """Independent Bernoulli draw per component."""
    probs = np.asarray(probs, dtype=np.float64)
    return (rng.random(probs.shape[-1]) < probs).astype(np.float64)


def _clamped(params, t, z, eps):
    s = sigmoid(policy_logits(params, t, z))
    return np.clip(s, eps, 1.0 - eps), (s > eps) & (s < 1.0 - eps)


def rollout(params, X, U, eps=DEFAULT_EPS):
    """Batched episodes with pre-drawn uniforms.

    ``X`` is ``(R, n)``, ``U`` is ``(R, T, n)``. Returns a dict with masks,
    probs, clamp-activity flags, reps ``(R, T+1, p)``, per-step cell caches
    and final scores. Row ``r`` equals ``run_episode`` fed the same
    uniforms.
    """
    R = X.shape[0]
    z = np.zeros((R, params.p))
    masks, probs, live, reps, caches = [], [], [], [z], []
    for t in range(1, params.T + 1):
        pr, lv = _clamped(params, t, z, eps)
        a = (U[:, t - 1, :] < pr).astype(np.float64)
        z, cache = cell_forward(params, z, masked_input(X, a))
        masks.append(a)
        probs.append(pr)
        live.append(lv)
        reps.append(z)
        caches.append(cache)
    scores = predict_scores(params, z)
    if not np.all(np.isfinite(scores)):
        raise DivergenceError("non-finite scores in forward pass")
    return {
        "masks": np.stack(masks, axis=1),
        "probs": np.stack(probs, axis=1),
        "live": np.stack(live, axis=1),
        "reps": np.stack(reps, axis=1),
        "caches": caches,
        "scores": scores,
    }


def run_episode(params, x, c, rng, eps=DEFAULT_EPS):
    x = np.asarray(x, dtype=np.float64)
    costs = np.asarray(getattr(c, "c", c), dtype=np.float64)
    z = np.zeros(params.p)
    masks, probs, reps = [], [], [z]
    for t in range(1, params.T + 1):
        pr, _ = _clamped(params, t, z, eps)
        a = sample_mask(pr, rng)
        z = cell_forward(params, z, masked_input(x, a))[0]
        masks.append(a)
        probs.append(pr)
        reps.append(z)
    scores = predict_scores(params, z)
    if not np.all(np.isfinite(scores)):
        raise DivergenceError("non-finite scores in forward pass", {"reps": np.array(reps)})
    return AcquisitionTrace(np.array(masks), np.array(probs), np.array(reps), scores, costs)


def predict(params, x, c, rng, eps=DEFAULT_EPS):
    """Class id and evaluation cost (each acquired feature paid once) for one sampled episode."""
    tr = run_episode(params, x, c, rng, eps)
    return tr.prediction, tr.eval_cost


def format_trace(tr, label=None):
    lines = []
    if label is not None:
        lines.append(f"# example {label}")
    for t in range(tr.T):
        probs = " ".join(f"{v:.4f}" for v in tr.probs[t])
        mask = "".join(str(int(v)) for v in tr.masks[t])
        lines.append(f"step {t + 1} probs {probs}")
        lines.append(f"step {t + 1} mask {mask} cost {float(tr.masks[t] @ tr.costs):.6g}")
    lines.append(
        f"abar {''.join(str(int(v)) for v in tr.abar)} "
        f"surrogate_cost {tr.surrogate_cost:.6g} eval_cost {tr.eval_cost:.6g} "
        f"prediction {tr.prediction}"
    )
    return "\n".join(lines)
