"""Parameters and forward pass of the acquisition model.

The representation ``z`` lives in R^p and starts at zero. At every step a
recurrent cell (plain tanh RNN or GRU) folds the masked observation
``[x * a ; a]`` into ``z``; a per-step linear+sigmoid head gives Bernoulli
acquisition probabilities; a linear head maps the final ``z`` to class
scores.

All forward functions accept a leading batch axis. Matrix products use
``np.einsum`` without BLAS so that each row's result does not depend on how
many rows are processed together; that keeps threaded and serial runs
bit-identical.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_open
from .errors import ConfigError, DivergenceError

__all__ = [
    "ModelParams",
    "init_params",
    "masked_input",
    "aggregate",
    "policy_probs",
    "predict_scores",
    "predict_class",
    "save_params",
    "load_params",
    "sigmoid",
    "DEFAULT_EPS",
]

DEFAULT_EPS = 1e-6
FORMAT_NAME = "bream-params"
FORMAT_VERSION = 1

CELL_KEYS = {
    "rnn": ("W_u", "W_z", "b"),
    "gru": ("W_r", "U_r", "b_r", "W_q", "U_q", "b_q", "W_h", "U_h", "b_h"),
}
HEAD_KEYS = ("policy_W", "policy_b", "theta_W", "theta_b")


def param_shapes(cell_type, n, Y, p, T, shared_policy=False):
    """Ordered mapping key -> shape. This order is the serialization order."""
    if cell_type not in CELL_KEYS:
        raise ConfigError(f"cell_type must be 'rnn' or 'gru', got {cell_type!r}")
    d_in = 2 * n
    shapes = {}
    for k in CELL_KEYS[cell_type]:
        if k.startswith("W"):
            shapes[k] = (p, d_in)
        elif k.startswith("U"):
            shapes[k] = (p, p)
        else:
            shapes[k] = (p,)
    if cell_type == "rnn":
        shapes["W_z"] = (p, p)
    n_heads = 1 if shared_policy else T
    shapes["policy_W"] = (n_heads, n, p)
    shapes["policy_b"] = (n_heads, n)
    shapes["theta_W"] = (Y, p)
    shapes["theta_b"] = (Y,)
    return shapes


@dataclass(frozen=True)
class ModelParams:
    """Immutable parameter set; ``arrays`` holds every weight keyed as in :func:`param_shapes`."""

    cell_type: str
    n: int
    Y: int
    p: int
    T: int
    arrays: dict
    shared_policy: bool = False

    def __post_init__(self):
        for name, v in (("n", self.n), ("Y", self.Y), ("p", self.p), ("T", self.T)):
            if int(v) < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        if self.Y < 2:
            raise ConfigError(f"Y must be >= 2, got {self.Y}")
        shapes = param_shapes(self.cell_type, self.n, self.Y, self.p, self.T, self.shared_policy)
        if list(self.arrays) != list(shapes):
            raise ConfigError(f"parameter keys {list(self.arrays)} != expected {list(shapes)}")
        frozen = {}
        for k, shape in shapes.items():
            a = np.array(self.arrays[k], dtype=np.float64)
            if a.shape != shape:
                raise ConfigError(f"{k}: shape {a.shape} != expected {shape}")
            if not np.all(np.isfinite(a)):
                raise DivergenceError(f"{k}: non-finite parameter values")
            a.setflags(write=False)
            frozen[k] = a
        object.__setattr__(self, "arrays", frozen)

    def __getitem__(self, key):
        return self.arrays[key]

    @property
    def n_params(self):
        return sum(a.size for a in self.arrays.values())

    def head_index(self, t):
        """Policy head used at 1-based step ``t``."""
        if not 1 <= t <= self.T:
            raise ConfigError(f"step {t} outside [1, {self.T}]")
        return 0 if self.shared_policy else t - 1

    def flat(self):
        return np.concatenate([a.reshape(-1) for a in self.arrays.values()])

    def from_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise ConfigError(f"flat vector has {vec.size} entries, expected {self.n_params}")
        out, i = {}, 0
        for k, a in self.arrays.items():
            out[k] = vec[i : i + a.size].reshape(a.shape)
            i += a.size
        return self.replace(out)

    def replace(self, arrays):
        return ModelParams(self.cell_type, self.n, self.Y, self.p, self.T, arrays, self.shared_policy)

    def same_values(self, other):
        return (
            self.dims == other.dims
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
        )

    @property
    def dims(self):
        return (self.cell_type, self.n, self.Y, self.p, self.T, self.shared_policy)


def init_params(n, Y, p=20, T=3, cell_type="gru", seed=0, scale=None, shared_policy=False):
    """Uniform ``[-scale, scale]`` weights, zero biases.

    ``scale=None`` means ``1/sqrt(fan_in)`` separately for each matrix. Weights
    are drawn in serialization order from ``np.random.default_rng(seed)``.
    """
    if scale is not None and not scale > 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    if p < 1 or T < 1 or n < 1:
        raise ConfigError(f"invalid dimensions n={n}, p={p}, T={T}")
    shapes = param_shapes(cell_type, n, Y, p, T, shared_policy)
    rng = np.random.default_rng(seed)
    arrays = {}
    for k, shape in shapes.items():
        if len(shape) == 1 or k == "policy_b":
            arrays[k] = np.zeros(shape)
        else:
            s = scale if scale is not None else 1.0 / np.sqrt(shape[-1])
            arrays[k] = rng.uniform(-s, s, size=shape)
    return ModelParams(cell_type, n, Y, p, T, arrays, shared_policy)


def sigmoid(x):
    # split form avoids overflow in exp for large |x|
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def linear(v, W, b=None):
    """``v @ W.T (+ b)`` over a leading batch axis, without BLAS."""
    out = np.einsum("...j,ij->...i", v, W)
    return out if b is None else out + b


def masked_input(x, a):
    """``[x * a ; a]``: observed values (zeros elsewhere) followed by the mask."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if x.shape != a.shape:
        raise ConfigError(f"x shape {x.shape} != mask shape {a.shape}")
    return np.concatenate([x * a, a], axis=-1)


def cell_forward(params, z, u):
    """One recurrent update; returns ``(z_next, cache)`` where cache feeds :func:`cell_backward`."""
    P = params.arrays
    if params.cell_type == "rnn":
        z_next = np.tanh(linear(u, P["W_u"]) + linear(z, P["W_z"], P["b"]))
        return z_next, (z, u, z_next)
    r = sigmoid(linear(u, P["W_r"]) + linear(z, P["U_r"], P["b_r"]))
    q = sigmoid(linear(u, P["W_q"]) + linear(z, P["U_q"], P["b_q"]))
    h = np.tanh(linear(u, P["W_h"]) + linear(r * z, P["U_h"], P["b_h"]))
    z_next = (1.0 - q) * z + q * h
    return z_next, (z, u, r, q, h)


def cell_backward(params, cache, g, grads):
    """Backpropagate ``g = dL/dz_next`` through one cell.

    Per-row parameter gradients are *added* into ``grads`` (arrays with a
    leading batch axis). Returns ``dL/dz``; the input ``u`` is treated as
    constant (masks are fixed samples, ``x`` is data).
    """
    P = params.arrays
    outer = lambda a, b: np.einsum("ri,rj->rij", a, b)
    if params.cell_type == "rnn":
        z, u, z_next = cache
        d = g * (1.0 - z_next**2)
        grads["W_u"] += outer(d, u)
        grads["W_z"] += outer(d, z)
        grads["b"] += d
        return np.einsum("ri,ij->rj", d, P["W_z"])
    z, u, r, q, h = cache
    dz = g * (1.0 - q)
    dq = g * (h - z) * q * (1.0 - q)
    dh = g * q * (1.0 - h**2)
    rz = r * z
    grads["W_h"] += outer(dh, u)
    grads["U_h"] += outer(dh, rz)
    grads["b_h"] += dh
    drz = np.einsum("ri,ij->rj", dh, P["U_h"])
    dz += drz * r
    dr = drz * z * r * (1.0 - r)
    grads["W_q"] += outer(dq, u)
    grads["U_q"] += outer(dq, z)
    grads["b_q"] += dq
    dz += np.einsum("ri,ij->rj", dq, P["U_q"])
    grads["W_r"] += outer(dr, u)
    grads["U_r"] += outer(dr, z)
    grads["b_r"] += dr
    dz += np.einsum("ri,ij->rj", dr, P["U_r"])
    return dz


def aggregate(params, z, u):
    """Fold the masked observation ``u`` (length 2n) into representation ``z``."""
    return cell_forward(params, np.asarray(z, dtype=np.float64), np.asarray(u, dtype=np.float64))[0]


def policy_logits(params, t, z):
    h = params.head_index(t)
    return linear(z, params["policy_W"][h], params["policy_b"][h])


def policy_probs(params, t, z, eps=DEFAULT_EPS):
    """Per-feature acquisition probabilities at 1-based step ``t``, clamped to ``[eps, 1-eps]``."""
    return np.clip(sigmoid(policy_logits(params, t, z)), eps, 1.0 - eps)


def predict_scores(params, z):
    return linear(z, params["theta_W"], params["theta_b"])


def predict_class(scores):
    """Argmax with ties going to the lowest class index."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.any(np.isnan(scores)):
        raise DivergenceError("NaN in class scores")
    return np.argmax(scores, axis=-1)


def save_params(params, path):
    """Write an ``.npz`` container: header fields then weights in serialization order."""
    payload = {
        "format": np.array(FORMAT_NAME),
        "version": np.array(FORMAT_VERSION),
        "cell_type": np.array(params.cell_type),
        "dims": np.array([params.n, params.Y, params.p, params.T, int(params.shared_policy)]),
        "keys": np.array(list(params.arrays)),
    }
    payload.update(params.arrays)
    with atomic_open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_params(path):
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != FORMAT_NAME:
            raise ConfigError(f"{path}: not a parameter file")
        if int(z["version"]) != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported format version {int(z['version'])}")
        n, Y, p, T, shared = (int(v) for v in z["dims"])
        arrays = {str(k): z[str(k)] for k in z["keys"]}
        return ModelParams(str(z["cell_type"]), n, Y, p, T, arrays, bool(shared))
