"""Minimal differentiable function approximation on numpy.

Multilayer perceptrons with tanh hidden units and a linear or sigmoid output
head, trained by an adaptive-moment (Adam) optimizer. Gradients are written
out by hand and guarded by a central finite-difference checker, so nothing
here depends on an autodiff framework and every training run is bit-for-bit
reproducible from its seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import NumericError, ValidationError, make_rng

HEADS = ("linear", "sigmoid")


@dataclass
class Mlp:
    """Fully connected net: tanh hidden layers, linear or sigmoid output head."""

    sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str = "linear"

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, head: str = "linear") -> "Mlp":
        """Glorot-uniform initialization drawn from ``rng``."""
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2:
            raise ValidationError("an Mlp needs at least an input and an output layer")
        if head not in HEADS:
            raise ValidationError(f"unknown head {head!r}")
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(sizes=sizes, weights=weights, biases=biases, head=head)

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "Mlp":
        return Mlp(
            sizes=self.sizes,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            head=self.head,
        )

    def flat_params(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights] + [b.ravel() for b in self.biases])

    def set_flat_params(self, flat: np.ndarray) -> None:
        i = 0
        for w in self.weights:
            w[...] = flat[i : i + w.size].reshape(w.shape)
            i += w.size
        for b in self.biases:
            b[...] = flat[i : i + b.size]
            i += b.size


def _forward_cached(net: Mlp, x: np.ndarray):
    """Run the net on a batch, returning pre-head output and all activations."""
    acts = [x]
    h = x
    n_layers = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        h = np.tanh(z) if i < n_layers - 1 else z
        acts.append(h)
    if net.head == "sigmoid":
        out = 1.0 / (1.0 + np.exp(-h))
    else:
        out = h
    return out, acts


def forward(net: Mlp, x) -> np.ndarray:
    """Evaluate the net on a single input vector or a (n, in_dim) batch.

    A sigmoid head keeps every output strictly inside (0, 1).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValidationError(f"input shape {x.shape} incompatible with net input dim {net.in_dim}")
    out, _ = _forward_cached(net, x)
    return out[0] if single else out


def backprop(net: Mlp, x: np.ndarray, d_out: np.ndarray):
    """Backpropagate an upstream gradient d(loss)/d(output) through the net.

    Returns ``(param_grads, d_input)`` where param_grads is a list of
    (dW, db) pairs in layer order and d_input is d(loss)/d(input), both for
    the batch as given (no averaging is applied here).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
        d_out = np.asarray(d_out, dtype=np.float64)[None, :]
    out, acts = _forward_cached(net, x)
    delta = np.asarray(d_out, dtype=np.float64)
    if net.head == "sigmoid":
        delta = delta * out * (1.0 - out)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.weights)
    n_layers = len(net.weights)
    for i in range(n_layers - 1, -1, -1):
        a_prev = acts[i]
        if i < n_layers - 1:
            # delta currently refers to the tanh output of layer i; pull it
            # back through the nonlinearity.
            delta = delta * (1.0 - acts[i + 1] ** 2)
        grads[i] = (a_prev.T @ delta, delta.sum(axis=0))
        delta = delta @ net.weights[i].T
    return grads, delta


def grad(net: Mlp, inputs, targets):
    """Loss and parameter gradients for mean squared error on a batch.

    The loss is ``mean_i 0.5 * ||f(x_i) - t_i||^2``. Raises NumericError with
    batch diagnostics if the loss is not finite.
    """
    x = np.asarray(inputs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if t.ndim == 1:
        t = t.reshape(x.shape[0], -1)
    if x.shape[0] == 0:
        raise ValidationError("empty batch")
    if t.shape != (x.shape[0], net.out_dim):
        raise ValidationError(f"target shape {t.shape} incompatible with output dim {net.out_dim}")
    out, _ = _forward_cached(net, x)
    err = out - t
    loss = float(0.5 * np.mean(np.sum(err**2, axis=1)))
    if not np.isfinite(loss):
        raise NumericError(
            f"non-finite MSE loss (batch size {x.shape[0]}, "
            f"|x|max={np.max(np.abs(x)):.3g}, |t|max={np.max(np.abs(t)):.3g})"
        )
    grads, _ = backprop(net, x, err / x.shape[0])
    return loss, grads


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators for one net."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m: list[tuple[np.ndarray, np.ndarray]]
    v: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def init(cls, net: Mlp, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        zeros = lambda: [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)]
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0, m=zeros(), v=zeros())


def sgd_step(net: Mlp, state: AdamState, grads) -> None:
    """Apply one adaptive-moment update in place; increments the step count."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for i, (gw, gb) in enumerate(grads):
        for acc_i, g, param in ((0, gw, net.weights[i]), (1, gb, net.biases[i])):
            m = state.m[i][acc_i]
            v = state.v[i][acc_i]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g**2
            param -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def grad_check(net: Mlp, rng: np.random.Generator, n_points: int = 4, eps: float = 1e-5, grad_fn=grad) -> float:
    """Max relative error of analytic vs. central finite-difference gradients.

    Perturbs every parameter by +/- eps around random inputs/targets drawn
    from ``rng`` and compares against the gradients produced by ``grad_fn``
    (injectable so tests can probe a deliberately corrupted gradient).
    """
    x = rng.normal(size=(n_points, net.in_dim))
    t = rng.normal(size=(n_points, net.out_dim))
    if net.head == "sigmoid":
        t = 1.0 / (1.0 + np.exp(-t))
    _, grads = grad_fn(net, x, t)
    # flat_params orders all weights then all biases; lay gradients out to match.
    analytic = np.concatenate(
        [gw.ravel() for gw, _ in grads] + [gb.ravel() for _, gb in grads]
    )

    theta = net.flat_params()
    numeric = np.empty_like(theta)
    probe = net.copy()
    for j in range(theta.size):
        bumped = theta.copy()
        bumped[j] = theta[j] + eps
        probe.set_flat_params(bumped)
        up = _mse_loss(probe, x, t)
        bumped[j] = theta[j] - eps
        probe.set_flat_params(bumped)
        down = _mse_loss(probe, x, t)
        numeric[j] = (up - down) / (2 * eps)
    probe.set_flat_params(theta)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _mse_loss(net: Mlp, x: np.ndarray, t: np.ndarray) -> float:
    out, _ = _forward_cached(net, x)
    return float(0.5 * np.mean(np.sum((out - t) ** 2, axis=1)))


# ---------------------------------------------------------------------------
# Checkpoints: JSON with an architecture header, exact float round trip.
# ---------------------------------------------------------------------------


def mlp_to_dict(net: Mlp) -> dict:
    return {
        "schema": "mlp-v1",
        "sizes": list(net.sizes),
        "head": net.head,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def mlp_from_dict(data: dict) -> Mlp:
    if data.get("schema") != "mlp-v1":
        raise ValidationError(f"unknown checkpoint schema {data.get('schema')!r}")
    net = Mlp(
        sizes=tuple(data["sizes"]),
        weights=[np.asarray(w, dtype=np.float64) for w in data["weights"]],
        biases=[np.asarray(b, dtype=np.float64) for b in data["biases"]],
        head=data["head"],
    )
    for w, (fi, fo) in zip(net.weights, zip(net.sizes[:-1], net.sizes[1:])):
        if w.shape != (fi, fo):
            raise ValidationError(f"checkpoint weight shape {w.shape} mismatches header {(fi, fo)}")
    return net


def save_mlp(net: Mlp, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mlp_to_dict(net), fh, sort_keys=True)


def load_mlp(path) -> Mlp:
    with open(path, "r", encoding="utf-8") as fh:
        return mlp_from_dict(json.load(fh))


@dataclass(frozen=True)
class BoxScaler:
    """Affine map from an axis-aligned box onto [-1, 1]^d (and back)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValidationError("scaler bounds must satisfy hi > lo elementwise")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * (np.asarray(x, dtype=np.float64) - self.lo) / (self.hi - self.lo) - 1.0

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "BoxScaler":
        return cls(lo=data["lo"], hi=data["hi"])
