"""Finite-width fully-connected networks with hand-derived backpropagation.

A network of depth L applies L affine maps: widths = (M_0, M_1, ..., M_{L-1}, 1)
where M_0 is the input dimension and the last map is a linear read-out to a
scalar, so the output is the depth-L pre-activation.  Weights are drawn
W^l_ij ~ N(0, sigma_w^2 / fan_in) and biases b^l_i ~ N(0, sigma_b^2) from
per-layer counter-based PRNG streams keyed by (seed, layer), which makes
re-initialization bit-for-bit reproducible.

The scalar output's parameter gradient is computed by the exact chain

    df/dW^l_ij = delta^l_i * x^{l-1}_j,   df/db^l_i = delta^l_i,
    delta^l = phi'(h^l) * (W^{l+1}^T delta^{l+1}),   delta^L = 1,

with the ReLU derivative at 0 taken to be 0.  Training is plain full-batch
gradient descent on the mean-squared error (mean over samples) with an
early-stopping rule on the loss sequence.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .activations import ActivationKind, dphi, phi
from .meanfield import InitHyper

CHECKPOINT_FORMAT = 1


class TrainingDivergenceError(Exception):
    """Training produced a non-finite loss; carries the step and partial log."""

    def __init__(self, step: int, losses: np.ndarray):
        self.step = step
        self.losses = losses
        super().__init__(f"non-finite loss at step {step}")


def layer_widths(input_dim: int, width: int, depth: int) -> tuple[int, ...]:
    """Widths of a constant-width network of the given depth (affine maps)."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    return (input_dim,) + (width,) * (depth - 1) + (1,)


@dataclass
class Mlp:
    """A finite fully-connected network with deterministic PRNG provenance."""

    widths: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hyper: InitHyper
    seed: int

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @property
    def activation(self) -> ActivationKind:
        return self.hyper.activation

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def param_layout(self) -> list[tuple[int, str, slice]]:
        """Flat parameter layout: layer-major, weights (row-major) before biases."""
        layout = []
        pos = 0
        for l, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            layout.append((l, "w", slice(pos, pos + w.size)))
            pos += w.size
            layout.append((l, "b", slice(pos, pos + b.size)))
            pos += b.size
        return layout

    def flat_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate((w.ravel(), b))
                               for w, b in zip(self.weights, self.biases)])


def init(widths: Sequence[int], hyper: InitHyper, seed: int) -> Mlp:
    """Draw a network with variances sigma_w^2/fan_in and sigma_b^2."""
    widths = tuple(int(m) for m in widths)
    if len(widths) < 2:
        raise ValueError("need at least an input dimension and the output layer")
    if any(m < 1 for m in widths):
        raise ValueError(f"widths must be positive, got {widths}")
    if widths[-1] != 1:
        raise ValueError("the final layer must map to a scalar output")
    streams = np.random.SeedSequence(seed).spawn(len(widths) - 1)
    weights, biases = [], []
    for l, child in enumerate(streams):
        fan_in, fan_out = widths[l], widths[l + 1]
        rng = np.random.Generator(np.random.Philox(child))
        weights.append(rng.standard_normal((fan_out, fan_in))
                       * np.sqrt(hyper.sigma_w_sq / fan_in))
        biases.append(rng.standard_normal(fan_out) * np.sqrt(hyper.sigma_b_sq))
    return Mlp(widths=widths, weights=weights, biases=biases, hyper=hyper, seed=seed)


@dataclass
class ForwardCache:
    """Batch activations and pre-activations kept for backpropagation.

    activations[l] is the (S, M_l) input to affine map l+1 (activations[0] is
    the raw batch); preacts[l] is the (S, M_{l+1}) pre-activation of map l+1.
    """

    activations: list[np.ndarray]
    preacts: list[np.ndarray]

    @property
    def outputs(self) -> np.ndarray:
        return self.preacts[-1][:, 0]


def forward_batch(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Outputs (S,) and the cache for a batch of inputs (S, M_0)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != net.widths[0]:
        raise ValueError(f"input dimension {x.shape[1]} != {net.widths[0]}")
    acts = [x]
    pres = []
    a = x
    last = net.depth - 1
    # overflow flows through as inf/nan and is checked by the consumers
    with np.errstate(over="ignore", invalid="ignore"):
        for l, (w, b) in enumerate(zip(net.weights, net.biases)):
            h = a @ w.T + b
            pres.append(h)
            if l < last:
                a = phi(net.activation, h)
                acts.append(a)
    return pres[-1][:, 0], ForwardCache(activations=acts, preacts=pres)


def forward(net: Mlp, x: np.ndarray) -> tuple[float, ForwardCache]:
    """Scalar output and cache for a single input vector."""
    out, cache = forward_batch(net, np.asarray(x, dtype=float)[None, :])
    return float(out[0]), cache


def backward_deltas(net: Mlp, cache: ForwardCache) -> list[np.ndarray]:
    """Per-layer output sensitivities delta^l = df/dh^l for the whole batch.

    Returns a list indexed l = 1..L of arrays (S, M_l); the last entry is the
    constant 1 of the linear read-out.
    """
    s = cache.preacts[-1].shape[0]
    deltas = [np.ones((s, 1))]
    d = deltas[0]
    for l in range(net.depth - 1, 0, -1):
        d = (d @ net.weights[l]) * dphi(net.activation, cache.preacts[l - 1])
        deltas.append(d)
    deltas.reverse()
    return deltas


def gradient(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Exact flat gradient of the scalar output with respect to all parameters.

    Layout is layer-major with weights (row-major) before biases, matching
    Mlp.param_layout().
    """
    _, cache = forward(net, x)
    deltas = backward_deltas(net, cache)
    parts = []
    for l in range(net.depth):
        d = deltas[l][0]
        a = cache.activations[l][0]
        parts.append(np.outer(d, a).ravel())
        parts.append(d)
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Training.

@dataclass(frozen=True)
class TrainConfig:
    """Full-batch gradient-descent settings; defaults follow the reference
    protocol (constant learning rate 1e-5, early stop when the loss fails to
    improve by 1e-7 over 100 consecutive steps, at most 1e5 steps)."""

    learning_rate: float = 1e-5
    max_steps: int = 100_000
    early_stop_delta: float = 1e-7
    early_stop_patience: int = 100

    def __post_init__(self):
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be non-negative")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")


@dataclass
class TrainLog:
    losses: np.ndarray
    stop_reason: str
    steps_run: int


def mse_loss(outputs: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean((outputs - targets) ** 2))


def train_full_batch(net: Mlp, x: np.ndarray, y: np.ndarray, cfg: TrainConfig,
                     snapshot_steps: Sequence[int] = (),
                     on_snapshot: Callable[[int, Mlp], None] | None = None) -> TrainLog:
    """Full-batch gradient descent on MSE = mean_s (f(x_s) - y_s)^2.

    Mutates the network in place.  on_snapshot(step, net) is invoked at each
    requested step index (0 = before any update) and after the final step.
    Raises TrainingDivergenceError on a non-finite loss, with the partial
    loss log attached.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if x.ndim != 2 or x.shape[0] != len(y) or len(y) < 1:
        raise ValueError("need matching, non-empty inputs and targets")
    s = len(y)
    wanted = set(int(t) for t in snapshot_steps)
    snapped: set[int] = set()

    def snapshot(step: int, force: bool = False):
        if on_snapshot is None or step in snapped:
            return
        if force or step in wanted:
            on_snapshot(step, net)
            snapped.add(step)

    snapshot(0)
    losses = np.empty(cfg.max_steps)
    best = np.inf
    stale = 0
    reason = "max_steps"
    step = 0
    for step in range(1, cfg.max_steps + 1):
        out, cache = forward_batch(net, x)
        loss = mse_loss(out, y)
        if not np.isfinite(loss):
            raise TrainingDivergenceError(step, losses[:step - 1].copy())
        losses[step - 1] = loss

        # backprop of dL/dh^L = 2 (f - y) / S through the chain
        with np.errstate(over="ignore", invalid="ignore"):
            d = (2.0 / s) * (out - y)[:, None]
            for l in range(net.depth - 1, -1, -1):
                grad_w = d.T @ cache.activations[l]
                grad_b = d.sum(axis=0)
                if l > 0:
                    d = (d @ net.weights[l]) * dphi(net.activation, cache.preacts[l - 1])
                net.weights[l] -= cfg.learning_rate * grad_w
                net.biases[l] -= cfg.learning_rate * grad_b

        snapshot(step)
        if best - loss >= cfg.early_stop_delta:
            best = loss
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                reason = "early_stop"
                break

    snapshot(step, force=True)
    return TrainLog(losses=losses[:step].copy(), stop_reason=reason, steps_run=step)


# ---------------------------------------------------------------------------
# Checkpoints.

def save_checkpoint(net: Mlp, path) -> None:
    """Versioned binary dump of widths + flat parameters; round-trip exact."""
    np.savez(path,
             format_version=np.int64(CHECKPOINT_FORMAT),
             widths=np.asarray(net.widths, dtype=np.int64),
             params=net.flat_params(),
             sigma_w_sq=np.float64(net.hyper.sigma_w_sq),
             sigma_b_sq=np.float64(net.hyper.sigma_b_sq),
             activation=np.str_(net.activation.value),
             seed=np.int64(net.seed))


def load_checkpoint(path) -> Mlp:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {version}")
        widths = tuple(int(m) for m in data["widths"])
        flat = np.asarray(data["params"], dtype=float)
        hyper = InitHyper(float(data["sigma_w_sq"]), float(data["sigma_b_sq"]),
                          ActivationKind.from_name(str(data["activation"])))
        seed = int(data["seed"])
    weights, biases = [], []
    pos = 0
    for l in range(len(widths) - 1):
        n_w = widths[l + 1] * widths[l]
        weights.append(flat[pos:pos + n_w].reshape(widths[l + 1], widths[l]).copy())
        pos += n_w
        biases.append(flat[pos:pos + widths[l + 1]].copy())
        pos += widths[l + 1]
    if pos != len(flat):
        raise ValueError("checkpoint parameter count does not match widths")
    return Mlp(widths=widths, weights=weights, biases=biases, hyper=hyper, seed=seed)
