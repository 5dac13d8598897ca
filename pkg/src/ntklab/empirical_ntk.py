"""Empirical NTK Gram matrices and the two finite-width diagnostics.

The empirical kernel of a network at parameters w is the Gram matrix of
output gradients, Theta(x_i, x_j) = grad_w f(x_i) . grad_w f(x_j).  Because
each weight-block gradient is the outer product delta^l x^{l-1}^T, the Gram
matrix decomposes layerwise into Hadamard products of small Gram factors,

    Theta = sum_l (D_l D_l^T) * (A_{l-1} A_{l-1}^T + 11^T),

(D_l the batch of delta^l rows, A_{l-1} the batch of activations, 11^T the
bias block), which needs only O(S * max_l M_l) working memory instead of the
S x P gradient matrix.

Diagnostics:
  * initialization variance ratio  E[Theta^0(x,x)^2] / E[Theta^0(x,x)]^2,
    estimated over independent re-initializations (>= 1, and == 1 iff the
    kernel is deterministic at initialization);
  * training drift  ||Theta^t - Theta^0||_F / ||Theta^0||_F recorded at
    snapshot steps during full-batch gradient descent.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import finite_net
from .finite_net import Mlp, TrainConfig, TrainingDivergenceError
from .meanfield import InitHyper

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12
MAX_FAILED_SEED_FRACTION = 0.01


@dataclass(frozen=True)
class KernelProvenance:
    kind: str  # "empirical" | "theoretical" | "nngp"
    seed: int | None = None
    step: int | None = None


@dataclass
class KernelMatrix:
    matrix: np.ndarray
    provenance: KernelProvenance

    @property
    def n_points(self) -> int:
        return self.matrix.shape[0]


def empirical_kernel(net: Mlp, x: np.ndarray, step: int | None = None) -> KernelMatrix:
    """Gram matrix of output gradients over the batch x (S, M_0)."""
    _, cache = finite_net.forward_batch(net, x)
    s = cache.activations[0].shape[0]
    theta = np.zeros((s, s))
    with np.errstate(over="ignore", invalid="ignore"):
        deltas = finite_net.backward_deltas(net, cache)
        for l in range(net.depth):
            d_gram = deltas[l] @ deltas[l].T
            a = cache.activations[l]
            theta += d_gram * (a @ a.T + 1.0)
    if not np.all(np.isfinite(theta)):
        raise FloatingPointError("empirical kernel is not finite")
    theta = 0.5 * (theta + theta.T)
    return KernelMatrix(theta, KernelProvenance("empirical", seed=net.seed, step=step))


def self_kernel(net: Mlp, x: np.ndarray) -> float:
    """Theta(x, x) = ||grad_w f(x)||^2 for a single input, without forming gradients."""
    _, cache = finite_net.forward_batch(net, np.asarray(x, float)[None, :])
    deltas = finite_net.backward_deltas(net, cache)
    total = 0.0
    for l in range(net.depth):
        d = deltas[l][0]
        a = cache.activations[l][0]
        total += float(d @ d) * (float(a @ a) + 1.0)
    return total


def naive_kernel(net: Mlp, x: np.ndarray) -> KernelMatrix:
    """Reference Gram matrix from explicitly stacked gradient vectors."""
    x = np.atleast_2d(np.asarray(x, float))
    grads = np.stack([finite_net.gradient(net, row) for row in x])
    theta = grads @ grads.T
    return KernelMatrix(0.5 * (theta + theta.T),
                        KernelProvenance("empirical", seed=net.seed))


def streaming_kernel(net: Mlp, x: np.ndarray) -> KernelMatrix:
    """Pairwise-streaming Gram matrix holding at most two gradient vectors.

    Recomputes gradients per pair; intended for parameter counts where even
    the layerwise decomposition's activation buffers are unwelcome.
    """
    x = np.atleast_2d(np.asarray(x, float))
    s = x.shape[0]
    theta = np.empty((s, s))
    for i in range(s):
        g_i = finite_net.gradient(net, x[i])
        theta[i, i] = g_i @ g_i
        for j in range(i + 1, s):
            g_j = finite_net.gradient(net, x[j])
            theta[i, j] = theta[j, i] = g_i @ g_j
    return KernelMatrix(theta, KernelProvenance("empirical", seed=net.seed))


# ---------------------------------------------------------------------------
# Initialization variance ratio.

@dataclass
class VarianceRatioStat:
    """Moments of Theta^0(x, x) across re-initializations.

    ratio = second_moment / mean^2 >= 1 up to Monte-Carlo noise;
    standard_error is a jackknife estimate for the ratio.
    """

    ratio: float
    n_seeds: int
    mean: float
    second_moment: float
    standard_error: float
    n_failed: int = 0


def replicate_seeds(seed: int, n: int) -> np.ndarray:
    """Derived per-replicate seeds; deterministic in (seed, n)."""
    return np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)


def default_probe(dim: int, seed: int) -> np.ndarray:
    """Fixed unit-norm probe vector derived from the experiment seed."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 0x9e37))))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _jackknife_ratio_se(values: np.ndarray) -> float:
    n = len(values)
    total = values.sum()
    total_sq = (values ** 2).sum()
    loo_mean = (total - values) / (n - 1)
    loo_m2 = (total_sq - values ** 2) / (n - 1)
    loo_ratio = loo_m2 / loo_mean ** 2
    return float(np.sqrt((n - 1) / n * np.sum((loo_ratio - loo_ratio.mean()) ** 2)))


def init_variance_ratio(widths: Sequence[int], hyper: InitHyper, probe: np.ndarray,
                        n_seeds: int, seed: int = 0,
                        kernel_fn: Callable[[Sequence[int], InitHyper, np.ndarray, int], float] | None = None,
                        ) -> VarianceRatioStat:
    """E[Theta^0(x,x)^2] / E[Theta^0(x,x)]^2 over n_seeds fresh initializations.

    kernel_fn(widths, hyper, probe, seed) may replace the default
    init-then-evaluate kernel (used by tests); seeds whose kernel overflows
    are dropped as long as they stay under 1% of the total, else this raises.
    """
    if n_seeds < 2:
        raise ValueError("n_seeds must be >= 2")
    if kernel_fn is None:
        def kernel_fn(w, h, x, s):
            return self_kernel(finite_net.init(w, h, s), x)
    values = []
    failed = 0
    for rep_seed in replicate_seeds(seed, n_seeds):
        val = kernel_fn(widths, hyper, probe, int(rep_seed))
        if np.isfinite(val):
            values.append(val)
        else:
            failed += 1
    if failed > MAX_FAILED_SEED_FRACTION * n_seeds:
        raise FloatingPointError(
            f"{failed}/{n_seeds} replicate kernels overflowed; configuration too deep "
            "in the chaotic phase for this precision")
    if failed:
        logger.warning("dropped %d/%d overflowed replicate kernels", failed, n_seeds)
    values = np.asarray(values)
    mean = float(values.mean())
    m2 = float(np.mean(values ** 2))
    ratio = m2 / mean ** 2
    se = _jackknife_ratio_se(values) if len(values) > 1 else np.nan
    return VarianceRatioStat(ratio=ratio, n_seeds=len(values), mean=mean,
                             second_moment=m2, standard_error=se, n_failed=failed)


# ---------------------------------------------------------------------------
# Kernel drift during training.

@dataclass
class DriftStat:
    """Relative Frobenius change of the kernel at recorded training steps.

    Entries are NaN for snapshots where the kernel had already left the
    representable range (diverging chaotic runs).
    """

    steps: np.ndarray
    rel_change: np.ndarray
    final_loss: float
    initial_loss: float
    stop_reason: str
    diverged: bool = False

    @property
    def final_drift(self) -> float:
        """Drift at the last snapshot with a finite kernel."""
        finite = np.isfinite(self.rel_change)
        if not finite.any():
            return float("nan")
        return float(self.rel_change[finite][-1])


def training_drift(widths: Sequence[int], hyper: InitHyper, inputs: np.ndarray,
                   targets: np.ndarray, cfg: TrainConfig,
                   snapshot_steps: Sequence[int] = (0, 10, 100, 1000, 10_000),
                   seed: int = 0) -> DriftStat:
    """Train a fresh network and record ||Theta^t - Theta^0||_F / ||Theta^0||_F
    at the requested snapshot steps and at the final step.

    On training divergence the partial drift record is attached to the
    raised TrainingDivergenceError as `.partial`.
    """
    net = finite_net.init(widths, hyper, seed)
    theta0 = empirical_kernel(net, inputs, step=0).matrix
    norm0 = float(np.linalg.norm(theta0))
    if norm0 == 0.0:
        raise ValueError("initial kernel has zero norm")
    steps_rec: list[int] = []
    drift_rec: list[float] = []

    def on_snapshot(step: int, live_net: Mlp):
        steps_rec.append(step)
        try:
            theta_t = empirical_kernel(live_net, inputs, step=step).matrix
            drift_rec.append(float(np.linalg.norm(theta_t - theta0)) / norm0)
        except FloatingPointError:
            drift_rec.append(float("nan"))

    out0, _ = finite_net.forward_batch(net, inputs)
    initial_loss = finite_net.mse_loss(out0, targets)
    try:
        log = finite_net.train_full_batch(net, inputs, targets, cfg,
                                          snapshot_steps=sorted(set(snapshot_steps)),
                                          on_snapshot=on_snapshot)
    except TrainingDivergenceError as err:
        err.partial = DriftStat(steps=np.asarray(steps_rec), rel_change=np.asarray(drift_rec),
                                final_loss=float(err.losses[-1]) if len(err.losses) else np.nan,
                                initial_loss=initial_loss, stop_reason="diverged",
                                diverged=True)
        raise
    final_loss = float(log.losses[-1]) if len(log.losses) else initial_loss
    return DriftStat(steps=np.asarray(steps_rec), rel_change=np.asarray(drift_rec),
                     final_loss=final_loss, initial_loss=initial_loss,
                     stop_reason=log.stop_reason)
