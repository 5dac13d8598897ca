"""Deterministic (infinite-width) NTK machinery built on mean-field traces.

For a network of depth L with widths M_l = alpha_l * M, the NTK converges at
initialization to a deterministic matrix with a depth-summed structure

    Theta*(X) = alpha * M * Lambda + P,
    Lambda[s][s] = kappa1(x_s),   Lambda[s][r] = kappa2(x_s, x_r),

    kappa1(x)        = sum_l (alpha_{l-1} / alpha) * q_hat^{l-1}(x)   * p^l(x)
    kappa2(x_s, x_r) = sum_l (alpha_{l-1} / alpha) * q_hat_sr^{l-1}   * p_sr^l
    alpha            = sum_{l=1}^{L-1} alpha_l * alpha_{l-1},

where P collects the exact bias-parameter contribution (sum_l p_sr^l per
entry, an O(1/M) relative correction that improves finite-width agreement).
Splitting Theta* into its data-independent mean and a perturbation,

    Theta* = Theta_bar * (I + eps),
    Theta_bar = alpha * M * ((kbar1 - kbar2) I + kbar2 11^T),

exposes the conditioning through the ratio kbar1/kbar2: the matrix is
well-conditioned when the ratio is large and near-degenerate as it
approaches 1.  Under constant-kernel gradient flow trained to convergence
on (X, Y) the network output is kernel regression shifted by the initial
function,

    f_inf(x) = Theta(x,X) Theta(X)^{-1} Y + f0(x) - Theta(x,X) Theta(X)^{-1} f0(X),

and, with f0 a centered Gaussian process with covariance given by the NNGP
matrix K(X) (entries q^L, q_sr^L), the data-independent variance of the
trained output is

    Var(f_inf(x)) ~= (1 + A^2/S)(qbar^L - qbar_sr^L) + (A - 1)^2 qbar_sr^L,
    A = S / (kbar1/kbar2 + (S - 1)).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .meanfield import InitHyper, MeanFieldTrace, run_trace

logger = logging.getLogger(__name__)

DEFAULT_REFERENCE_COV = 0.5

# Jitter ladder for symmetric positive-definite solves: multiples of trace/S.
JITTER_START = 1e-12
JITTER_MAX = 1e-4
JITTER_GROWTH = 10.0

PSD_WARN_TOL = 1e-8


class IllConditionedError(Exception):
    """An SPD solve failed even at the maximum jitter level."""

    def __init__(self, message: str, jitter: float):
        self.jitter = jitter
        super().__init__(f"{message} (final jitter {jitter:.3e})")


@dataclass(frozen=True)
class KappaPair:
    """Depth-summed NTK coefficients for one input pair.

    kappa1/kappa2 are the diagonal/off-diagonal coefficients; p_sum_diag and
    p_sum_cross carry the exact bias-parameter sums (the O(1/M) term).
    kappa*_bar hold the data-independent limits; compute_kappas initializes
    them to the pair's own values, which is exact when the trace was run at
    the reference covariance.
    """

    kappa1: float
    kappa2: float
    kappa1_bar: float
    kappa2_bar: float
    p_sum_diag: float
    p_sum_cross: float

    @property
    def ratio(self) -> float:
        return condition_ratio(self)


def compute_kappas(trace: MeanFieldTrace,
                   width_fractions: Sequence[float] | None = None) -> KappaPair:
    """Depth-sum a mean-field trace into (kappa1, kappa2).

    width_fractions supplies alpha_0..alpha_{L-1} (defaults to all ones,
    i.e. input dimension and hidden widths all equal to M).
    """
    if not trace.has_covariance:
        raise ValueError("trace must carry the covariance channel (run with q0_sr)")
    L = trace.depth
    if width_fractions is None:
        fr = np.ones(L)
    else:
        fr = np.asarray(width_fractions, dtype=float)
        if len(fr) != L:
            raise ValueError(f"width_fractions must have length depth={L}, got {len(fr)}")
        if np.any(fr <= 0.0):
            raise ValueError("width fractions must be positive")
    alpha = float(np.dot(fr[1:], fr[:-1])) if L > 1 else float(fr[0])
    kappa1 = float(np.dot(fr, trace.q_hat[:L] * trace.p[1:])) / alpha
    kappa2 = float(np.dot(fr, trace.q_hat_sr[:L] * trace.p_sr[1:])) / alpha
    return KappaPair(kappa1=kappa1, kappa2=kappa2,
                     kappa1_bar=kappa1, kappa2_bar=kappa2,
                     p_sum_diag=float(np.sum(trace.p[1:])),
                     p_sum_cross=float(np.sum(trace.p_sr[1:])))


def data_independent_kappas(hyper: InitHyper, depth: int,
                            reference_cov: float = DEFAULT_REFERENCE_COV,
                            q0: float = 1.0,
                            width_fractions: Sequence[float] | None = None) -> KappaPair:
    """kbar1/kbar2 from the trace started at q^0 = q0 and the reference covariance."""
    trace = run_trace(hyper, depth, q0=q0, q0_sr=reference_cov * q0)
    return compute_kappas(trace, width_fractions)


def condition_ratio(kappas: KappaPair, n_points: int | None = None) -> float:
    """kbar1 / kbar2; +inf when kbar2 = 0.

    A ratio near 1 means the data-independent kernel mean is close to the
    rank-one matrix kbar1 * 11^T; for a sample of size n its condition
    number is (kbar1 + (n-1) kbar2) / (kbar1 - kbar2), reported at debug
    level when n_points is given.
    """
    if kappas.kappa2_bar == 0.0:
        logger.warning("kappa2_bar is zero; returning inf condition ratio")
        return math.inf
    ratio = kappas.kappa1_bar / kappas.kappa2_bar
    if n_points is not None and ratio > 1.0:
        cond = (kappas.kappa1_bar + (n_points - 1) * kappas.kappa2_bar) / (
            kappas.kappa1_bar - kappas.kappa2_bar)
        logger.debug("mean-kernel condition number at S=%d: %.3e", n_points, cond)
    return ratio


# ---------------------------------------------------------------------------
# Kernel matrices.

@dataclass
class ThetaStar:
    """Deterministic NTK matrix and its mean/perturbation decomposition.

    matrix = scale * Lambda + bias-parameter sums, scale = alpha * M.
    epsilon satisfies matrix = theta_bar() @ (I + epsilon) and is None when
    kbar1 = kbar2 makes the mean matrix singular (identical inputs).
    """

    matrix: np.ndarray
    scale: float
    alpha: float
    kappa1: np.ndarray
    kappa2: np.ndarray
    mean_kappa1: float
    mean_kappa2: float
    epsilon: np.ndarray | None

    @property
    def n_points(self) -> int:
        return self.matrix.shape[0]

    def theta_bar(self) -> np.ndarray:
        n = self.n_points
        return self.scale * ((self.mean_kappa1 - self.mean_kappa2) * np.eye(n)
                             + self.mean_kappa2 * np.ones((n, n)))


@dataclass
class NngpMatrix:
    """Output covariance of the randomly initialized network: entries q^L, q_sr^L."""

    matrix: np.ndarray

    @property
    def n_points(self) -> int:
        return self.matrix.shape[0]


def mean_theta_inverse(kappa1_bar: float, kappa2_bar: float, n: int,
                       scale: float) -> np.ndarray:
    """Closed-form inverse of the data-independent kernel mean.

    (scale * ((k1-k2) I + k2 11^T))^{-1}
        = 1/(scale (k1-k2)) * (I - k2/(k1 + (n-1) k2) * 11^T)
    """
    if kappa1_bar <= kappa2_bar:
        raise ValueError("mean kernel is singular unless kappa1_bar > kappa2_bar")
    lead = 1.0 / (scale * (kappa1_bar - kappa2_bar))
    shrink = kappa2_bar / (kappa1_bar + (n - 1) * kappa2_bar)
    return lead * (np.eye(n) - shrink * np.ones((n, n)))


def build_theta_star(kappa1: Sequence[float], kappa2: np.ndarray,
                     m_width: float, alpha: float,
                     kappa1_bar: float, kappa2_bar: float,
                     p_sum_diag: Sequence[float] | None = None,
                     p_sum_cross: np.ndarray | None = None) -> ThetaStar:
    """Assemble the deterministic NTK matrix from per-point kappa1 and
    pairwise kappa2 values, scaled by alpha * M, plus the exact
    bias-parameter sums when given."""
    kappa1 = np.asarray(kappa1, dtype=float)
    n = len(kappa1)
    kappa2 = np.asarray(kappa2, dtype=float)
    if kappa2.shape != (n, n):
        raise ValueError(f"kappa2 must be ({n}, {n}), got {kappa2.shape}")
    scale = alpha * m_width
    lam = kappa2.copy()
    np.fill_diagonal(lam, kappa1)
    matrix = scale * lam
    if p_sum_diag is not None or p_sum_cross is not None:
        if p_sum_diag is None or p_sum_cross is None:
            raise ValueError("pass both bias-parameter sums or neither")
        corr = np.asarray(p_sum_cross, dtype=float).copy()
        np.fill_diagonal(corr, np.asarray(p_sum_diag, dtype=float))
        matrix = matrix + corr
    matrix = 0.5 * (matrix + matrix.T)

    if kappa1_bar > kappa2_bar:
        inv_bar = mean_theta_inverse(kappa1_bar, kappa2_bar, n, scale)
        epsilon = inv_bar @ matrix - np.eye(n)
    else:
        epsilon = None
    return ThetaStar(matrix=matrix, scale=scale, alpha=alpha,
                     kappa1=kappa1, kappa2=kappa2,
                     mean_kappa1=kappa1_bar, mean_kappa2=kappa2_bar,
                     epsilon=epsilon)


def _pairwise_kappas(hyper: InitHyper, depth: int, cov0: np.ndarray, q0: float,
                     width_fractions: Sequence[float] | None):
    """Traces and kappa pairs for every entry of a layer-0 covariance matrix."""
    cov0 = np.asarray(cov0, dtype=float)
    n = cov0.shape[0]
    if cov0.shape != (n, n) or not np.allclose(cov0, cov0.T, atol=1e-12):
        raise ValueError("cov0 must be a symmetric matrix of layer-0 covariances")
    cache: dict[float, KappaPair] = {}
    trace_cache: dict[float, MeanFieldTrace] = {}

    def for_cov(c0: float) -> tuple[KappaPair, MeanFieldTrace]:
        key = float(c0)
        if key not in cache:
            tr = run_trace(hyper, depth, q0=q0, q0_sr=key)
            trace_cache[key] = tr
            cache[key] = compute_kappas(tr, width_fractions)
        return cache[key], trace_cache[key]

    return n, for_cov


def nngp_matrix(hyper: InitHyper, depth: int, cov0: np.ndarray,
                q0: float = 1.0) -> NngpMatrix:
    """NNGP matrix K with K[s][s] = q^L and K[s][r] = q_sr^L for the pairwise
    layer-0 covariances in cov0 (diagonal entries must equal q0)."""
    cov0 = np.asarray(cov0, dtype=float)
    if not np.allclose(np.diag(cov0), q0, rtol=1e-12):
        raise ValueError("diagonal of cov0 must equal q0")
    n, for_cov = _pairwise_kappas(hyper, depth, cov0, q0, None)
    k = np.empty((n, n))
    diag_trace = run_trace(hyper, depth, q0=q0)
    np.fill_diagonal(k, diag_trace.q[depth])
    for s in range(n):
        for r in range(s + 1, n):
            _, tr = for_cov(cov0[s, r])
            k[s, r] = k[r, s] = tr.q_sr[depth]
    return NngpMatrix(matrix=k)


def theta_star_matrix(hyper: InitHyper, depth: int, cov0: np.ndarray,
                      m_width: float, q0: float = 1.0,
                      width_fractions: Sequence[float] | None = None,
                      reference_cov: float = DEFAULT_REFERENCE_COV) -> ThetaStar:
    """Deterministic NTK for a sample described by its layer-0 covariance
    matrix, including the exact bias-parameter sums."""
    n, for_cov = _pairwise_kappas(hyper, depth, cov0, q0, width_fractions)
    kbars = data_independent_kappas(hyper, depth, reference_cov, q0, width_fractions)
    diag_pair = for_cov(q0)[0]
    kappa1 = np.full(n, diag_pair.kappa1)
    psum1 = np.full(n, diag_pair.p_sum_diag)
    kappa2 = np.zeros((n, n))
    psum2 = np.zeros((n, n))
    cov0 = np.asarray(cov0, dtype=float)
    for s in range(n):
        for r in range(s + 1, n):
            pair, _ = for_cov(cov0[s, r])
            kappa2[s, r] = kappa2[r, s] = pair.kappa2
            psum2[s, r] = psum2[r, s] = pair.p_sum_cross
    fr = np.ones(depth) if width_fractions is None else np.asarray(width_fractions, float)
    alpha = float(np.dot(fr[1:], fr[:-1])) if depth > 1 else float(fr[0])
    return build_theta_star(kappa1, kappa2, m_width, alpha,
                            kbars.kappa1_bar, kbars.kappa2_bar,
                            p_sum_diag=psum1, p_sum_cross=psum2)


# ---------------------------------------------------------------------------
# Solves and the trained-output closed form.

def _as_matrix(obj) -> np.ndarray:
    return np.asarray(getattr(obj, "matrix", obj), dtype=float)


def spd_solve(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    """Solve a x = b for symmetric positive-definite a via Cholesky with an
    escalating diagonal jitter ladder; returns (x, jitter_used)."""
    a = _as_matrix(a)
    n = a.shape[0]
    scale = float(np.trace(a)) / n if n else 1.0
    if scale <= 0.0:
        scale = 1.0
    jitter = 0.0
    while True:
        try:
            factor = cho_factor(a + jitter * np.eye(n) if jitter else a, lower=True)
            return cho_solve(factor, b), jitter
        except np.linalg.LinAlgError:
            pass
        if jitter == 0.0:
            jitter = JITTER_START * scale
        elif jitter < JITTER_MAX * scale:
            jitter = min(jitter * JITTER_GROWTH, JITTER_MAX * scale)
        else:
            raise IllConditionedError("SPD solve failed", jitter=jitter)


def trained_output(theta, theta_x: np.ndarray, f0_x: float,
                   f0_train: np.ndarray, y: np.ndarray) -> float:
    """Output of a network trained to convergence under a constant kernel:

        f_inf(x) = f0(x) + Theta(x,X) Theta(X)^{-1} (Y - f0(X)),

    computed through an SPD solve (never an explicit inverse)."""
    theta = _as_matrix(theta)
    theta_x = np.asarray(theta_x, dtype=float)
    f0_train = np.asarray(f0_train, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (theta.shape[0] == theta.shape[1] == len(theta_x) == len(f0_train) == len(y)):
        raise ValueError("inconsistent kernel/label dimensions")
    w, _ = spd_solve(theta, y - f0_train)
    return float(f0_x + theta_x @ w)


# ---------------------------------------------------------------------------
# Trained-output variance: closed-form prediction and Monte-Carlo oracle.

@dataclass(frozen=True)
class VariancePrediction:
    A: float
    variance: float
    q_bar_L: float
    q_bar_sr_L: float


def predict_variance(kappas: KappaPair, q_bar_L: float, q_bar_sr_L: float,
                     n_samples: int) -> VariancePrediction:
    """Data-independent variance of the fully trained output,

        Var = (1 + A^2/S)(qbar^L - qbar_sr^L) + (A - 1)^2 qbar_sr^L,
        A = S / (kbar1/kbar2 + (S - 1)).
    """
    ratio = condition_ratio(kappas)
    if ratio < 1.0:
        raise ValueError(f"kappa ratio must be >= 1, got {ratio!r}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not (q_bar_L >= q_bar_sr_L >= 0.0):
        raise ValueError("require q_bar_L >= q_bar_sr_L >= 0")
    s = float(n_samples)
    a = 0.0 if math.isinf(ratio) else s / (ratio + (s - 1.0))
    variance = (1.0 + a * a / s) * (q_bar_L - q_bar_sr_L) + (a - 1.0) ** 2 * q_bar_sr_L
    return VariancePrediction(A=a, variance=variance,
                              q_bar_L=q_bar_L, q_bar_sr_L=q_bar_sr_L)


@dataclass(frozen=True)
class McVariance:
    variance: float
    standard_error: float
    n_samples: int

    def __float__(self) -> float:
        return self.variance


def _psd_sampler(cov: np.ndarray) -> np.ndarray:
    """Factor a covariance for sampling, clipping tiny negative eigenvalues.

    Warns when the most negative eigenvalue exceeds the PSD tolerance; raises
    if the matrix is not close to symmetric PSD at all.
    """
    cov = _as_matrix(cov)
    n = cov.shape[0]
    if not np.allclose(cov, cov.T, atol=1e-10 * max(1.0, float(np.abs(cov).max()))):
        raise ValueError("covariance must be symmetric")
    vals, vecs = np.linalg.eigh(cov)
    tol = PSD_WARN_TOL * max(float(np.trace(cov)) / n, 0.0)
    if vals[0] < -tol:
        if vals[0] < -1e-4 * max(float(np.trace(cov)) / n, 1e-300):
            raise ValueError(f"covariance strongly indefinite (lambda_min={vals[0]:.3e})")
        logger.warning("clipping negative NNGP eigenvalue %.3e", vals[0])
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


MC_CHUNK = 8192


def variance_oracle_mc(theta_star, nngp_joint, theta_x_row: np.ndarray,
                       n_samples: int, seed: int = 0) -> McVariance:
    """Monte-Carlo estimate of Var(f_inf(x)) used as the brute-force check of
    the closed-form prediction.

    nngp_joint is the (S+1) x (S+1) output covariance of [x] + X with the
    test point FIRST.  Initial outputs f0 are sampled from it, the trained
    output is evaluated per sample, and the empirical variance is returned.
    Samples are drawn in fixed chunks by sample index from per-chunk PRNG
    streams, so the result depends only on (seed, n_samples).
    """
    theta = _as_matrix(theta_star)
    joint = _as_matrix(nngp_joint)
    s = theta.shape[0]
    if joint.shape != (s + 1, s + 1):
        raise ValueError(f"joint NNGP must be ({s + 1}, {s + 1}), got {joint.shape}")
    theta_x_row = np.asarray(theta_x_row, dtype=float)
    if len(theta_x_row) != s:
        raise ValueError("theta_x_row length must match the training sample size")
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")

    v, _ = spd_solve(theta, theta_x_row)
    sampler = _psd_sampler(joint)

    ss = np.random.SeedSequence(seed)
    n_chunks = (n_samples + MC_CHUNK - 1) // MC_CHUNK
    children = ss.spawn(n_chunks)
    out = np.empty(n_samples)
    pos = 0
    for child in children:
        take = min(MC_CHUNK, n_samples - pos)
        rng = np.random.Generator(np.random.Philox(child))
        z = rng.standard_normal((take, s + 1))
        f0 = z @ sampler.T
        # f_inf(x) up to the Y-dependent constant, which does not move variance
        out[pos:pos + take] = f0[:, 0] - f0[:, 1:] @ v
        pos += take
    var = float(np.var(out, ddof=1))
    # standard error of a variance estimate for ~Gaussian samples
    se = var * math.sqrt(2.0 / (n_samples - 1))
    return McVariance(variance=var, standard_error=se, n_samples=n_samples)
