"""Mean-field signal propagation for randomly initialized fully-connected nets.

A network of depth L applies L affine maps; layer widths are taken to
infinity.  In that limit the second moments of pre-activations, activations
and backpropagated errors obey layerwise recursions driven by Gaussian
expectations of the activation:

    forward:   q^l     = sigma_w^2 * E[phi(sqrt(q^{l-1}) z)^2] + sigma_b^2
               q_sr^l  = sigma_w^2 * E[phi(u1) phi(u2)]        + sigma_b^2
    backward:  p^l     = sigma_w^2 * r_l * E[phi'(sqrt(q^l) z)^2] * p^{l+1}
               p_sr^l  = sigma_w^2 * r_l * E[phi'(u1) phi'(u2)]   * p_sr^{l+1}

with (u1, u2) a correlated Gaussian pair and r_l an optional layer-width
ratio (1 for constant-width networks).  Terminal conditions are
p^L = p_sr^L = 1 because the output is a linear read-out of the last
activations.  Layer 0 is treated as a virtual activation layer: the trace
starts from a pre-activation variance q^0 (1 for normalized data) and
q_hat^0 = E[phi(sqrt(q^0) z)^2] plays the role of the input second moment.

The per-layer multiplier chi1^l = sigma_w^2 * E[phi'(sqrt(q^l) z)^2]
controls gradient propagation: chi1 < 1 at the variance fixed point means
vanishing gradients (ordered phase), chi1 > 1 exploding gradients (chaotic
phase), and chi1 = 1 is the edge of chaos (EOC).

ReLU and erf use closed-form expectations; anything else falls back to
Gauss-Hermite quadrature.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .activations import ActivationKind, dphi, phi
from . import quadrature

# Tolerance band for clamping correlations that drift past +-1 in floating
# point; larger violations indicate an upstream bug and raise.
CORRELATION_SLACK = 1e-9

# |chi1 - 1| below this at the variance fixed point classifies as EOC.
EOC_TOLERANCE = 1e-6

# Fixed-point iteration of the variance map.
FIXED_POINT_MAX_ITER = 10_000
FIXED_POINT_RTOL = 1e-12


class MeanFieldError(Exception):
    """Base class for signal-propagation failures."""


class SignalOverflowError(MeanFieldError):
    """A recursion produced a non-finite value (e.g. deep chaotic iteration)."""

    def __init__(self, message: str, layer: int | None = None):
        self.layer = layer
        if layer is not None:
            message = f"{message} (layer {layer})"
        super().__init__(message)


class CorrelationDomainError(MeanFieldError):
    """A correlation left [-1, 1] by more than the clamping tolerance."""


class FixedPointDivergenceError(MeanFieldError):
    """The variance map did not converge; carries the last iterate."""

    def __init__(self, message: str, last_iterate: float):
        self.last_iterate = last_iterate
        super().__init__(f"{message} (last iterate {last_iterate!r})")


@dataclass(frozen=True)
class InitHyper:
    """Initialization hyperparameters (sigma_w^2, sigma_b^2) plus activation kind."""

    sigma_w_sq: float
    sigma_b_sq: float
    activation: ActivationKind

    def __post_init__(self):
        if not (self.sigma_w_sq > 0.0 and math.isfinite(self.sigma_w_sq)):
            raise ValueError(f"sigma_w_sq must be positive, got {self.sigma_w_sq!r}")
        if not (self.sigma_b_sq >= 0.0 and math.isfinite(self.sigma_b_sq)):
            raise ValueError(f"sigma_b_sq must be non-negative, got {self.sigma_b_sq!r}")
        if not isinstance(self.activation, ActivationKind):
            raise TypeError("activation must be an ActivationKind")


class Phase(Enum):
    ORDERED = "ordered"
    CHAOTIC = "chaotic"
    EOC = "eoc"


@dataclass(frozen=True)
class PhaseLabel:
    tag: Phase
    chi1_fixed_point: float


def _clamp_correlation(c: float) -> float:
    if abs(c) > 1.0 + CORRELATION_SLACK:
        raise CorrelationDomainError(
            f"correlation {c!r} outside [-1, 1] beyond tolerance {CORRELATION_SLACK}")
    return min(1.0, max(-1.0, c))


# ---------------------------------------------------------------------------
# Gaussian expectations of the activation and its derivative.
#
# The ReLU closed forms are the arc-cosine kernel identities; the erf ones
# follow from E[erf(u1) erf(u2)] = (2/pi) arcsin(2 cov / sqrt((1+2q_s)(1+2q_r)))
# and E[exp(-u1^2 - u2^2)] = 1/sqrt(det(I + 2 Sigma)).

def avg_phi_sq(kind: ActivationKind, q: float, n_nodes: int = quadrature.DEFAULT_NODES) -> float:
    """E[phi(sqrt(q) z)^2] for z ~ N(0, 1)."""
    if kind is ActivationKind.RELU:
        return 0.5 * q
    if kind is ActivationKind.ERF:
        return 2.0 / math.pi * math.atan(q / math.sqrt(q + 0.25))
    return quadrature.normal_expectation(lambda u: phi(kind, u) ** 2,
                                         math.sqrt(q), n_nodes)


def avg_dphi_sq(kind: ActivationKind, q: float, n_nodes: int = quadrature.DEFAULT_NODES) -> float:
    """E[phi'(sqrt(q) z)^2] for z ~ N(0, 1)."""
    if kind is ActivationKind.RELU:
        return 0.5
    if kind is ActivationKind.ERF:
        return 2.0 / math.pi / math.sqrt(q + 0.25)
    return quadrature.normal_expectation(lambda u: dphi(kind, u) ** 2,
                                         math.sqrt(q), n_nodes)


def avg_phi_prod(kind: ActivationKind, q_s: float, q_r: float, c: float,
                 n_nodes: int = quadrature.DEFAULT_NODES) -> float:
    """E[phi(u1) phi(u2)] over the correlated pair with variances q_s, q_r, correlation c."""
    c = _clamp_correlation(c)
    if kind is ActivationKind.RELU:
        scale = math.sqrt(q_s * q_r)
        return scale / (2.0 * math.pi) * (
            math.sqrt(max(1.0 - c * c, 0.0)) + c * (math.pi / 2.0 + math.asin(c)))
    if kind is ActivationKind.ERF:
        cov = c * math.sqrt(q_s * q_r)
        arg = 2.0 * cov / math.sqrt((1.0 + 2.0 * q_s) * (1.0 + 2.0 * q_r))
        return 2.0 / math.pi * math.asin(min(1.0, max(-1.0, arg)))
    return quadrature.normal_pair_expectation(lambda u: phi(kind, u),
                                              q_s, q_r, c, n_nodes)


def avg_dphi_prod(kind: ActivationKind, q_s: float, q_r: float, c: float,
                  n_nodes: int = quadrature.DEFAULT_NODES) -> float:
    """E[phi'(u1) phi'(u2)] over the correlated pair."""
    c = _clamp_correlation(c)
    if kind is ActivationKind.RELU:
        return (math.pi / 2.0 + math.asin(c)) / (2.0 * math.pi)
    if kind is ActivationKind.ERF:
        cov = c * math.sqrt(q_s * q_r)
        det = (1.0 + 2.0 * q_s) * (1.0 + 2.0 * q_r) - 4.0 * cov * cov
        return 4.0 / math.pi / math.sqrt(det)
    return quadrature.normal_pair_expectation(lambda u: dphi(kind, u),
                                              q_s, q_r, c, n_nodes)


# ---------------------------------------------------------------------------
# Single-layer maps.

def forward_variance_step(hyper: InitHyper, q_prev: float) -> tuple[float, float]:
    """One forward step of the variance recursion.

    Returns (q, q_hat) where q is the next pre-activation variance and q_hat
    is the activation variance of the incoming layer.
    """
    q_prev = float(q_prev)
    if not (q_prev > 0.0):
        raise ValueError(f"q_prev must be positive, got {q_prev!r}")
    q_hat = avg_phi_sq(hyper.activation, q_prev)
    q = hyper.sigma_w_sq * q_hat + hyper.sigma_b_sq
    if not math.isfinite(q):
        raise SignalOverflowError(f"variance map overflowed at q_prev={q_prev!r}")
    return q, q_hat


def forward_covariance_step(hyper: InitHyper, q_s: float, q_r: float,
                            q_sr_prev: float) -> tuple[float, float]:
    """One forward step of the covariance recursion.

    Returns (q_sr, q_hat_sr): the next pre-activation covariance and the
    activation covariance of the incoming layer.  Collapses to
    forward_variance_step when the correlation is 1.
    """
    q_s, q_r, q_sr_prev = float(q_s), float(q_r), float(q_sr_prev)
    if not (q_s > 0.0 and q_r > 0.0):
        raise ValueError("q_s and q_r must be positive")
    c = _clamp_correlation(q_sr_prev / math.sqrt(q_s * q_r))
    q_hat_sr = avg_phi_prod(hyper.activation, q_s, q_r, c)
    q_sr = hyper.sigma_w_sq * q_hat_sr + hyper.sigma_b_sq
    if not math.isfinite(q_sr):
        raise SignalOverflowError(f"covariance map overflowed at q_sr_prev={q_sr_prev!r}")
    return q_sr, q_hat_sr


def backward_step(hyper: InitHyper, q: float, p_next: float,
                  width_ratio: float = 1.0) -> tuple[float, float]:
    """One backward step of the error-variance recursion.

    Returns (p, chi1).  chi1 = sigma_w^2 * E[phi'(sqrt(q) z)^2] is reported
    for the width_ratio = 1 convention; p additionally carries the ratio of
    adjacent layer widths for non-constant profiles.
    """
    q, p_next = float(q), float(p_next)
    if not (p_next > 0.0):
        raise ValueError(f"p_next must be positive, got {p_next!r}")
    chi1 = hyper.sigma_w_sq * avg_dphi_sq(hyper.activation, q)
    p = chi1 * width_ratio * p_next
    if not math.isfinite(p):
        raise SignalOverflowError(f"backward map overflowed at q={q!r}")
    return p, chi1


def backward_covariance_step(hyper: InitHyper, q_s: float, q_r: float, c: float,
                             p_sr_next: float, width_ratio: float = 1.0) -> float:
    """One backward step of the error-covariance recursion."""
    q_s, q_r, p_sr_next = float(q_s), float(q_r), float(p_sr_next)
    p_sr = (hyper.sigma_w_sq * avg_dphi_prod(hyper.activation, q_s, q_r, float(c))
            * width_ratio * p_sr_next)
    if not math.isfinite(p_sr):
        raise SignalOverflowError(f"backward covariance map overflowed at q={q_s!r}")
    return p_sr


# ---------------------------------------------------------------------------
# Full traces.

@dataclass
class MeanFieldTrace:
    """Per-layer second moments for one input (and optionally an input pair).

    All arrays are indexed by layer l = 0..L where L = depth (number of
    affine maps).  Entry 0 holds the virtual input layer: q[0] = q^0,
    q_hat[0] = E[phi(sqrt(q^0) z)^2].  The backward channel is defined for
    l = 1..L with p[L] = p_sr[L] = 1; p[0], p_sr[0], chi1[L] are NaN.
    chi1[l] is the gradient multiplier of the activation at layer l (the
    read-out layer has none).  Covariance arrays are None when the trace was
    run without a second input.
    """

    hyper: InitHyper
    q: np.ndarray
    q_hat: np.ndarray
    p: np.ndarray
    chi1: np.ndarray
    q_sr: np.ndarray | None = None
    q_hat_sr: np.ndarray | None = None
    c: np.ndarray | None = None
    p_sr: np.ndarray | None = None

    @property
    def depth(self) -> int:
        return len(self.q) - 1

    @property
    def has_covariance(self) -> bool:
        return self.q_sr is not None


def run_trace(hyper: InitHyper, depth: int, q0: float = 1.0,
              q0_sr: float | None = None,
              width_ratios: Sequence[float] | None = None) -> MeanFieldTrace:
    """Full forward sweep of the variance/covariance recursions followed by
    the backward sweep with terminal conditions p^L = p_sr^L = 1.

    width_ratios, when given, supplies the per-layer width quotient of the
    backward recursion for layers 1..L-1 (constant-width networks use 1).
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if not (q0 > 0.0):
        raise ValueError("q0 must be positive")
    if q0_sr is not None and abs(q0_sr) > q0 * (1.0 + CORRELATION_SLACK):
        raise ValueError("|q0_sr| must not exceed q0")
    if width_ratios is None:
        ratios = np.ones(max(depth - 1, 1))
    else:
        ratios = np.asarray(width_ratios, dtype=float)
        if depth > 1 and len(ratios) != depth - 1:
            raise ValueError(f"width_ratios must have length depth-1={depth - 1}")

    L = depth
    q = np.empty(L + 1)
    q_hat = np.empty(L + 1)
    q[0] = q0
    with_cov = q0_sr is not None
    if with_cov:
        q_sr = np.empty(L + 1)
        q_hat_sr = np.empty(L + 1)
        c = np.empty(L + 1)
        q_sr[0] = q0_sr

    for l in range(1, L + 1):
        try:
            q[l], q_hat[l - 1] = forward_variance_step(hyper, q[l - 1])
            if with_cov:
                c[l - 1] = _clamp_correlation(q_sr[l - 1] / q[l - 1])
                q_sr[l], q_hat_sr[l - 1] = forward_covariance_step(
                    hyper, q[l - 1], q[l - 1], q_sr[l - 1])
        except SignalOverflowError as err:
            raise SignalOverflowError(str(err), layer=l) from err
    q_hat[L] = avg_phi_sq(hyper.activation, q[L])
    if with_cov:
        c[L] = _clamp_correlation(q_sr[L] / q[L])
        q_hat_sr[L] = avg_phi_prod(hyper.activation, q[L], q[L], c[L])

    p = np.full(L + 1, np.nan)
    chi1 = np.full(L + 1, np.nan)
    p[L] = 1.0
    chi1[0] = hyper.sigma_w_sq * avg_dphi_sq(hyper.activation, q[0])
    if with_cov:
        p_sr = np.full(L + 1, np.nan)
        p_sr[L] = 1.0
    for l in range(L - 1, 0, -1):
        try:
            p[l], chi1[l] = backward_step(hyper, q[l], p[l + 1], ratios[l - 1])
            if with_cov:
                p_sr[l] = backward_covariance_step(
                    hyper, q[l], q[l], c[l], p_sr[l + 1], ratios[l - 1])
        except SignalOverflowError as err:
            raise SignalOverflowError(str(err), layer=l) from err

    if with_cov:
        return MeanFieldTrace(hyper, q, q_hat, p, chi1,
                              q_sr=q_sr, q_hat_sr=q_hat_sr, c=c, p_sr=p_sr)
    return MeanFieldTrace(hyper, q, q_hat, p, chi1)


# ---------------------------------------------------------------------------
# Phase classification.

def variance_fixed_point(hyper: InitHyper, q0: float = 1.0) -> tuple[float, float]:
    """Iterate the variance map to its fixed point; returns (q*, chi1(q*)).

    For activations whose variance map has no finite fixed point (ReLU with
    sigma_w^2 >= 2) the iteration falls back to convergence of the chi1
    sequence, which is what phase classification needs.
    """
    q = q0
    chi_prev = None
    stable = 0
    for _ in range(FIXED_POINT_MAX_ITER):
        q_next, _ = forward_variance_step(hyper, q)
        chi = hyper.sigma_w_sq * avg_dphi_sq(hyper.activation, q_next)
        if abs(q_next - q) < FIXED_POINT_RTOL * max(1.0, abs(q_next)):
            return q_next, chi
        if chi_prev is not None and abs(chi - chi_prev) <= 1e-13 * max(1.0, abs(chi)):
            stable += 1
            if stable >= 16:
                return q_next, chi
        else:
            stable = 0
        chi_prev = chi
        q = q_next
        if q > 1e280:
            raise FixedPointDivergenceError(
                "variance map diverged without chi1 settling", last_iterate=q)
    raise FixedPointDivergenceError("variance map did not converge", last_iterate=q)


def classify_phase(hyper: InitHyper, q0: float = 1.0,
                   tol: float = EOC_TOLERANCE) -> PhaseLabel:
    """Classify (sigma_w^2, sigma_b^2) as ordered / chaotic / EOC via chi1 at
    the variance fixed point."""
    _, chi = variance_fixed_point(hyper, q0)
    if chi < 1.0 - tol:
        tag = Phase.ORDERED
    elif chi > 1.0 + tol:
        tag = Phase.CHAOTIC
    else:
        tag = Phase.EOC
    return PhaseLabel(tag, chi)


def edge_of_chaos_sigma_w_sq(activation: ActivationKind, sigma_b_sq: float,
                             bracket: tuple[float, float] = (1e-3, 20.0),
                             rtol: float = 1e-10) -> float:
    """Locate the sigma_w^2 where chi1(q*) crosses 1 at fixed sigma_b^2, by bisection."""

    def excess(sw_sq: float) -> float:
        _, chi = variance_fixed_point(InitHyper(sw_sq, sigma_b_sq, activation))
        return chi - 1.0

    lo, hi = bracket
    f_lo, f_hi = excess(lo), excess(hi)
    if f_lo > 0.0 or f_hi < 0.0:
        raise ValueError(f"bracket {bracket} does not straddle the phase border")
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if excess(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
