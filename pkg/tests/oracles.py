"""Independent numerical oracles used to pin expected values.

The Gaussian-expectation oracles never touch the closed forms under test:
one-dimensional integrals go through adaptive Gauss-Kronrod quadrature of
the plain integrand (split at the ReLU kink), and the two-dimensional
product integrals are reduced with the exact conditional Gaussian moments

    E[relu(m + s Z)]        = m Phi(m/s) + s N(m/s)
    E[erf(m + s Z)]         = erf(m / sqrt(1 + 2 s^2))
    E[step(m + s Z)]        = Phi(m/s)
    E[exp(-(m + s Z)^2)]    = exp(-m^2 / (1 + 2 s^2)) / sqrt(1 + 2 s^2)

before an adaptive outer quadrature; tanh products fall back to a nested
adaptive rule.  Plain fixed-node Gauss-Hermite is NOT accurate enough for
the kinked ReLU product integrands (observed ~1e-1 relative error at strong
negative correlation with 64 nodes), which is why the tight-tolerance checks
use these oracles instead.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.integrate import quad
from scipy.special import erf as _erf
from scipy.stats import norm

from ntklab.activations import ActivationKind, dphi, phi

_CUT = 12.0  # Gaussian mass beyond +-12 sigma is < 1e-31
_QUAD_OPTS = dict(limit=400, epsabs=1e-14, epsrel=1e-13)


def _gauss_quad(f) -> float:
    val, _ = quad(lambda z: norm.pdf(z) * f(z), -_CUT, _CUT, points=[0.0], **_QUAD_OPTS)
    return val


def avg_phi_sq_oracle(kind: ActivationKind, q: float) -> float:
    a = math.sqrt(q)
    return _gauss_quad(lambda z: phi(kind, a * z) ** 2)


def avg_dphi_sq_oracle(kind: ActivationKind, q: float) -> float:
    a = math.sqrt(q)
    return _gauss_quad(lambda z: dphi(kind, a * z) ** 2)


def _inner_mean(kind: ActivationKind, deriv: bool, m: float, s: float) -> float:
    """E[g(m + s Z)] for g = phi or phi' with Z ~ N(0,1), in closed form."""
    if kind is ActivationKind.RELU:
        if not deriv:
            return m * norm.cdf(m / s) + s * norm.pdf(m / s)
        return norm.cdf(m / s)
    if kind is ActivationKind.ERF:
        if not deriv:
            return _erf(m / math.sqrt(1.0 + 2.0 * s * s))
        den = 1.0 + 2.0 * s * s
        return 2.0 / math.sqrt(math.pi) * math.exp(-m * m / den) / math.sqrt(den)
    raise NotImplementedError


def avg_phi_prod_oracle(kind: ActivationKind, q_s: float, q_r: float, c: float,
                        deriv: bool = False) -> float:
    """E[g(u1) g(u2)] with var(u1)=q_s, var(u2)=q_r, corr(u1,u2)=c."""
    a = math.sqrt(q_s)
    b = math.sqrt(q_r)
    s2 = b * math.sqrt(max(1.0 - c * c, 0.0))
    g = dphi if deriv else phi

    if kind is ActivationKind.TANH:
        def outer(z1):
            inner, _ = quad(lambda z2: norm.pdf(z2) * g(kind, b * (c * z1 + math.sqrt(
                max(1.0 - c * c, 0.0)) * z2)), -_CUT, _CUT, **_QUAD_OPTS)
            return g(kind, a * z1) * inner
        val, _ = quad(lambda z: norm.pdf(z) * outer(z), -_CUT, _CUT, **_QUAD_OPTS)
        return val

    if s2 == 0.0:  # perfectly correlated pair
        return _gauss_quad(lambda z: g(kind, a * z) * g(kind, b * c * z))
    return _gauss_quad(
        lambda z: g(kind, a * z) * _inner_mean(kind, deriv, b * c * z, s2))


def avg_dphi_prod_oracle(kind: ActivationKind, q_s: float, q_r: float, c: float) -> float:
    return avg_phi_prod_oracle(kind, q_s, q_r, c, deriv=True)


# ---------------------------------------------------------------------------
# Finite differences.

def finite_difference_gradient(net, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar output in all parameters."""
    from ntklab.finite_net import forward

    flat = net.flat_params()
    grad = np.empty_like(flat)

    def set_params(values: np.ndarray) -> None:
        pos = 0
        for w, b in zip(net.weights, net.biases):
            w[:] = values[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            b[:] = values[pos:pos + b.size]
            pos += b.size

    for i in range(len(flat)):
        bumped = flat.copy()
        bumped[i] += h
        set_params(bumped)
        f_plus, _ = forward(net, x)
        bumped[i] -= 2.0 * h
        set_params(bumped)
        f_minus, _ = forward(net, x)
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    set_params(flat)
    return grad


def linear_fit_r_squared(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(slope, R^2) of the least-squares line through (x, y)."""
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_res = float(np.sum(resid ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    return float(slope), 1.0 - ss_res / ss_tot
