"""Gauss-Hermite quadrature for expectations under the standard normal measure.

Rules are expressed for integrals of the form E[f(z)] with z ~ N(0, 1),
i.e. the probabilists' weight exp(-z^2/2)/sqrt(2*pi).  The two-dimensional
rule integrates over a correlated Gaussian pair built from two independent
standard normals:

    u1 = sqrt(q_s) * z1,   u2 = sqrt(q_r) * (c * z1 + sqrt(1 - c^2) * z2).
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

DEFAULT_NODES = 64


@lru_cache(maxsize=16)
def gauss_hermite_rule(n_nodes: int = DEFAULT_NODES) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights normalized so that sum(w * f(x)) ~ E[f(Z)], Z ~ N(0,1)."""
    x, w = np.polynomial.hermite_e.hermegauss(n_nodes)
    return x, w / np.sqrt(2.0 * np.pi)


def normal_expectation(f, scale: float = 1.0, n_nodes: int = DEFAULT_NODES) -> float:
    """E[f(scale * Z)] for Z ~ N(0, 1)."""
    x, w = gauss_hermite_rule(n_nodes)
    return float(np.dot(w, f(scale * x)))


def normal_pair_expectation(f, q_s: float, q_r: float, c: float,
                            n_nodes: int = DEFAULT_NODES) -> float:
    """E[f(u1) * f(u2)] over the correlated pair with variances q_s, q_r and correlation c."""
    x, w = gauss_hermite_rule(n_nodes)
    z1 = x[:, None]
    z2 = x[None, :]
    u1 = np.sqrt(q_s) * z1
    u2 = np.sqrt(q_r) * (c * z1 + np.sqrt(max(1.0 - c * c, 0.0)) * z2)
    vals = f(u1) * f(u2)
    return float(w @ vals @ w)
