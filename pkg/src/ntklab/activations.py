"""Supported activation functions and their derivatives.

ReLU and erf admit closed-form Gaussian integrals for the signal-propagation
maps; tanh is handled by Gauss-Hermite quadrature only.
"""
from __future__ import annotations

import enum

import numpy as np
from scipy.special import erf as _erf


class ActivationKind(enum.Enum):
    RELU = "relu"
    ERF = "erf"
    TANH = "tanh"

    @property
    def has_closed_form(self) -> bool:
        return self in (ActivationKind.RELU, ActivationKind.ERF)

    @classmethod
    def from_name(cls, name: str) -> "ActivationKind":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown activation {name!r}; expected one of "
                             f"{[k.value for k in cls]}") from None


_SQRT_PI = np.sqrt(np.pi)


def phi(kind: ActivationKind, u):
    """Apply the activation elementwise."""
    if kind is ActivationKind.RELU:
        return np.maximum(u, 0.0)
    if kind is ActivationKind.ERF:
        return _erf(u)
    return np.tanh(u)


def dphi(kind: ActivationKind, u):
    """Derivative of the activation; the ReLU subgradient at 0 is defined as 0."""
    if kind is ActivationKind.RELU:
        return np.where(u > 0.0, 1.0, 0.0)
    if kind is ActivationKind.ERF:
        return 2.0 / _SQRT_PI * np.exp(-np.square(u))
    return 1.0 / np.square(np.cosh(u))
