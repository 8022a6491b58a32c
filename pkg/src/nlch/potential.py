"""Single-well potential, its convex/concave splitting, and the mobility.

The potential psi(r) = psi1(r) + psi2(r) has one singularity at r = 1 and
an unstable zero at r = 0. The singular logarithmic part psi1 is convex
and treated implicitly by the scheme; the cubic part psi2 is concave on
[0, 1] and extended to a C^2 function on all of R by a second-order
Taylor polynomial about r = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PotentialParams:
    """Equilibrium fraction phibar in (0,1) and interface parameter epsilon > 0."""

    phibar: float
    epsilon: float

    def __post_init__(self):
        if not 0.0 < self.phibar < 1.0:
            raise ValueError(f"phibar must lie in (0,1), got {self.phibar}")
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class MobilityParams:
    """Degeneracy exponent alpha >= 0 and friction constant M > 0."""

    alpha: float
    friction: float = 1.0

    def __post_init__(self):
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not self.friction > 0.0:
            raise ValueError(f"friction must be positive, got {self.friction}")


def _check_below_one(r):
    if np.any(np.asarray(r) >= 1.0):
        raise ValueError("psi1 evaluated at r >= 1 (logarithmic singularity); "
                         "a solver iterate here indicates a projection or barrier bug")


def psi1(r, p: PotentialParams):
    """Convex singular part -(1-phibar)*log(1-r), for r < 1."""
    r = np.asarray(r, dtype=float)
    _check_below_one(r)
    return -(1.0 - p.phibar) * np.log1p(-r)


def psi1_prime(r, p: PotentialParams):
    r = np.asarray(r, dtype=float)
    _check_below_one(r)
    return (1.0 - p.phibar) / (1.0 - r)


def psi1_second(r, p: PotentialParams):
    r = np.asarray(r, dtype=float)
    _check_below_one(r)
    return (1.0 - p.phibar) / (1.0 - r) ** 2


def psi2(r, p: PotentialParams):
    """Concave cubic part, quadratically extended for r >= 1.

    For r < 1: -r^3/3 - (1-phibar)(r^2/2 + r); for r >= 1 the second-order
    Taylor polynomial about r = 1, which matches value and first two
    derivatives there.
    """
    r = np.asarray(r, dtype=float)
    q = 1.0 - p.phibar
    inner = -(r ** 3) / 3.0 - q * (r ** 2 / 2.0 + r)
    v1 = -1.0 / 3.0 - 1.5 * q          # psi2(1)
    d1 = -1.0 - 2.0 * q                # psi2'(1)
    s1 = -2.0 - q                      # psi2''(1)
    outer = v1 + d1 * (r - 1.0) + 0.5 * s1 * (r - 1.0) ** 2
    return np.where(r < 1.0, inner, outer)


def psi2_prime(r, p: PotentialParams):
    r = np.asarray(r, dtype=float)
    q = 1.0 - p.phibar
    inner = -(r ** 2) - q * (r + 1.0)
    outer = (-1.0 - 2.0 * q) + (-2.0 - q) * (r - 1.0)
    return np.where(r < 1.0, inner, outer)


def psi1_lambda(r, lam: float, p: PotentialParams):
    """Regularized convex part: quadratic continuation beyond r = 1 - lam.

    Returns (value, derivative). Below the cutoff both equal psi1/psi1';
    at and above it the second derivative is frozen at its cutoff value,
    so the pair is C^1 across r = 1 - lam and defined on all of R.
    """
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0,1), got {lam}")
    r = np.asarray(r, dtype=float)
    q = 1.0 - p.phibar
    below = r < 1.0 - lam
    rs = np.where(below, r, 0.0)  # keep psi1 off its singular branch
    val_in = -q * np.log1p(-rs)
    der_in = q / (1.0 - rs)
    one_minus = 1.0 - r
    val_out = (-q * np.log(lam) + 1.5 * q
               - (2.0 / lam) * q * one_minus
               + q / (2.0 * lam ** 2) * one_minus ** 2)
    der_out = (2.0 / lam) * q - (q / lam ** 2) * one_minus
    return np.where(below, val_in, val_out), np.where(below, der_in, der_out)


def mobility(r, m: MobilityParams):
    """Degenerate mobility b(r) = r^alpha (1-r)^2 / M, input clamped to [0,1]."""
    r = np.clip(np.asarray(r, dtype=float), 0.0, 1.0)
    return r ** m.alpha * (1.0 - r) ** 2 / m.friction


def convexity_margin(p: PotentialParams) -> float:
    """Threshold (2 + (1-phibar) - 3*(1-phibar)^(1/3)) / epsilon.

    The kernel condition holds when epsilon * inf (J*1)_h exceeds this.
    """
    q = 1.0 - p.phibar
    return (2.0 + q - 3.0 * np.cbrt(q)) / p.epsilon


def separation_threshold(p: PotentialParams) -> float:
    """Threshold (1-phibar)/epsilon for the strict separation regime."""
    return (1.0 - p.phibar) / p.epsilon
