"""BGK relaxation operator: C h = -lambda (h - Pi h).

Pi is the L^2(mu)-orthogonal projector onto the collision invariants
span{1, v_1..v_d, E(v)}, which occupy the first d + 2 slots of the velocity
basis; the operator is therefore diagonal with eigenvalues {0, -lambda}, its
spectral gap constant is lambda exactly, and apply() is an O(states) scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import Discretization, KineticState, ShapeMismatchError


@dataclass(frozen=True)
class BgkOperator:
    disc: Discretization
    rate: float = 1.0

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("collision rate must be positive")

    @property
    def gap(self) -> float:
        """Spectral gap constant c_C; exact for BGK."""
        return self.rate

    @property
    def kernel_size(self) -> int:
        return self.disc.vbasis.kernel_size

    def apply(self, h: KineticState) -> KineticState:
        if h.disc is not self.disc:
            raise ShapeMismatchError("state from a different discretization")
        out = h.disc.zero_state(h.t)
        k = self.kernel_size
        out.C[k:] = -self.rate * h.C[k:]
        return out

    def apply_inplace(self, out: np.ndarray, C: np.ndarray) -> None:
        k = self.kernel_size
        out[:k] += 0.0
        out[k:] -= self.rate * C[k:]

    def relax(self, C: np.ndarray, dt: float) -> None:
        """Exact collision substep: scale the microscopic block by e^(-lambda dt)."""
        C[self.kernel_size:] *= np.exp(-self.rate * dt)


def micro_projection(h: KineticState):
    """Split into macroscopic fields and the microscopic remainder.

    Returns (r, m, e, h_perp) with r(x) = int h mu dv, m(x) = int v h mu dv,
    e(x) = int E h mu dv; these are the leading Hermite coefficients, so the
    Pythagoras identity |h|^2 = |r|^2 + |m|^2 + |e|^2 + |h_perp|^2 is exact.
    """
    d = h.disc.dim
    r = h.C[0].copy()
    m = h.C[1:1 + d].copy()
    e = h.C[1 + d].copy()
    h_perp = h.disc.zero_state(h.t)
    h_perp.C[d + 2:] = h.C[d + 2:]
    return r, m, e, h_perp


def perp_norm(h: KineticState) -> float:
    k = h.disc.vbasis.kernel_size
    return float(np.sqrt(max(np.sum(h.disc.grid.weights * np.sum(h.C[k:] ** 2, axis=0)), 0.0)))


def macro_norms(h: KineticState):
    """(|r|, |m|, |e|, |h_perp|) without materializing the split states."""
    d = h.disc.dim
    w = h.disc.grid.weights

    def nrm(block):
        return float(np.sqrt(max(np.sum(w * np.sum(block ** 2, axis=0)), 0.0)))

    return (
        nrm(h.C[0:1]),
        nrm(h.C[1:1 + d]),
        nrm(h.C[1 + d:2 + d]),
        nrm(h.C[d + 2:]),
    )
