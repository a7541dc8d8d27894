"""Confining potentials: normalization and symmetry structure.

A potential is always used in *normalized* coordinates: the Gibbs density
rho = exp(-phi) integrates to one, is centred, and the averaged Hessian
<D2 phi> equals the identity (or, in "generalized" mode, a positive diagonal
diag(p_j^2), whose square roots p_j are the natural oscillation frequencies
of the harmonic directions).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numpy.polynomial import polynomial as npoly


class NonIntegrableError(Exception):
    """exp(-phi) does not have finite mass on growing truncation domains."""


class DegenerateHessianError(Exception):
    """<D2 phi> is not positive definite; no normalizing change of frame."""


class AmbiguousRankError(Exception):
    """Singular values straddle the tolerance band; detection is not decisive."""


Vec = np.ndarray


@dataclass(frozen=True)
class Potential:
    """A normalized confining potential.

    ``phi``, ``grad`` and ``hess`` act on points in normalized coordinates,
    given as an array of shape ``(dim, ...)``.  The affine frame
    ``x_raw = center + scale @ y`` plus the additive ``shift`` recover the
    raw potential: ``phi(y) = phi_raw(x_raw) + shift``.
    """

    dim: int
    family: str
    shift: float
    center: Vec
    scale: Vec                      # (d, d)
    frequencies: Vec                # (d,) p_j; all ones unless generalized
    generalized: bool
    _phi: Callable = field(repr=False)
    _grad: Callable = field(repr=False)
    _hess: Callable = field(repr=False)
    moment_bound: float | None = None   # <|x|^4 + phi^2 + |grad phi|^4>  (H6)
    quad_tol: float = 1e-8
    half_width: float = 0.0         # truncation half width used during normalization

    # -- evaluation in normalized coordinates ---------------------------------
    def to_raw(self, y: Vec) -> Vec:
        return self.center.reshape((self.dim,) + (1,) * (y.ndim - 1)) + np.tensordot(
            self.scale, y, axes=(1, 0)
        )

    def from_raw(self, x: Vec) -> Vec:
        sinv = np.linalg.inv(self.scale)
        xc = x - self.center.reshape((self.dim,) + (1,) * (x.ndim - 1))
        return np.tensordot(sinv, xc, axes=(1, 0))

    def phi(self, y: Vec) -> Vec:
        return self._phi(self.to_raw(y)) + self.shift

    def grad(self, y: Vec) -> Vec:
        g = self._grad(self.to_raw(y))
        return np.tensordot(self.scale.T, g, axes=(1, 0))

    def hess(self, y: Vec) -> Vec:
        h = self._hess(self.to_raw(y))  # (d, d, ...)
        return np.einsum("ia,ab...,bj->ij...", self.scale.T, h, self.scale)

    def rho(self, y: Vec) -> Vec:
        return np.exp(-self.phi(y))


# -- raw families --------------------------------------------------------------

def _harmonic_raw(d: int):
    def phi(x):
        return 0.5 * np.sum(x ** 2, axis=0)

    def grad(x):
        return x.copy()

    def hess(x):
        out = np.zeros((d, d) + x.shape[1:])
        for i in range(d):
            out[i, i] = 1.0
        return out

    return phi, grad, hess


def _aniso_raw(p2: Vec):
    d = len(p2)
    w = p2.reshape((d,) + (1,) * 1)

    def phi(x):
        return 0.5 * np.sum(p2.reshape((d,) + (1,) * (x.ndim - 1)) * x ** 2, axis=0)

    def grad(x):
        return p2.reshape((d,) + (1,) * (x.ndim - 1)) * x

    def hess(x):
        out = np.zeros((d, d) + x.shape[1:])
        for i in range(d):
            out[i, i] = p2[i]
        return out

    _ = w
    return phi, grad, hess


def _power_law_raw(d: int, gamma: float, a: float):
    def phi(x):
        return (1.0 + (a ** 2) * np.sum(x ** 2, axis=0)) ** (gamma / 2)

    def grad(x):
        r2 = np.sum(x ** 2, axis=0)
        fac = gamma * (a ** 2) * (1.0 + (a ** 2) * r2) ** (gamma / 2 - 1)
        return fac * x

    def hess(x):
        r2 = np.sum(x ** 2, axis=0)
        base = 1.0 + (a ** 2) * r2
        f1 = gamma * (a ** 2) * base ** (gamma / 2 - 1)
        f2 = gamma * (gamma - 2) * (a ** 4) * base ** (gamma / 2 - 2)
        out = np.einsum("i...,j...->ij...", x, x) * f2
        for i in range(d):
            out[i, i] += f1
        return out

    return phi, grad, hess


def _polynomial_raw(coeffs: np.ndarray):
    """Tensor-product polynomial phi(x) = sum_ij c[i,j] x1^i x2^j (d = 1 or 2).

    Evaluation goes through numpy's Horner-scheme polyval; derivatives come
    from analytically differentiated coefficient tables.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    d = coeffs.ndim
    if d not in (1, 2):
        raise ValueError("polynomial potentials support d = 1 or 2")

    def _eval(c, x):
        if d == 1:
            return npoly.polyval(x[0], c)
        return npoly.polyval2d(x[0], x[1], c)

    dcoeffs = [npoly.polyder(coeffs, axis=ax) for ax in range(d)]
    ddcoeffs = [[npoly.polyder(dcoeffs[i], axis=j) for j in range(d)] for i in range(d)]

    def phi(x):
        return _eval(coeffs, x)

    def grad(x):
        return np.stack([_eval(dcoeffs[i], x) for i in range(d)])

    def hess(x):
        rows = [np.stack([_eval(ddcoeffs[i][j], x) for j in range(d)]) for i in range(d)]
        return np.stack(rows)

    return phi, grad, hess


def _radial_polynomial_raw(d: int, coeffs: np.ndarray):
    """phi(x) = q(|x|^2) with q given by a 1-d coefficient list."""
    q = np.asarray(coeffs, dtype=float)
    dq = npoly.polyder(q)
    ddq = npoly.polyder(dq)

    def phi(x):
        return npoly.polyval(np.sum(x ** 2, axis=0), q)

    def grad(x):
        r2 = np.sum(x ** 2, axis=0)
        return 2.0 * npoly.polyval(r2, dq) * x

    def hess(x):
        r2 = np.sum(x ** 2, axis=0)
        f1 = 2.0 * npoly.polyval(r2, dq)
        f2 = 4.0 * npoly.polyval(r2, ddq)
        out = np.einsum("i...,j...->ij...", x, x) * f2
        for i in range(d):
            out[i, i] += f1
        return out

    return phi, grad, hess


# -- quadrature used during normalization --------------------------------------

def _quad_grid(d: int, half_width: float, n: int):
    ax = (np.arange(n) + 0.5) * (2 * half_width / n) - half_width
    mesh = np.meshgrid(*([ax] * d), indexing="ij")
    pts = np.stack(mesh)                       # (d, n, ..., n)
    vol = (2 * half_width / n) ** d
    return pts.reshape(d, -1), vol


def _find_half_width(phi, d: int, drop: float = 40.0, max_width: float = 1e3):
    """Half width L with phi - min(phi) > drop on the boundary of [-L, L]^d."""
    L = 1.0
    while L < max_width:
        probe = np.linspace(-L, L, 129)
        vals = []
        for ax in range(d):
            pts = np.zeros((d, probe.size))
            pts[ax] = probe
            vals.append(phi(pts))
        vals = np.stack(vals)
        vmin = vals.min()
        edge = max(v[0] for v in vals), max(v[-1] for v in vals)
        if min(edge) - vmin > drop:
            return L
        L *= 1.4
    raise NonIntegrableError("exp(-phi) mass does not localize on [-L, L]^d up to L = 1e3")


def normalize(
    phi: Callable,
    grad: Callable,
    hess: Callable,
    dim: int,
    family: str = "custom",
    *,
    generalized: bool = False,
    quad_points: int = 512,
    tol: float = 1e-10,
    max_iter: int = 40,
) -> Potential:
    """Bring a raw potential into the normalized frame.

    Determines ``shift`` (unit mass), ``center`` (zero mean) and ``scale``
    (averaged Hessian equal to identity, or merely diagonalized with entries
    p_j^2 when ``generalized``) by fixed-point iteration over quadratures on a
    self-selected truncation box.
    """
    if dim >= 3 and quad_points > 128:
        quad_points = 128
    pot = Potential(
        dim=dim, family=family, shift=0.0, center=np.zeros(dim), scale=np.eye(dim),
        frequencies=np.ones(dim), generalized=generalized,
        _phi=phi, _grad=grad, _hess=hess,
    )
    prev_mass = None
    for _ in range(max_iter):
        L = _find_half_width(pot.phi, dim)
        pts, vol = _quad_grid(dim, L, quad_points)
        rho = pot.rho(pts)
        mass = rho.sum() * vol
        if not np.isfinite(mass) or mass <= 0:
            raise NonIntegrableError("quadrature of exp(-phi) diverges")
        if prev_mass is not None and mass > 4.0 * prev_mass and mass > 1e6:
            raise NonIntegrableError("mass keeps growing under domain refinement")
        prev_mass = mass

        mean = (pts * rho).sum(axis=1) * vol / mass
        hbar = (pot.hess(pts) * rho).sum(axis=-1) * vol / mass
        hbar = 0.5 * (hbar + hbar.T)
        evals, evecs = np.linalg.eigh(hbar)
        if np.any(evals <= 0):
            raise DegenerateHessianError(f"<D2 phi> eigenvalues {evals}")

        done = (
            abs(mass - 1.0) < tol
            and np.max(np.abs(mean)) < tol
            and (
                np.max(np.abs(hbar - np.eye(dim))) < 1e3 * tol
                if not generalized
                else np.max(np.abs(hbar - np.diag(np.diag(hbar)))) < 1e3 * tol
            )
        )
        if done:
            freqs = np.sqrt(np.diag(hbar)) if generalized else np.ones(dim)
            return replace(
                pot,
                frequencies=freqs,
                half_width=L,
                moment_bound=_moment_bound(pot, pts, rho, vol),
            )

        # compose updates into the affine frame
        shift = pot.shift + np.log(mass)
        center = pot.center + pot.scale @ mean
        if generalized:
            # rotate so <D2 phi> becomes diagonal; keep eigenvalue order stable
            # by matching each eigenvector to its dominant axis
            order = np.argsort(np.argmax(np.abs(evecs), axis=0))
            T = evecs[:, order]
            T = T * np.sign(np.diag(T))
        else:
            T = evecs @ np.diag(evals ** -0.5) @ evecs.T
        scale = pot.scale @ T
        pot = replace(pot, shift=shift, center=center, scale=scale)
    raise NonIntegrableError("normalization did not converge")


def _moment_bound(pot: Potential, pts, rho, vol) -> float:
    g = pot.grad(pts)
    x4 = np.sum(pts ** 2, axis=0) ** 2
    return float(((x4 + pot.phi(pts) ** 2 + np.sum(g ** 2, axis=0) ** 2) * rho).sum() * vol)


# -- convenience constructors ---------------------------------------------------

def harmonic(dim: int) -> Potential:
    """phi = |x|^2 / 2 + (d/2) log 2 pi, already exactly normalized."""
    phi, grad, hess = _harmonic_raw(dim)
    return Potential(
        dim=dim, family="harmonic", shift=0.5 * dim * np.log(2 * np.pi),
        center=np.zeros(dim), scale=np.eye(dim), frequencies=np.ones(dim),
        generalized=False, _phi=phi, _grad=grad, _hess=hess,
        moment_bound=float(dim * (dim + 2) + _gauss_phi2(dim) + _gauss_x4(dim)),
        half_width=0.0,
    )


def _gauss_x4(d):
    # <|x|^4> for the standard Gaussian
    return d * (d + 2)


def _gauss_phi2(d):
    # <phi^2> with phi = |x|^2/2 + (d/2) log 2 pi
    c = 0.5 * d * np.log(2 * np.pi)
    return 0.25 * d * (d + 2) + c * d + c * c


def anisotropic_harmonic(p: Vec, generalized: bool = True) -> Potential:
    """phi = sum p_j^2 x_j^2 / 2 (+ normalizing constant).

    With ``generalized=False`` the frame is rescaled axis by axis so the
    potential becomes the fully harmonic one.
    """
    p = np.asarray(p, dtype=float)
    d = p.size
    phi, grad, hess = _aniso_raw(p ** 2)
    shift = float(np.sum(0.5 * np.log(2 * np.pi / p ** 2)))
    if generalized:
        return Potential(
            dim=d, family="anisotropic_harmonic", shift=shift, center=np.zeros(d),
            scale=np.eye(d), frequencies=p.copy(), generalized=True,
            _phi=phi, _grad=grad, _hess=hess,
        )
    return Potential(
        dim=d, family="anisotropic_harmonic", shift=shift, center=np.zeros(d),
        scale=np.diag(1.0 / p), frequencies=np.ones(d), generalized=False,
        _phi=phi, _grad=grad, _hess=hess,
    )


def power_law(dim: int, gamma: float, a: float = 1.0, **kw) -> Potential:
    """phi = (1 + |a x|^2)^(gamma/2) - Z, numerically normalized (gamma > 1)."""
    if gamma <= 1:
        raise ValueError("power-law confinement needs gamma > 1")
    phi, grad, hess = _power_law_raw(dim, gamma, a)
    return normalize(phi, grad, hess, dim, family="power_law", **kw)


def polynomial(coeffs, **kw) -> Potential:
    phi, grad, hess = _polynomial_raw(np.asarray(coeffs, dtype=float))
    return normalize(phi, grad, hess, np.asarray(coeffs).ndim, family="polynomial", **kw)


def radial_polynomial(dim: int, coeffs, **kw) -> Potential:
    phi, grad, hess = _radial_polynomial_raw(dim, np.asarray(coeffs, dtype=float))
    return normalize(phi, grad, hess, dim, family="radial_polynomial", **kw)


def custom(dim: int, phi, grad, hess, **kw) -> Potential:
    """Wrap user callables; analytic grad/hess are required, not differenced."""
    return normalize(phi, grad, hess, dim, family="custom", **kw)


# -- symmetry detection ----------------------------------------------------------

@dataclass(frozen=True)
class SymmetryStructure:
    """Harmonic directions and compatible infinitesimal rotations of phi."""

    harmonic_indices: tuple          # I_phi
    d_phi: int                       # dim of span{grad phi(x) - diag(p^2) x}
    harmonic_frequencies: Vec        # p_i for i in I_phi
    rotation_basis: list             # skew matrices spanning R_phi, <Ax.Bx>-orthonormal
    rotation_complement: list        # <Ax.Bx>-orthonormal basis of R_phi^perp
    detection_tolerance: float

    @property
    def pulsating_allowed(self) -> bool:
        """Pulsating modes exist only if every direction is harmonic with one frequency."""
        if self.d_phi > 0:
            return False
        p = self.harmonic_frequencies
        return bool(p.size == 0 or np.allclose(p, p[0], rtol=1e-9))

    @property
    def pulsation_frequency(self) -> float:
        if not self.pulsating_allowed:
            raise ValueError("no pulsating modes for this potential")
        p = self.harmonic_frequencies
        return float(p[0]) if p.size else 1.0


def _rank_with_gap(sigma: np.ndarray, tol: float, scale: float):
    """Number of singular values above tol*scale, demanding a decisive gap."""
    sigma = np.asarray(sigma, dtype=float)
    big = sigma > tol * scale
    r = int(big.sum())
    if 0 < r < sigma.size:
        gap = sigma[r - 1] / max(sigma[r], 1e-300)
        if gap < 1e3:
            raise AmbiguousRankError(
                f"singular values {sigma} straddle tol band (gap {gap:.2e} < 1e3)"
            )
    return r


def detect_harmonic_directions(pot: Potential, n_samples: int = 48, tol: float = 1e-8) -> SymmetryStructure:
    """Estimate E_phi = span{grad phi(x) - diag(p^2) x} and the index set I_phi."""
    d = pot.dim
    L = pot.half_width if pot.half_width > 0 else _find_half_width(pot.phi, d)
    rng = np.random.default_rng(1234)
    pts = rng.uniform(-0.6 * L, 0.6 * L, size=(d, n_samples * d + 7))
    p2 = pot.frequencies ** 2
    resid = pot.grad(pts) - p2[:, None] * pts
    sigma = np.linalg.svd(resid, compute_uv=False)
    scale = max(float(np.linalg.norm(pts) / np.sqrt(pts.shape[1])), 1.0)
    r = _rank_with_gap(sigma, tol, scale)
    d_phi = r
    if d_phi < d:
        # harmonic subspace = null space of the sample matrix; demand axis alignment
        u = np.linalg.svd(resid, full_matrices=True)[0]
        null = u[:, r:]
        idx = []
        for k in range(null.shape[1]):
            j = int(np.argmax(np.abs(null[:, k])))
            if abs(abs(null[j, k]) - 1.0) > 1e-6:
                raise AmbiguousRankError("harmonic subspace is not axis aligned")
            idx.append(j)
        harmonic = tuple(sorted(idx))
    else:
        harmonic = ()
    return SymmetryStructure(
        harmonic_indices=harmonic,
        d_phi=d_phi,
        harmonic_frequencies=pot.frequencies[list(harmonic)],
        rotation_basis=[],
        rotation_complement=[],
        detection_tolerance=tol,
    )


def _skew_basis(d: int):
    out = []
    for a in range(d):
        for b in range(a + 1, d):
            E = np.zeros((d, d))
            E[a, b] = -1.0
            E[b, a] = 1.0
            out.append(E)
    return out


def rotation_forms(pot: Potential, quad_points: int = 384):
    """Gram matrices G_AB = <(grad phi . Ax)(grad phi . Bx)> and M_AB = <Ax . Bx>."""
    d = pot.dim
    basis = _skew_basis(d)
    n = len(basis)
    if n == 0:
        return basis, np.zeros((0, 0)), np.zeros((0, 0))
    L = pot.half_width if pot.half_width > 0 else _find_half_width(pot.phi, d)
    pts, vol = _quad_grid(d, L, quad_points)
    rho = pot.rho(pts)
    g = pot.grad(pts)
    G = np.zeros((n, n))
    M = np.zeros((n, n))
    fields = [np.tensordot(E, pts, axes=(1, 0)) for E in basis]
    proj = [np.sum(g * f, axis=0) for f in fields]
    for i in range(n):
        for j in range(i, n):
            G[i, j] = G[j, i] = np.sum(proj[i] * proj[j] * rho) * vol
            M[i, j] = M[j, i] = np.sum(np.sum(fields[i] * fields[j], axis=0) * rho) * vol
    return basis, G, M


def detect_rotations(pot: Potential, tol: float = 1e-8, quad_points: int = 384) -> SymmetryStructure:
    """Full symmetry structure: harmonic directions plus R_phi / R_phi^perp."""
    part = detect_harmonic_directions(pot, tol=tol)
    basis, G, M = rotation_forms(pot, quad_points=quad_points)
    n = len(basis)
    if n == 0:
        return part
    # generalized nullspace of G in the M metric
    w, V = np.linalg.eigh(M)
    if np.any(w <= 0):
        raise DegenerateHessianError("degenerate <Ax.Bx> metric on skew space")
    Mih = V @ np.diag(w ** -0.5) @ V.T
    lam, U = np.linalg.eigh(Mih @ G @ Mih)
    lam = np.maximum(lam, 0.0)
    sigma = np.sqrt(lam)[::-1]                      # descending
    r = _rank_with_gap(sigma, tol, max(sigma[0], 1.0))
    coeffs = Mih @ U                                 # columns are M-orthonormal
    null_cols = list(range(0, n - r))                # ascending eigenvalues: first n-r
    comp_cols = list(range(n - r, n))
    def mats(cols):
        return [sum(c[k] * basis[k] for k in range(n)) for c in (coeffs[:, j] for j in cols)]
    return SymmetryStructure(
        harmonic_indices=part.harmonic_indices,
        d_phi=part.d_phi,
        harmonic_frequencies=part.harmonic_frequencies,
        rotation_basis=mats(null_cols),
        rotation_complement=mats(comp_cols),
        detection_tolerance=tol,
    )
