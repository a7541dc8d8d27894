"""Phase-space discretization.

Velocity: probabilists' Hermite functions, truncated at total degree N_v,
with the basis rotated inside the pure-quadratic block so that the first
d + 2 elements are exactly the collision invariants {1, v_1..v_d, E(v)},
E(v) = (|v|^2 - d) / sqrt(2 d).

Space: uniform tensor grid on a truncation box, rho-weighted quadrature,
central finite-difference stencils (default 4th order) extended by zero
outside the box; the rho-weight makes the boundary choice immaterial below
quadrature tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.polynomial import hermite_e
from scipy.ndimage import correlate1d

from .potential import Potential, SymmetryStructure


class ShapeMismatchError(Exception):
    pass


class EigendecompositionUnavailableError(Exception):
    pass


# central first-derivative stencils (offset -m..m)
_D1 = {
    2: np.array([-0.5, 0.0, 0.5]),
    4: np.array([1 / 12, -2 / 3, 0.0, 2 / 3, -1 / 12]),
    6: np.array([-1 / 60, 3 / 20, -3 / 4, 0.0, 3 / 4, -3 / 20, 1 / 60]),
    8: np.array([1 / 280, -4 / 105, 1 / 5, -4 / 5, 0.0, 4 / 5, -1 / 5, 4 / 105, -1 / 280]),
}
_D2 = {
    2: np.array([1.0, -2.0, 1.0]),
    4: np.array([-1 / 12, 4 / 3, -5 / 2, 4 / 3, -1 / 12]),
    6: np.array([1 / 90, -3 / 20, 3 / 2, -49 / 18, 3 / 2, -3 / 20, 1 / 90]),
    8: np.array([-1 / 560, 8 / 315, -1 / 5, 8 / 5, -205 / 72, 8 / 5, -1 / 5, 8 / 315, -1 / 560]),
}


def _multi_indices(d: int, nv: int):
    """All velocity multi-indices with total degree <= nv, ordered by degree."""
    idx = [k for k in product(range(nv + 1), repeat=d) if sum(k) <= nv]
    idx.sort(key=lambda k: (sum(k), k))
    return [tuple(reversed(k)) for k in idx] if False else idx


@dataclass(frozen=True)
class VelocityBasis:
    dim: int
    order: int                       # N_v, max total Hermite degree
    indices: np.ndarray              # (K, d) tensor multi-indices, pre-rotation
    rotation: np.ndarray             # (K, K): row alpha = final basis in tensor basis
    degrees: np.ndarray              # (K,) total degree per final element
    mult: list                       # d matrices: v_j-multiplication, final basis
    lower: list                      # d matrices: d/dv_j, final basis
    gh_nodes: np.ndarray
    gh_weights: np.ndarray           # normalized against mu

    @property
    def size(self) -> int:
        return self.indices.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.dim + 2

    def eval_functions(self, v: np.ndarray) -> np.ndarray:
        """Evaluate all final basis functions at velocity points v of shape (d, n)."""
        d, n = v.shape
        nv = self.order
        h1 = np.zeros((d, nv + 1, n))
        for j in range(d):
            for deg in range(nv + 1):
                c = np.zeros(deg + 1)
                c[deg] = 1.0
                h1[j, deg] = hermite_e.hermeval(v[j], c) / math.sqrt(math.factorial(deg))
        tensor = np.ones((self.size, n))
        for a, k in enumerate(self.indices):
            for j in range(d):
                tensor[a] *= h1[j, k[j]]
        return self.rotation @ tensor


def make_velocity_basis(dim: int, order: int) -> VelocityBasis:
    if order < 4:
        raise ValueError("velocity order N_v must be at least 4")
    idx = _multi_indices(dim, order)
    K = len(idx)
    pos = {k: a for a, k in enumerate(idx)}
    indices = np.array(idx, dtype=int)

    # rotate the pure-quadratic block so its first member is E(v)
    quad = [pos[tuple(2 * np.eye(dim, dtype=int)[j])] for j in range(dim)]
    R = np.eye(dim)
    u = np.full(dim, 1.0 / math.sqrt(dim))
    if dim > 1:
        A = np.eye(dim)
        A[:, 0] = u
        Q, _ = np.linalg.qr(A)
        if Q[:, 0] @ u < 0:
            Q = -Q
        R = Q.T                       # rows: first is u
    rot = np.eye(K)
    for a in range(dim):
        for b in range(dim):
            rot[quad[a], quad[b]] = R[a, b]

    # reorder: 1, v_1..v_d, E, then the rest (remaining quad combos keep place)
    kernel = [pos[(0,) * dim]]
    kernel += [pos[tuple(np.eye(dim, dtype=int)[j])] for j in range(dim)]
    kernel += [quad[0]]
    rest = [a for a in range(K) if a not in kernel]
    perm = kernel + rest
    P = np.zeros((K, K))
    for new, old in enumerate(perm):
        P[new, old] = 1.0
    Q = P @ rot

    # tensor-basis operators, conjugated into the final basis
    mult, lower = [], []
    for j in range(dim):
        S = np.zeros((K, K))
        A = np.zeros((K, K))
        for a, k in enumerate(idx):
            kj = k[j]
            up = list(k); up[j] += 1
            dn = list(k); dn[j] -= 1
            if tuple(up) in pos:
                S[a, pos[tuple(up)]] = math.sqrt(kj + 1)
                A[a, pos[tuple(up)]] = math.sqrt(kj + 1)
            if kj > 0:
                S[a, pos[tuple(dn)]] = math.sqrt(kj)
        mult.append(Q @ S @ Q.T)
        lower.append(Q @ A @ Q.T)

    nodes, weights = hermite_e.hermegauss(order + 3)
    weights = weights / weights.sum()
    degrees = indices.sum(axis=1)[perm]
    return VelocityBasis(
        dim=dim, order=order, indices=indices, rotation=Q, degrees=degrees,
        mult=mult, lower=lower, gh_nodes=nodes, gh_weights=weights,
    )


# -- spatial grid ---------------------------------------------------------------

@dataclass(frozen=True)
class SpatialGrid:
    dim: int
    shape: tuple
    axes: list                       # d 1-d arrays
    dx: np.ndarray                   # (d,)
    half_width: np.ndarray           # (d,)
    fd_order: int
    X: np.ndarray                    # (d, *shape) mesh
    weights: np.ndarray              # rho(x) * dx^d, shape *shape
    phi: np.ndarray
    grad_phi: np.ndarray             # (d, *shape)
    lap_phi: np.ndarray
    hess_phi: np.ndarray             # (d, d, *shape)

    @property
    def quad_mass(self) -> float:
        return float(self.weights.sum())

    def integrate(self, f: np.ndarray) -> float:
        return float(np.sum(self.weights * f))

    def mean(self, f: np.ndarray) -> float:
        """<f> against rho dx (the weights already carry unit mass)."""
        return self.integrate(f)

    def inner(self, f, g) -> float:
        return float(np.sum(self.weights * f * g))

    def norm(self, f) -> float:
        return math.sqrt(max(self.inner(f, f), 0.0))

    def deriv(self, f: np.ndarray, axis: int, order: int | None = None) -> np.ndarray:
        """Central-difference d/dx_axis with zero extension outside the box."""
        o = self.fd_order if order is None else order
        w = _D1[o] / self.dx[axis]
        return correlate1d(f, w, axis=axis - self.dim + f.ndim, mode="constant", cval=0.0)

    def deriv2(self, f: np.ndarray, axis: int, order: int | None = None) -> np.ndarray:
        o = self.fd_order if order is None else order
        w = _D2[o] / self.dx[axis] ** 2
        return correlate1d(f, w, axis=axis - self.dim + f.ndim, mode="constant", cval=0.0)

    def grad(self, f: np.ndarray) -> np.ndarray:
        return np.stack([self.deriv(f, j) for j in range(self.dim)])

    def laplacian(self, f: np.ndarray) -> np.ndarray:
        out = self.deriv2(f, 0)
        for j in range(1, self.dim):
            out += self.deriv2(f, j)
        return out

    def div_star(self, V: np.ndarray) -> np.ndarray:
        """nabla* . V = -div V + grad phi . V (adjoint of grad in L^2(rho))."""
        out = np.sum(self.grad_phi * V, axis=0)
        for j in range(self.dim):
            out -= self.deriv(V[j], j)
        return out

    def xi2(self) -> np.ndarray:
        r2 = np.sum(self.X ** 2, axis=0)
        return r2 - self.integrate(r2)

    def xi_phi(self) -> np.ndarray:
        return self.phi - self.integrate(self.phi)

    def phi_s(self) -> np.ndarray:
        """phi deviation with its quadratic-profile part removed."""
        return self.xi_phi() - self.integrate(self.lap_phi) / (2 * self.dim) * self.xi2()

    def sparse_deriv(self, axis: int) -> sp.csr_matrix:
        n = self.shape[axis]
        w = _D1[self.fd_order] / self.dx[axis]
        return self._lift_1d(self._banded(n, w), axis)

    def sparse_third_difference(self, axis: int) -> sp.csr_matrix:
        """Plain third difference [-1, 3, -3, 1] / dx, lifted to the tensor grid.

        Used as a grid-scale penalty: O(dx^2 u''') on smooth fields but O(1/dx)
        on the odd-even checkerboard that central stencils cannot see.
        """
        n = self.shape[axis]
        w = np.array([-1.0, 3.0, -3.0, 1.0]) / self.dx[axis]
        return self._lift_1d(self._banded(n, w, center=1), axis)

    @staticmethod
    def _banded(n, w, center=None):
        m = len(w) // 2 if center is None else center
        return sp.diags(
            [np.full(n - abs(k - m), w[k]) for k in range(len(w)) if w[k] != 0.0],
            [k - m for k in range(len(w)) if w[k] != 0.0], shape=(n, n)).tocsr()

    def _lift_1d(self, D, axis):
        mats = [sp.identity(self.shape[a], format="csr") for a in range(self.dim)]
        mats[axis] = D
        out = mats[0]
        for M in mats[1:]:
            out = sp.kron(out, M, format="csr")
        return out


def choose_half_width(pot: Potential, boundary_ratio: float = 1e-16) -> np.ndarray:
    """Per-axis half width making rho at the boundary < ratio * max rho."""
    drop = -math.log(boundary_ratio)
    out = np.zeros(pot.dim)
    for ax in range(pot.dim):
        L = 1.0
        for _ in range(200):
            probe = np.linspace(-L, L, 257)
            pts = np.zeros((pot.dim, probe.size))
            pts[ax] = probe
            vals = pot.phi(pts)
            if min(vals[0], vals[-1]) - vals.min() > drop:
                break
            L *= 1.2
        out[ax] = L
    return out


def make_spatial_grid(
    pot: Potential,
    nx,
    half_width=None,
    fd_order: int = 4,
    boundary_ratio: float = 1e-16,
) -> SpatialGrid:
    d = pot.dim
    nx = np.broadcast_to(np.asarray(nx, dtype=int), (d,)).copy()
    if half_width is None:
        hw = choose_half_width(pot, boundary_ratio)
    else:
        hw = np.broadcast_to(np.asarray(half_width, dtype=float), (d,)).copy()
    axes = [np.linspace(-hw[j], hw[j], nx[j]) for j in range(d)]
    dx = np.array([ax[1] - ax[0] for ax in axes])
    X = np.stack(np.meshgrid(*axes, indexing="ij"))
    phi = pot.phi(X)
    rho = np.exp(-phi)
    weights = rho * np.prod(dx)
    hess = pot.hess(X)
    return SpatialGrid(
        dim=d, shape=tuple(nx), axes=axes, dx=dx, half_width=hw, fd_order=fd_order,
        X=X, weights=weights, phi=phi, grad_phi=pot.grad(X),
        lap_phi=np.einsum("ii...->...", hess), hess_phi=hess,
    )


# -- states and the full discretization -------------------------------------------

@dataclass
class KineticState:
    """Coefficients of h = f / M in the tensor basis: shape (K, *grid.shape)."""

    C: np.ndarray
    disc: "Discretization"
    t: float = 0.0

    def copy(self) -> "KineticState":
        return KineticState(self.C.copy(), self.disc, self.t)

    @property
    def norm(self) -> float:
        return self.disc.norm(self)


@dataclass(frozen=True)
class Discretization:
    potential: Potential
    symmetry: SymmetryStructure
    grid: SpatialGrid
    vbasis: VelocityBasis

    @property
    def dim(self) -> int:
        return self.potential.dim

    @property
    def state_shape(self) -> tuple:
        return (self.vbasis.size,) + self.grid.shape

    def zero_state(self, t: float = 0.0) -> KineticState:
        return KineticState(np.zeros(self.state_shape), self, t)

    def inner(self, a: KineticState, b: KineticState) -> float:
        if a.C.shape != b.C.shape or a.disc is not b.disc:
            raise ShapeMismatchError("states live on different discretizations")
        return float(np.sum(self.grid.weights * np.sum(a.C * b.C, axis=0)))

    def norm(self, a: KineticState) -> float:
        return math.sqrt(max(self.inner(a, a), 0.0))

    def state_from_planes(self, planes: dict, t: float = 0.0) -> KineticState:
        """Build a state from a sparse {mode index: spatial field} mapping."""
        h = self.zero_state(t)
        for k, f in planes.items():
            h.C[k] = f
        return h


def make_discretization(pot, sym, nx, nv, half_width=None, fd_order: int = 4) -> Discretization:
    return Discretization(
        potential=pot, symmetry=sym,
        grid=make_spatial_grid(pot, nx, half_width=half_width, fd_order=fd_order),
        vbasis=make_velocity_basis(pot.dim, nv),
    )


# -- Witten operator  Omega = nabla* . nabla + 1 ----------------------------------

class WittenOperator:
    """Discrete Omega, self-adjoint in L^2(rho) through the flat symmetric form
    B^T B + I with B_j = sqrt(W) D_j / sqrt(W).

    The flat matrix coincides with the conjugated Schrodinger operator
    -Lap + |grad phi|^2/4 - (Lap phi)/2 + 1 up to stencil-order error, while
    keeping constants in its kernel and self-adjointness exact on the grid.
    A sixth-difference penalty (an O(dx^4) perturbation on resolved fields)
    removes the odd-even checkerboard that the central stencil alone leaves
    with a spurious zero of the gradient form.
    """

    DENSE_LIMIT = 4200
    CHECKERBOARD_PENALTY = 1.0 / 64.0

    def __init__(self, grid: SpatialGrid, n_partial: int = 200):
        self.grid = grid
        self.n_total = int(np.prod(grid.shape))
        self.n_partial = n_partial
        w = grid.weights.reshape(-1)
        self._sqw = np.sqrt(w)
        P = sp.identity(self.n_total, format="csr")
        for ax in range(grid.dim):
            D = grid.sparse_deriv(ax)
            B = sp.diags(self._sqw) @ D @ sp.diags(1.0 / self._sqw)
            T = grid.sparse_third_difference(ax)
            H = sp.diags(self._sqw) @ T @ sp.diags(1.0 / self._sqw)
            P = P + B.T @ B + self.CHECKERBOARD_PENALTY * (H.T @ H)
        self._P = P.tocsr()
        self._evals = None
        self._evecs = None
        self._full = False
        self._decompose()

    def _decompose(self):
        if self.n_total <= self.DENSE_LIMIT:
            lam, V = sla.eigh(self._P.toarray())
            self._evals, self._evecs, self._full = lam, V, True
            return
        k = min(self.n_partial, self.n_total - 2)
        try:
            lam, V = spla.eigsh(self._P, k=k, sigma=0.5, which="LM")
        except Exception:
            import pyamg

            ml = pyamg.smoothed_aggregation_solver(self._P.tocsr())
            M = ml.aspreconditioner()
            rng = np.random.default_rng(0)
            X = rng.standard_normal((self.n_total, k))
            lam, V = spla.lobpcg(self._P, X, M=M, largest=False, tol=1e-10, maxiter=400)
        order = np.argsort(lam)
        self._evals, self._evecs, self._full = lam[order], V[:, order], False

    @property
    def is_full_spectrum(self) -> bool:
        return self._full

    @property
    def eigenvalues(self) -> np.ndarray:
        return self._evals

    def eigenfunction(self, k: int) -> np.ndarray:
        """k-th eigenfunction, normalized in L^2(rho)."""
        return (self._evecs[:, k] / self._sqw).reshape(self.grid.shape)

    def apply(self, u: np.ndarray) -> np.ndarray:
        flat = (u.reshape(-1)) * self._sqw
        return (self._P @ flat / self._sqw).reshape(self.grid.shape)

    def _spectral(self, u: np.ndarray, fn) -> np.ndarray:
        flat = (u * self.grid.weights ** 0.5).reshape(-1)
        coef = self._evecs.T @ flat
        out = self._evecs @ (fn(self._evals) * coef)
        if not self._full:
            resid = flat - self._evecs @ coef
            out = out + fn(self._evals[-1]) * resid     # deflated remainder bound
        return (out.reshape(self.grid.shape)) / self.grid.weights ** 0.5

    def solve(self, u: np.ndarray) -> np.ndarray:
        if self._full:
            return self._spectral(u, lambda lam: 1.0 / lam)
        flat = (u * self.grid.weights ** 0.5).reshape(-1)
        sol, info = spla.cg(self._P, flat, rtol=1e-12, atol=0.0, maxiter=2000)
        if info != 0:
            raise EigendecompositionUnavailableError(f"CG for Omega^-1 did not converge ({info})")
        return sol.reshape(self.grid.shape) / self.grid.weights ** 0.5

    def inv_sqrt(self, u: np.ndarray) -> np.ndarray:
        if self._evals is None:
            raise EigendecompositionUnavailableError("no spectrum available")
        return self._spectral(u, lambda lam: lam ** -0.5)

    def apply_vec(self, U: np.ndarray) -> np.ndarray:
        return np.stack([self.apply(U[j]) for j in range(U.shape[0])])

    def solve_vec(self, U: np.ndarray) -> np.ndarray:
        return np.stack([self.solve(U[j]) for j in range(U.shape[0])])

    def inv_sqrt_vec(self, U: np.ndarray) -> np.ndarray:
        return np.stack([self.inv_sqrt(U[j]) for j in range(U.shape[0])])


# -- functional inequality spot checks ---------------------------------------------

def _random_smooth_fields(grid: SpatialGrid, rng, n, components=1):
    """Random band-limited test functions on the box."""
    out = []
    for _ in range(n):
        comps = []
        for _ in range(components):
            f = np.zeros(grid.shape)
            for _k in range(6):
                kvec = rng.integers(1, 5, size=grid.dim)
                phase = rng.uniform(0, 2 * np.pi, size=grid.dim)
                wave = np.ones(grid.shape)
                for j in range(grid.dim):
                    s = [None] * grid.dim
                    x = grid.axes[j]
                    w1 = np.cos(np.pi * kvec[j] * x / grid.half_width[j] + phase[j])
                    shape = [1] * grid.dim
                    shape[j] = -1
                    wave = wave * w1.reshape(shape)
                f += rng.standard_normal() * wave
            comps.append(f)
        out.append(np.stack(comps) if components > 1 else comps[0])
    return out


def verify_functional_inequalities(witten: WittenOperator, n_tests: int = 25, seed: int = 0) -> dict:
    """Worst observed constants for Poincare, Poincare-Lions and Korn inequalities.

    Report-only: each entry is the extremal ratio over a randomized smooth test
    set, which certifies the inequality with a finite constant on the grid.
    """
    g = witten.grid
    rng = np.random.default_rng(seed)
    report = {}

    ratios = []
    for u in _random_smooth_fields(g, rng, n_tests):
        u = u - g.integrate(u)
        den = g.inner(u, u)
        if den < 1e-14:
            continue
        num = sum(g.inner(g.deriv(u, j), g.deriv(u, j)) for j in range(g.dim))
        ratios.append(num / den)
    report["poincare_min_ratio"] = float(min(ratios))

    lo, hi = np.inf, 0.0
    for u in _random_smooth_fields(g, rng, n_tests):
        u = u - g.integrate(u)
        den = g.norm(u)
        if den < 1e-7:
            continue
        num = math.sqrt(sum(g.inner(witten.inv_sqrt(g.deriv(u, j)), g.deriv(u, j))
                            for j in range(g.dim)))
        r = num / den
        lo, hi = min(lo, r), max(hi, r)
    report["lions_min_ratio"], report["lions_max_ratio"] = float(lo), float(hi)

    if g.dim == 1:
        report["korn"] = "skipped (vacuous in d=1: no skew gradients)"
        return report
    worst = np.inf
    for U in _random_smooth_fields(g, rng, n_tests, components=g.dim):
        U = U - np.array([g.integrate(U[j]) for j in range(g.dim)]).reshape(
            (g.dim,) + (1,) * g.dim)
        skew = np.zeros((g.dim, g.dim))
        for i in range(g.dim):
            for j in range(g.dim):
                skew[i, j] = 0.5 * (g.integrate(g.deriv(U[i], j)) - g.integrate(g.deriv(U[j], i)))
        U = U - np.tensordot(skew, g.X, axes=(1, 0))
        den = math.sqrt(sum(g.inner(U[j], U[j]) for j in range(g.dim)))
        if den < 1e-7:
            continue
        num2 = 0.0
        for i in range(g.dim):
            for j in range(g.dim):
                s = 0.5 * (g.deriv(U[i], j) + g.deriv(U[j], i))
                num2 += g.inner(witten.inv_sqrt(s), s)
        worst = min(worst, math.sqrt(max(num2, 0.0)) / den)
    report["korn_min_ratio"] = float(worst)
    return report
