"""Discrete population spectra, the spike map phi, support edges and the LSD.

A population spectrum H is a finite set of point masses ``(t_k, w_k)``. Together
with the aspect ratio ``c = p/n`` (possibly ``inf``) and the moments ``a, b`` it
determines

    phi(x)  = x + (1/b) sum_k w_k t_k^2 / (x - t_k / sqrt(c b))
    phi'(x) = 1 - (1/b) sum_k w_k t_k^2 / (x - t_k / sqrt(c b))^2

and the Stieltjes transform ``s(z)`` of the limiting spectral distribution of
the renormalized Gram matrix, the unique solution with ``Im s > 0`` of

    z = -1/s - (s/b) sum_k w_k t_k^2 / (1 + s t_k / sqrt(c b)).

For ``c = inf`` every formula collapses to the semicircle case: ``phi(x) = x + 1/x``
and ``s(z) = (-z + sqrt(z^2 - 4)) / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import optimize

from . import _kernels
from .errors import (
    BranchAmbiguityError,
    EmptyInputError,
    InputError,
    NoRootFoundError,
    NonConvergenceError,
    NonPositiveEigenvalueError,
    PoleViolationError,
)

STIELTJES_TOL = 1e-10
EDGE_TOL = 1e-12
_MERGE_RTOL = 1e-12
_POLY_MAX_POINTS = 64


@dataclass(frozen=True, eq=False)
class DiscreteSpectrum:
    """Weighted point masses ``t`` (ascending, positive) with weights ``w`` summing to one."""

    t: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).ravel()
        w = np.asarray(self.w, dtype=np.float64).ravel()
        if t.size == 0:
            raise EmptyInputError("spectrum has no points")
        if t.shape != w.shape:
            raise InputError("t and w must have the same length")
        if not np.all(np.isfinite(t)) or np.any(t <= 0):
            raise NonPositiveEigenvalueError("spectrum points must be positive and finite")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise InputError("weights must be nonnegative")
        total = w.sum()
        if total <= 0:
            raise InputError("weights sum to zero")
        if abs(total - 1.0) > 1e-12:
            raise InputError(f"weights sum to {total!r}, expected 1")
        order = np.argsort(t, kind="stable")
        t, w = t[order], w[order]
        # merge (near-)duplicates; zero-weight points carry no mass and are dropped
        new_group = np.ones(t.size, dtype=bool)
        new_group[1:] = np.diff(t) > _MERGE_RTOL * np.maximum(1.0, t[1:])
        ids = np.cumsum(new_group) - 1
        tm = t[new_group]
        wm = np.bincount(ids, weights=w)
        keep = wm > 0
        tm, wm = tm[keep], wm[keep]
        tm.setflags(write=False)
        wm.setflags(write=False)
        object.__setattr__(self, "t", tm)
        object.__setattr__(self, "w", wm)

    @classmethod
    def from_points(cls, points: Iterable[tuple[float, float]]) -> "DiscreteSpectrum":
        pts = list(points)
        if not pts:
            raise EmptyInputError("spectrum has no points")
        t, w = zip(*pts)
        return cls(np.array(t, dtype=float), np.array(w, dtype=float))

    @property
    def points(self) -> list[tuple[float, float]]:
        return [(float(a), float(b)) for a, b in zip(self.t, self.w)]

    @property
    def a(self) -> float:
        return float(np.dot(self.w, self.t))

    @property
    def b(self) -> float:
        return float(np.dot(self.w, self.t * self.t))

    def __repr__(self):
        return f"DiscreteSpectrum(points={self.points!r})"


def spectrum_from_eigenvalues(eigs: Sequence[float]) -> DiscreteSpectrum:
    """Empirical spectrum with mass 1/len at each eigenvalue."""
    e = np.asarray(eigs, dtype=np.float64).ravel()
    if e.size == 0:
        raise EmptyInputError("no eigenvalues given")
    if not np.all(np.isfinite(e)) or np.any(e <= 0):
        raise NonPositiveEigenvalueError("eigenvalues must be positive")
    # count exact repeats first so weights are k/len rather than sums of 1/len
    t, counts = np.unique(e, return_counts=True)
    return DiscreteSpectrum(t, counts / e.size)


@dataclass(frozen=True)
class RegimeParams:
    """Aspect ratio ``c`` (``math.inf`` allowed) and the first two moments of H."""

    c: float
    a: float
    b: float

    def __post_init__(self):
        c, a, b = float(self.c), float(self.a), float(self.b)
        if not (c > 0):
            raise InputError("c must be positive")
        if not (b > 0) or not math.isfinite(b):
            raise InputError("b must be positive and finite")
        if b < a * a * (1 - 1e-12):
            raise InputError("b must be at least a^2")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @classmethod
    def from_spectrum(cls, H: DiscreteSpectrum, c: float) -> "RegimeParams":
        return cls(c=c, a=H.a, b=H.b)

    @property
    def infinite(self) -> bool:
        return math.isinf(self.c)

    @property
    def inv_scale(self) -> float:
        """``1/sqrt(c b)``; zero when c is infinite."""
        return 0.0 if self.infinite else 1.0 / math.sqrt(self.c * self.b)


@dataclass(frozen=True)
class SupportEdges:
    a_frak: float
    b_frak: float


def largest_pole(H: DiscreteSpectrum, r: RegimeParams) -> float:
    return float(H.t[-1]) * r.inv_scale


def _phi_raw(H, r, x):
    """phi and phi' without domain checks (vectorized)."""
    x = np.asarray(x, dtype=np.float64)
    if r.infinite:
        return x + 1.0 / x, 1.0 - 1.0 / (x * x)
    f, df = _kernels.phi_values(x.ravel(), H.t, H.w, r.b, r.inv_scale)
    return f.reshape(x.shape), df.reshape(x.shape)


def _check_domain(H, r, x):
    x = np.asarray(x, dtype=np.float64)
    if r.infinite:
        if np.any(x == 0):
            raise PoleViolationError("phi has a pole at 0 when c is infinite")
    else:
        pole = largest_pole(H, r)
        if np.any(x <= pole):
            raise PoleViolationError(f"x must exceed the largest pole {pole!r}")
    return x


def _scalar_or_array(v, like):
    return float(v) if np.ndim(like) == 0 else v


def phi(H: DiscreteSpectrum, r: RegimeParams, x):
    """The spike map; accepts a scalar or an array."""
    x = _check_domain(H, r, x)
    return _scalar_or_array(_phi_raw(H, r, x)[0], x)


def phi_prime(H: DiscreteSpectrum, r: RegimeParams, x):
    x = _check_domain(H, r, x)
    return _scalar_or_array(_phi_raw(H, r, x)[1], x)


def _dphi_scalar(H, r, x):
    return float(_phi_raw(H, r, np.array([x]))[1][0])


def _phi_scalar(H, r, x):
    return float(_phi_raw(H, r, np.array([x]))[0][0])


def support_edge(H: DiscreteSpectrum, r: RegimeParams) -> SupportEdges:
    """Largest critical point of phi right of the poles and the right edge phi(a_frak)."""
    if r.infinite:
        return SupportEdges(1.0, 2.0)
    pole = largest_pole(H, r)
    scale = max(1.0, pole)
    eps = 1e-8 * scale
    lo = None
    for _ in range(40):
        if _dphi_scalar(H, r, pole + eps) < 0:
            lo = pole + eps
            break
        eps *= 0.5
    if lo is None:
        raise NoRootFoundError("phi' is nonnegative just right of the largest pole")
    hi = pole + scale
    for _ in range(200):
        if _dphi_scalar(H, r, hi) > 0:
            break
        hi = pole + 2.0 * (hi - pole)
    else:
        raise NoRootFoundError("phi' never turns positive")
    # phi' is strictly increasing right of the largest pole, so the root is unique
    root = optimize.brentq(lambda x: _dphi_scalar(H, r, x), lo, hi, xtol=EDGE_TOL, rtol=4 * np.finfo(float).eps)
    return SupportEdges(float(root), _phi_scalar(H, r, root))


def _left_critical(H, r):
    """Unique root of phi' left of the smallest pole (phi' falls from 1 to -inf there)."""
    first = float(H.t[0]) * r.inv_scale
    scale = max(1.0, first)
    eps = 1e-8 * scale
    hi = None
    for _ in range(40):
        if _dphi_scalar(H, r, first - eps) < 0:
            hi = first - eps
            break
        eps *= 0.5
    if hi is None:
        raise NoRootFoundError("phi' does not change sign left of the smallest pole")
    lo = first - scale
    while _dphi_scalar(H, r, lo) <= 0:
        lo = first - 2.0 * (first - lo)
    return float(optimize.brentq(lambda x: _dphi_scalar(H, r, x), lo, hi, xtol=EDGE_TOL, rtol=4 * np.finfo(float).eps))


def left_edge(H: DiscreteSpectrum, r: RegimeParams) -> float:
    """Left endpoint of the continuous part of the LSD support."""
    if r.infinite:
        return -2.0
    return _phi_scalar(H, r, _left_critical(H, r))


def atom_location(H: DiscreteSpectrum, r: RegimeParams) -> float | None:
    """Point mass of the LSD when c < 1 (rank deficiency), else None."""
    if r.infinite or r.c >= 1:
        return None
    return -math.sqrt(r.c / r.b) * r.a


def invert_phi(H: DiscreteSpectrum, r: RegimeParams, y: float, side: str = "right") -> float:
    """Solve phi(x) = y on a branch where phi is increasing.

    ``side="right"`` searches x > a_frak (needs y > b_frak). ``side="left"`` searches
    the increasing branch left of the smallest pole, below its critical point.
    """
    y = float(y)
    if r.infinite:
        if side == "right":
            if y <= 2.0:
                raise BranchAmbiguityError("y must exceed the right edge 2")
            return 0.5 * (y + math.sqrt(y * y - 4.0))
        if y >= -2.0:
            raise BranchAmbiguityError("y must lie below the left edge -2")
        return 0.5 * (y - math.sqrt(y * y - 4.0))
    f = lambda x: _phi_scalar(H, r, x) - y
    if side == "right":
        edges = support_edge(H, r)
        if y <= edges.b_frak:
            raise BranchAmbiguityError("y must exceed the right edge")
        lo = edges.a_frak
        hi = max(y, lo) + 1.0
        while f(hi) <= 0:
            hi = lo + 2.0 * (hi - lo)
        return float(optimize.brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))
    xl = _left_critical(H, r)
    if y >= _phi_scalar(H, r, xl):
        raise BranchAmbiguityError("y must lie below the left edge")
    atom = atom_location(H, r)
    if atom is not None and abs(y - atom) <= 1e-12 * max(1.0, abs(atom)):
        raise PoleViolationError("y sits on the atom of the LSD")
    if atom is not None and y > atom:
        # between the atom (x = 0) and the bulk (x = xl > 0)
        lo, hi = 0.0, xl
    else:
        hi = min(xl, 0.0)
        lo = min(y, hi) - 1.0
        while f(lo) >= 0:
            lo = hi - 2.0 * (hi - lo)
    return float(optimize.brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))


def stieltjes_residual(H: DiscreteSpectrum, r: RegimeParams, z, s):
    """``z + 1/s + (s/b) sum w t^2/(1 + s t/sqrt(cb))``; zero at the solution."""
    s = np.asarray(s, dtype=np.complex128)
    z = np.asarray(z, dtype=np.complex128)
    if r.infinite:
        wt2 = np.dot(H.w, H.t * H.t)
        return z + 1.0 / s + s * wt2 / r.b
    u = H.t * r.inv_scale
    acc = (H.w * H.t * H.t / (1.0 + s[..., None] * u)).sum(axis=-1)
    return z + 1.0 / s + s * acc / r.b


def semicircle_stieltjes(z):
    """Closed form with the branch that vanishes at infinity."""
    z = np.asarray(z, dtype=np.complex128)
    return 0.5 * (-z + np.sqrt(z - 2.0) * np.sqrt(z + 2.0))


def _real_stieltjes(H, r, x):
    if r.infinite:
        if abs(x) <= 2.0:
            raise BranchAmbiguityError(f"real z={x} lies inside the support [-2, 2]")
        return -1.0 / invert_phi(H, r, x, "right" if x > 0 else "left")
    edges = support_edge(H, r)
    if x > edges.b_frak:
        return -1.0 / invert_phi(H, r, x, "right")
    if x < left_edge(H, r):
        root = invert_phi(H, r, x, "left")
        if root == 0.0:
            raise PoleViolationError(f"real z={x} sits on the atom of the LSD")
        return -1.0 / root
    raise BranchAmbiguityError(f"real z={x} is not left or right of the LSD support")


def _poly_solve(H, r, z):
    """All roots of the cleared-denominator equation; keep the one in the upper half plane."""
    u = H.t * r.inv_scale
    wt2 = H.w * H.t * H.t
    prod = np.poly1d([1.0])
    for uk in u:
        prod = prod * np.poly1d([uk, 1.0])
    poly = np.poly1d([z, 1.0]) * prod
    tail = np.poly1d([0.0])
    for k in range(u.size):
        others = np.poly1d([1.0])
        for j, uj in enumerate(u):
            if j != k:
                others = others * np.poly1d([uj, 1.0])
        tail = tail + others * wt2[k]
    poly = poly + np.poly1d([1.0 / r.b, 0.0, 0.0]) * tail
    roots = poly.roots
    roots = roots[roots.imag > 0]
    if roots.size == 0:
        return None
    res = np.abs(stieltjes_residual(H, r, z, roots))
    return complex(roots[np.argmin(res)])


def _polish(H, r, z, s, iters=20):
    u = H.t * r.inv_scale
    wt2 = H.w * H.t * H.t
    for _ in range(iters):
        den = 1.0 + s * u
        f = z + 1.0 / s + s * np.sum(wt2 / den) / r.b
        if abs(f) < STIELTJES_TOL:
            break
        df = -1.0 / (s * s) + np.sum(wt2 / den**2) / r.b
        s = s - f / df
    return s


def stieltjes_solve_many(H: DiscreteSpectrum, r: RegimeParams, z, strict: bool = True):
    """Vectorized solve. Returns ``(s, ok)``.

    With ``strict=True`` the first failing point raises; otherwise failures are
    marked in ``ok`` and their ``s`` set to nan.
    """
    z = np.atleast_1d(np.asarray(z, dtype=np.complex128))
    out = np.full(z.shape, np.nan + 0j)
    ok = np.zeros(z.shape, dtype=bool)
    flat = z.ravel()
    outf = out.ravel()
    okf = ok.ravel()
    lower = flat.imag < 0
    zq = np.where(lower, np.conj(flat), flat)
    real = zq.imag == 0
    if r.infinite:
        cand = semicircle_stieltjes(zq)
        cx = ~real
        outf[cx] = cand[cx]
        okf[cx] = True
    else:
        cx = np.flatnonzero(~real)
        if cx.size:
            s, good = _kernels.solve_stieltjes(zq[cx], H.t, H.w, r.b, r.inv_scale, tol=STIELTJES_TOL)
            for j, idx in enumerate(cx):
                sj = s[j]
                if not good[j] and H.t.size <= _POLY_MAX_POINTS:
                    cand = _poly_solve(H, r, zq[idx])
                    if cand is not None:
                        cand = _polish(H, r, zq[idx], cand)
                        sj = cand
                        good[j] = abs(stieltjes_residual(H, r, zq[idx], cand)) < STIELTJES_TOL and cand.imag >= 0
                if good[j]:
                    outf[idx] = sj
                    okf[idx] = True
                elif strict:
                    raise NonConvergenceError(f"Stieltjes solver did not converge at z={zq[idx]!r}")
    for idx in np.flatnonzero(real):
        try:
            outf[idx] = _real_stieltjes(H, r, float(zq[idx].real))
            okf[idx] = True
        except (BranchAmbiguityError, NonConvergenceError, NoRootFoundError):
            if strict:
                raise
    outf[lower] = np.conj(outf[lower])
    return outf.reshape(z.shape), okf.reshape(z.shape)


def stieltjes_solve(H: DiscreteSpectrum, r: RegimeParams, z) -> complex:
    """Stieltjes transform of the LSD at one point.

    Real z must lie outside the support; the real branch is obtained by inverting
    phi (s = -1/x with phi(x) = z). Points in the lower half plane use conjugation.
    """
    s, _ = stieltjes_solve_many(H, r, np.array([z]), strict=True)
    return complex(s[0])


def stieltjes_derivative(H: DiscreteSpectrum, r: RegimeParams, z, s=None) -> complex:
    """ds/dz from implicit differentiation of the fixed-point equation."""
    if s is None:
        s = stieltjes_solve(H, r, z)
    s = complex(s)
    if r.infinite:
        return s * s / (1.0 - s * s)
    u = H.t * r.inv_scale
    dz_ds = 1.0 / (s * s) - np.sum(H.w * H.t * H.t / (1.0 + s * u) ** 2) / r.b
    return complex(1.0 / dz_ds)


def lsd_density(H: DiscreteSpectrum, r: RegimeParams, grid, eps: float = 1e-6) -> np.ndarray:
    """``Im s(x + i eps) / pi`` on the grid; nan where the solver failed."""
    if not eps > 0:
        raise InputError("eps must be positive")
    x = np.asarray(grid, dtype=np.float64)
    s, ok = stieltjes_solve_many(H, r, x + 1j * eps, strict=False)
    dens = np.where(ok, np.maximum(s.imag, 0.0) / np.pi, np.nan)
    return dens


def semicircle_density(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) <= 2.0, np.sqrt(np.clip(4.0 - x * x, 0.0, None)) / (2 * np.pi), 0.0)


def semicircle_cdf(x):
    x = np.clip(np.asarray(x, dtype=np.float64), -2.0, 2.0)
    return 0.5 + x * np.sqrt(4.0 - x * x) / (4 * np.pi) + np.arcsin(x / 2.0) / np.pi


def lsd_cdf(H: DiscreteSpectrum, r: RegimeParams, grid, eps: float = 1e-6) -> np.ndarray:
    """CDF on an ascending grid.

    Uses the closed form when c is infinite; otherwise integrates the density
    with the trapezoid rule, adding the atom mass (1 - c) for c < 1.
    """
    x = np.asarray(grid, dtype=np.float64)
    if r.infinite:
        return semicircle_cdf(x)
    if np.any(np.diff(x) <= 0):
        raise InputError("grid must be strictly ascending")
    dens = np.nan_to_num(lsd_density(H, r, x, eps))
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(x))])
    atom = atom_location(H, r)
    if atom is not None:
        cdf = cdf + (1.0 - r.c) * (x >= atom)
    return np.clip(cdf, 0.0, 1.0)
