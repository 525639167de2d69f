"""Hot numeric loops, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports and ``SPIKELAB_NUMBA`` is not set to
a false value (``0``, ``false``, ``no``, ``off``). Both paths implement the same
algorithm; results agree to rounding.

Kernels:

* ``solve_stieltjes`` - batch solver for the Stieltjes fixed-point equation
  ``z = -1/s - (s/b) sum_k w_k t_k^2 / (1 + s t_k u)`` with ``u = 1/sqrt(c b)``.
  Damped iteration first; points that do not reach ``tol`` are finished by
  Newton steps along a path ``x + i*eta`` with ``eta`` shrinking towards the
  target imaginary part, which keeps the iterate on the ``Im s > 0`` branch.
* ``phi_values`` - the spike map and its derivative on a vector of points.
* ``moment_tables`` - third and fourth mixed coordinate moments of a few
  long vectors (``h`` and ``rho`` tables).
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

ENV_FLAG = "SPIKELAB_NUMBA"

_NEWTON_ITERS = 60
_BACKTRACKS = 40


def _numba_requested() -> bool:
    return os.environ.get(ENV_FLAG, "1").strip().lower() not in ("0", "false", "no", "off")


_backend = "numba" if (HAVE_NUMBA and _numba_requested()) else "numpy"


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


@contextlib.contextmanager
def use_backend(name: str):
    old = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(old)


def _eta_path(y: float) -> np.ndarray:
    """Decreasing imaginary parts from ``max(1, y)`` down to ``y``."""
    top = max(1.0, y)
    if top <= y:
        return np.array([y])
    steps = int(np.ceil(4.0 * np.log10(top / y))) + 1
    return np.geomspace(top, y, steps + 1)


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _stieltjes_terms_np(s, wt2, u, b):
    # s: (m,), returns F-part m(s) = (s/b) sum wt2/(1+su) and its derivative
    den = 1.0 + s[:, None] * u[None, :]
    acc = (wt2[None, :] / den).sum(axis=1)
    dacc = (wt2[None, :] / den**2).sum(axis=1)
    return s * acc / b, dacc / b


def _solve_stieltjes_np(z, t, w, b, inv, gamma, max_iter, tol):
    z = np.asarray(z, dtype=np.complex128)
    wt2 = w * t * t
    u = t * inv
    s = 0.5 * (-z + np.sqrt(z - 2.0) * np.sqrt(z + 2.0))
    ok = np.zeros(z.shape, dtype=bool)
    active = np.arange(z.size)
    for _ in range(max_iter):
        if active.size == 0:
            break
        sa = s[active]
        m, _ = _stieltjes_terms_np(sa, wt2, u, b)
        res = z[active] + 1.0 / sa + m
        done = np.abs(res) < tol
        ok[active[done]] = True
        keep = ~done
        active = active[keep]
        sa = sa[keep]
        g = -1.0 / (z[active] + m[keep])
        s[active] = (1.0 - gamma) * sa + gamma * g

    for idx in np.flatnonzero(~ok):
        s[idx], ok[idx] = _continue_point_np(z[idx], s[idx], wt2, u, b, gamma, tol)
    return s, ok


def _newton_np(zc, s, wt2, u, b, tol):
    den = 1.0 + s * u
    f = zc + 1.0 / s + s * np.sum(wt2 / den) / b
    for _ in range(_NEWTON_ITERS):
        if abs(f) < tol:
            return s, True
        df = -1.0 / (s * s) + np.sum(wt2 / (den * den)) / b
        step = f / df
        lam = 1.0
        for _ in range(_BACKTRACKS):
            cand = s - lam * step
            if cand.imag > 0.0:
                cden = 1.0 + cand * u
                fc = zc + 1.0 / cand + cand * np.sum(wt2 / cden) / b
                if abs(fc) < abs(f):
                    break
            lam *= 0.5
        else:
            return s, False
        s, den, f = cand, cden, fc
    return s, abs(f) < tol


def _continue_point_np(zt, s_start, wt2, u, b, gamma, tol):
    x, y = zt.real, zt.imag
    if y <= 0.0:
        return s_start, False
    path = _eta_path(y)
    # damped iteration at the top of the path, where it contracts quickly
    zc = complex(x, path[0])
    s = 0.5 * (-zc + np.sqrt(zc - 2.0) * np.sqrt(zc + 2.0))
    for _ in range(2000):
        den = 1.0 + s * u
        m = s * np.sum(wt2 / den) / b
        if abs(zc + 1.0 / s + m) < tol:
            break
        s = (1.0 - gamma) * s + gamma * (-1.0 / (zc + m))
    good = True
    for eta in path:
        s, good = _newton_np(complex(x, eta), s, wt2, u, b, tol)
        if not good:
            break
    return s, good


def _phi_values_np(x, t, w, b, inv):
    x = np.asarray(x, dtype=np.float64)
    d = x[:, None] - (t * inv)[None, :]
    wt2 = (w * t * t)[None, :]
    phi = x + (wt2 / d).sum(axis=1) / b
    dphi = 1.0 - (wt2 / (d * d)).sum(axis=1) / b
    return phi, dphi


def _moment_tables_np(W, chunk=1 << 16):
    tau, p = W.shape
    h = np.zeros((tau, tau, tau), dtype=W.dtype)
    rho = np.zeros((tau, tau, tau, tau), dtype=W.dtype)
    for start in range(0, p, chunk):
        blk = W[:, start:start + chunk]
        pair = (blk[:, None, :] * blk[None, :, :]).reshape(tau * tau, -1)
        rho += (pair @ pair.T).reshape(tau, tau, tau, tau)
        h += (pair @ blk.T).reshape(tau, tau, tau)
    return h, rho


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _stieltjes_f_nb(zc, s, wt2, u, b):
        acc = 0j
        dacc = 0j
        for k in range(wt2.size):
            den = 1.0 + s * u[k]
            acc += wt2[k] / den
            dacc += wt2[k] / (den * den)
        m = s * acc / b
        return zc + 1.0 / s + m, m, -1.0 / (s * s) + dacc / b

    @numba.njit(cache=True)
    def _newton_nb(zc, s, wt2, u, b, tol):
        f, _, df = _stieltjes_f_nb(zc, s, wt2, u, b)
        for _ in range(_NEWTON_ITERS):
            if abs(f) < tol:
                return s, True
            step = f / df
            lam = 1.0
            moved = False
            for _ in range(_BACKTRACKS):
                cand = s - lam * step
                if cand.imag > 0.0:
                    fc, _, dfc = _stieltjes_f_nb(zc, cand, wt2, u, b)
                    if abs(fc) < abs(f):
                        moved = True
                        break
                lam *= 0.5
            if not moved:
                return s, False
            s, f, df = cand, fc, dfc
        return s, abs(f) < tol

    @numba.njit(cache=True)
    def _solve_stieltjes_nb(z, t, w, b, inv, gamma, max_iter, tol, paths, path_len):
        m_pts = z.size
        wt2 = w * t * t
        u = t * inv
        s_out = np.empty(m_pts, dtype=np.complex128)
        ok = np.zeros(m_pts, dtype=np.bool_)
        for i in range(m_pts):
            zc = z[i]
            s = 0.5 * (-zc + np.sqrt(zc - 2.0) * np.sqrt(zc + 2.0))
            for _ in range(max_iter):
                f, m, _ = _stieltjes_f_nb(zc, s, wt2, u, b)
                if abs(f) < tol:
                    ok[i] = True
                    break
                s = (1.0 - gamma) * s + gamma * (-1.0 / (zc + m))
            if not ok[i] and zc.imag > 0.0:
                x = zc.real
                zt = complex(x, paths[i, 0])
                s = 0.5 * (-zt + np.sqrt(zt - 2.0) * np.sqrt(zt + 2.0))
                for _ in range(2000):
                    f, m, _ = _stieltjes_f_nb(zt, s, wt2, u, b)
                    if abs(f) < tol:
                        break
                    s = (1.0 - gamma) * s + gamma * (-1.0 / (zt + m))
                good = True
                for j in range(path_len[i]):
                    s, good = _newton_nb(complex(x, paths[i, j]), s, wt2, u, b, tol)
                    if not good:
                        break
                ok[i] = good
            s_out[i] = s
        return s_out, ok

    @numba.njit(cache=True)
    def _phi_values_nb(x, t, w, b, inv):
        phi = np.empty(x.size)
        dphi = np.empty(x.size)
        for i in range(x.size):
            acc = 0.0
            dacc = 0.0
            for k in range(t.size):
                d = x[i] - t[k] * inv
                wt2 = w[k] * t[k] * t[k]
                acc += wt2 / d
                dacc += wt2 / (d * d)
            phi[i] = x[i] + acc / b
            dphi[i] = 1.0 - dacc / b
        return phi, dphi

    @numba.njit(cache=True)
    def _moment_tables_nb(W):
        tau, p = W.shape
        h = np.zeros((tau, tau, tau))
        rho = np.zeros((tau, tau, tau, tau))
        for q in range(p):
            for i in range(tau):
                wi = W[i, q]
                for j in range(tau):
                    wij = wi * W[j, q]
                    for l in range(tau):
                        wijl = wij * W[l, q]
                        h[i, j, l] += wijl
                        for r in range(tau):
                            rho[i, j, l, r] += wijl * W[r, q]
        return h, rho


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def solve_stieltjes(z, t, w, b, inv, gamma=0.5, max_iter=10_000, tol=1e-10):
    """Solve the fixed-point equation at every point of ``z`` (``Im z > 0``).

    Returns ``(s, ok)``; ``ok[i]`` is False where the residual never fell below
    ``tol``.
    """
    z = np.ascontiguousarray(np.atleast_1d(z), dtype=np.complex128)
    t = np.ascontiguousarray(t, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if _backend == "numba":
        path_list = [_eta_path(zc.imag) if zc.imag > 0 else np.array([1.0]) for zc in z]
        width = max(len(pth) for pth in path_list) if path_list else 1
        paths = np.zeros((z.size, width))
        lens = np.zeros(z.size, dtype=np.int64)
        for i, pth in enumerate(path_list):
            paths[i, :len(pth)] = pth
            lens[i] = len(pth)
        return _solve_stieltjes_nb(z, t, w, float(b), float(inv), float(gamma),
                                   int(max_iter), float(tol), paths, lens)
    return _solve_stieltjes_np(z, t, w, float(b), float(inv), float(gamma), int(max_iter), float(tol))


def phi_values(x, t, w, b, inv):
    """Spike map and its derivative at each point of ``x``."""
    x = np.ascontiguousarray(np.atleast_1d(x), dtype=np.float64)
    t = np.ascontiguousarray(t, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if _backend == "numba":
        return _phi_values_nb(x, t, w, float(b), float(inv))
    return _phi_values_np(x, t, w, float(b), float(inv))


def moment_tables(W):
    """``h[i,j,l] = sum_q W_iq W_jq W_lq`` and the analogous fourth-order table."""
    W = np.ascontiguousarray(W, dtype=np.float64)
    if _backend == "numba":
        return _moment_tables_nb(W)
    return _moment_tables_np(W)
