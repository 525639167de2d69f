"""Sample-side matrices: centering, the a/b estimators, A_n, and group resolvents.

Everything is computed from the n x n Gram matrix X^T X; no p x p matrix is
ever formed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .datagen import PopulationModel
from .errors import (
    DimensionMismatchError,
    GroupTooSmallError,
    InputError,
    NonPositiveBhatError,
    PoleViolationError,
)
from .spectrum import left_edge, semicircle_stieltjes, stieltjes_derivative, stieltjes_solve, support_edge
from .spikes import projection_data

REAL_Z_MARGIN = 0.05


def centering_projection(n: int) -> np.ndarray:
    """Phi = I - 1 1^T / n."""
    if n < 2:
        raise InputError("n must be at least 2")
    return np.eye(n) - np.full((n, n), 1.0 / n)


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatchError("X must be a p x n matrix")
    return X


def center_gram(G: np.ndarray) -> np.ndarray:
    """Phi G Phi without forming Phi."""
    r = G.mean(axis=0)
    return G - r[None, :] - r[:, None] + r.mean()


def centered_gram(X) -> np.ndarray:
    X = _as_matrix(X)
    return center_gram(X.T @ X)


def estimate_ab(X, cgram: np.ndarray | None = None) -> tuple[float, float]:
    """(a_hat, b_hat) from S_hat = Phi X^T X Phi / (n - 1)."""
    X = _as_matrix(X)
    p, n = X.shape
    if n < 3:
        raise InputError("estimating b needs n >= 3")
    C = centered_gram(X) if cgram is None else cgram
    tr1 = np.trace(C) / (n - 1)
    tr2 = np.sum(C * C) / (n - 1) ** 2
    a_hat = tr1 / p
    b_hat = tr2 / p - tr1 * tr1 / ((n - 1) * p)
    if not b_hat > 0:
        raise NonPositiveBhatError(f"b_hat = {b_hat!r} is not positive")
    return float(a_hat), float(b_hat)


def renormalized_gram(X, a: float, b: float, cgram: np.ndarray | None = None) -> np.ndarray:
    """sqrt(p/(n b)) [Phi X^T X Phi / p - a Phi]."""
    X = _as_matrix(X)
    p, n = X.shape
    if not b > 0:
        raise InputError("b must be positive")
    C = centered_gram(X) if cgram is None else cgram
    if C.shape != (n, n):
        raise DimensionMismatchError("Gram matrix does not match X")
    A = C / p - a * centering_projection(n)
    A *= math.sqrt(p / (n * b))
    return 0.5 * (A + A.T)


@dataclass
class SpectralSummary:
    eigenvalues: np.ndarray  # descending
    a_hat: float
    b_hat: float
    n: int
    p: int
    oracle: bool = False  # True when built from the true (a_p, b_p)

    @property
    def c_n(self) -> float:
        return self.p / self.n

    def to_dict(self, head: int | None = None) -> dict:
        ev = self.eigenvalues if head is None else self.eigenvalues[:head]
        return {
            "schema": "spikelab/v1",
            "n": self.n,
            "p": self.p,
            "c_n": self.c_n,
            "a_hat": self.a_hat,
            "b_hat": self.b_hat,
            "oracle": self.oracle,
            "eigenvalues": [float(x) for x in ev],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SpectralSummary":
        return cls(np.asarray(d["eigenvalues"], float), float(d["a_hat"]), float(d["b_hat"]),
                   int(d["n"]), int(d["p"]), bool(d.get("oracle", False)))


def spectral_summary(X, a: float | None = None, b: float | None = None) -> SpectralSummary:
    """Spectrum of A_hat (or of the oracle A_n when a and b are given)."""
    X = _as_matrix(X)
    p, n = X.shape
    C = centered_gram(X)
    a_hat, b_hat = estimate_ab(X, C)
    oracle = a is not None and b is not None
    A = renormalized_gram(X, a if oracle else a_hat, b if oracle else b_hat, C)
    ev = np.linalg.eigvalsh(A)[::-1].copy()
    return SpectralSummary(ev, a_hat, b_hat, n, p, oracle)


def both_spectra(X, a: float, b: float):
    """Spectra of A_hat and of the oracle A_n from one Gram computation."""
    X = _as_matrix(X)
    p, n = X.shape
    C = centered_gram(X)
    a_hat, b_hat = estimate_ab(X, C)
    ev_hat = np.linalg.eigvalsh(renormalized_gram(X, a_hat, b_hat, C))[::-1].copy()
    ev_orc = np.linalg.eigvalsh(renormalized_gram(X, a, b, C))[::-1].copy()
    return (SpectralSummary(ev_hat, a_hat, b_hat, n, p, False),
            SpectralSummary(ev_orc, a_hat, b_hat, n, p, True))


def group_projection(labels) -> np.ndarray:
    """Psi = I - blockdiag(1 1^T / n_i), removing each group's mean."""
    labels = np.asarray(labels)
    n = labels.size
    Psi = np.eye(n)
    for g in np.unique(labels):
        idx = np.flatnonzero(labels == g)
        Psi[np.ix_(idx, idx)] -= 1.0 / idx.size
    return Psi


class GroupResolvent:
    """Resolvent of B_n = (1/n) X Psi X^T through the n x n side.

    With Y = X Psi / sqrt(n), (Y Y^T - z)^{-1} = (1/z)[Y (Y^T Y - z)^{-1} Y^T - I].
    """

    def __init__(self, X, labels):
        X = _as_matrix(X)
        labels = np.asarray(labels)
        p, n = X.shape
        if labels.size != n:
            raise DimensionMismatchError("one label per column is required")
        groups, counts = np.unique(labels, return_counts=True)
        if np.any(counts < 2):
            raise GroupTooSmallError("every group needs at least two members")
        self.X = X
        self.labels = labels
        self.groups = groups
        self.counts = counts
        self.n, self.p = n, p
        self.Psi = group_projection(labels)
        K = self.Psi @ (X.T @ X) @ self.Psi / n
        self.evals, self.evecs = np.linalg.eigh(0.5 * (K + K.T))

    def _proj(self, V):
        # Y^T V in the eigenbasis of Y^T Y
        return self.evecs.T @ (self.Psi @ (self.X.T @ V)) / math.sqrt(self.n)

    def forms(self, V, z, U=None):
        """V^T (B_n - z I)^{-1} U (U defaults to V)."""
        V = np.asarray(V)
        U = V if U is None else np.asarray(U)
        a = self._proj(V)
        b = a if U is V else self._proj(U)
        mid = (a.T * (1.0 / (self.evals - z))) @ b
        return (mid - V.T @ U) / z

    def apply(self, V, z):
        """(B_n - z I)^{-1} V."""
        V = np.asarray(V)
        a = self._proj(V)
        w = self.evecs @ (a / (self.evals - z)[:, None])
        back = self.X @ (self.Psi @ w) / math.sqrt(self.n)
        return (back - V) / z


def group_centered_cov_gram(X, labels) -> GroupResolvent:
    return GroupResolvent(X, labels)


@dataclass
class SesquilinearPanel:
    z: complex
    z_tilde: complex
    forms: np.ndarray  # 2tau x 2tau, scaled by z_tilde / sqrt(c b)
    centering: np.ndarray  # first-order limit at the finite-n proxy s0(z)
    n: int

    @property
    def limit(self) -> np.ndarray:
        return self.centering

    @property
    def L(self) -> np.ndarray:
        return math.sqrt(self.n) * (self.forms - self.centering)

    @property
    def tau(self) -> int:
        return self.forms.shape[0] // 2


def check_z(model: PopulationModel, n: int, z) -> complex:
    """Reject real z within REAL_Z_MARGIN of the LSD support."""
    z = complex(z)
    if z.imag != 0:
        return z
    H, r = model.spectrum(), model.regime(n)
    right = support_edge(H, r).b_frak
    left = left_edge(H, r)
    x = z.real
    if left - REAL_Z_MARGIN <= x <= right + REAL_Z_MARGIN:
        raise PoleViolationError(f"real z={x} is within {REAL_Z_MARGIN} of the support [{left:.4g}, {right:.4g}]")
    return z


def sesquilinear_centering(model: PopulationModel, n: int, k, z, limit: str = "finite") -> np.ndarray:
    """Deterministic 2tau x 2tau matrix of first-order limits.

    ``limit="finite"`` uses the finite-n proxy s0(z) at c_n = p/n (the centering
    of L_n). ``limit="infinite"`` uses the semicircle s(z) and the p/n -> infinity
    form -mu_i^T mu_j / sqrt(c_n b_p) of the mean block.
    """
    if limit not in ("finite", "infinite"):
        raise InputError("limit must be 'finite' or 'infinite'")
    z = check_z(model, n, z)
    p = model.p
    c = p / n
    a, b = model.a, model.b
    if limit == "infinite":
        s0 = complex(semicircle_stieltjes(z))
    else:
        s0 = stieltjes_solve(model.spectrum(), model.regime(n), z)
    tau = model.tau
    k = np.asarray(k, dtype=float)
    dtype = np.complex128 if (z.imag != 0) else np.float64
    out = np.zeros((2 * tau, 2 * tau), dtype=dtype)
    diag = -(math.sqrt(c / b) * a + z + 1.0 / s0) / k
    out[np.arange(tau), np.arange(tau)] = diag if dtype is np.complex128 else diag.real
    lam = model.sigma0.eigenvalues
    Ut = model.sigma0.to_eigenbasis(model.means)
    w = 1.0 / (math.sqrt(c * b) + (0.0 if limit == "infinite" else s0) * lam)
    if dtype is np.float64:
        w = w.real
    out[tau:, tau:] = -(Ut.T @ (Ut * w[:, None]))
    return out


def sesquilinear_panel(X, labels, model: PopulationModel, z) -> SesquilinearPanel:
    """Scaled forms of (M_sbar, M_mu) against (B_n - z_tilde I)^{-1}.

    ``sbar_i = xbar_i - mu_i`` uses the model's true means. Labels must be
    0-based group indices matching the columns of ``model.means``.
    """
    X = _as_matrix(X)
    labels = np.asarray(labels)
    p, n = X.shape
    if p != model.p:
        raise DimensionMismatchError("X and model disagree on p")
    z = check_z(model, n, z)
    res = GroupResolvent(X, labels)
    tau = model.tau
    if res.groups.size != tau or not np.array_equal(res.groups, np.arange(tau)):
        raise DimensionMismatchError("labels must cover groups 0..tau-1")
    xbar = np.stack([X[:, labels == g].mean(axis=1) for g in range(tau)], axis=1)
    M = np.concatenate([xbar - model.means, model.means], axis=1)
    c = p / n
    sb = math.sqrt(c * model.b)
    zt = c * model.a + sb * z
    if zt.imag == 0:
        zt = zt.real
    F = res.forms(M, zt) * (zt / sb)
    F = 0.5 * (F + F.T)
    k = res.counts / n
    cen = sesquilinear_centering(model, n, k, z)
    return SesquilinearPanel(z, zt, F, cen, n)


def L_covariance(model: PopulationModel, z, n: int, k=None) -> np.ndarray:
    """Cov(L_ab, L_cd) for the 2tau x 2tau Gaussian limit of the scaled panel.

    Indices below tau refer to the sbar block, the rest to the mean block.
    Built from s(z), s'(z) and theta, rho, h evaluated at alpha = -1/s(z).
    """
    z = check_z(model, n, z)
    tau = model.tau
    k = model.fractions if k is None else np.asarray(k, dtype=float)
    H, r = model.spectrum(), model.regime(n)
    s = stieltjes_solve(H, r, z)
    sp = stieltjes_derivative(H, r, z, s)
    pd = projection_data(model, n, model.p, -1.0 / s)
    sk = np.sqrt(k)
    zeta = pd.theta / np.outer(sk, sk)
    f = pd.h / np.einsum("i,j,l->ijl", sk, sk, sk)
    g = pd.rho / np.einsum("i,j,l,t->ijlt", sk, sk, sk, sk)
    v3, v4 = model.noise.v3, model.noise.v4
    a1 = (sp - s * s) / s**4
    a2 = sp / s**4
    m = 2 * tau
    C = np.zeros((m,) * 4, dtype=np.complex128)

    def kind(a, b):
        if a < tau and b < tau:
            return "SS"
        if a >= tau and b >= tau:
            return "MM"
        return "SM"

    for a in range(m):
        for b in range(m):
            for c_ in range(m):
                for d in range(m):
                    k1, k2 = kind(a, b), kind(c_, d)
                    if k1 == "SS" and k2 == "SS":
                        if {a, b} == {c_, d}:
                            C[a, b, c_, d] = (2.0 if a == b else 1.0) * a1 / (k[a] * k[b])
                    elif k1 == "MM" and k2 == "MM":
                        i, j, l, t = a - tau, b - tau, c_ - tau, d - tau
                        C[a, b, c_, d] = a2 * (zeta[j, l] * zeta[t, i] + zeta[j, t] * zeta[l, i]) + (v4 - 3.0) / s**2 * g[i, j, l, t]
                    elif k1 == "SM" and k2 == "SM":
                        i, j = (a, b) if a < tau else (b, a)
                        l, t = (c_, d) if c_ < tau else (d, c_)
                        if i == l:
                            C[a, b, c_, d] = a2 * zeta[j - tau, t - tau] / k[i]
                    elif {k1, k2} == {"SM", "MM"}:
                        (x, y), (u, v) = ((a, b), (c_, d)) if k1 == "SM" else ((c_, d), (a, b))
                        j = y if x < tau else x
                        C[a, b, c_, d] = -v3 / s**2 * f[j - tau, u - tau, v - tau]
    if np.isrealobj(z) or complex(z).imag == 0:
        return C.real
    return C
