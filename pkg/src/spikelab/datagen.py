"""Population models and reproducible synthetic data.

Columns are ``x = mu_i + R z`` where ``R`` is a symmetric root of Sigma0 and the
entries of ``z`` are i.i.d. from a standardized noise law. ``R`` is stored in one
of three forms:

* ``diag``: ``R = diag(r)``, so Sigma0 = diag(r^2);
* ``tridiag``: symmetric Toeplitz tridiagonal with diagonal ``d`` and off-diagonal
  ``e``; its eigenvectors are the orthonormal DST-I basis;
* ``dense``: an explicit symmetric p x p matrix.

Random streams are keyed by ``(seed, replicate, group, column)`` so every column
can be regenerated independently of the others.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import fft, optimize

from .errors import (
    DimensionMismatchError,
    GroupTooSmallError,
    InputError,
    NonPositiveEigenvalueError,
    SchemaError,
    SingleGroupError,
)
from .spectrum import DiscreteSpectrum, RegimeParams, spectrum_from_eigenvalues

SCHEMA = "spikelab/v1"
NOISE_KINDS = ("gaussian", "rademacher", "exp_centered", "bernoulli_t")
CASE2_T = (math.sqrt(3.0) + 3.0) / 6.0


@dataclass(frozen=True)
class NoiseLaw:
    kind: str = "gaussian"
    t: float | None = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise InputError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if self.kind == "bernoulli_t":
            t = CASE2_T if self.t is None else float(self.t)
            if not 0.0 < t < 1.0:
                raise InputError("bernoulli_t needs 0 < t < 1")
            object.__setattr__(self, "t", t)
        elif self.t is not None:
            raise InputError(f"noise kind {self.kind!r} takes no parameter")

    @property
    def v3(self) -> float:
        if self.kind == "exp_centered":
            return 2.0
        if self.kind == "bernoulli_t":
            t = self.t
            return (1.0 - 2.0 * t) / math.sqrt(t * (1.0 - t))
        return 0.0

    @property
    def v4(self) -> float:
        if self.kind == "gaussian":
            return 3.0
        if self.kind == "rademacher":
            return 1.0
        if self.kind == "exp_centered":
            return 9.0
        t = self.t
        return 1.0 / (t * (1.0 - t)) - 3.0

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "gaussian":
            return rng.standard_normal(size)
        if self.kind == "rademacher":
            return rng.integers(0, 2, size=size).astype(np.float64) * 2.0 - 1.0
        if self.kind == "exp_centered":
            return rng.standard_exponential(size) - 1.0
        t = self.t
        hit = rng.random(size) < t
        return (hit.astype(np.float64) - t) / math.sqrt(t * (1.0 - t))

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind}
        if self.kind == "bernoulli_t":
            d["t"] = self.t
        return d

    @classmethod
    def from_dict(cls, d) -> "NoiseLaw":
        if isinstance(d, str):
            return cls(d)
        if not isinstance(d, dict) or "kind" not in d:
            raise SchemaError("noise must be a string or an object with 'kind'")
        return cls(d["kind"], d.get("t"))


class Sigma0:
    """Symmetric root R of Sigma0 = R R, with cheap application and eigendecomposition."""

    def __init__(self, kind: str, p: int, diag=None, d=None, e=None, root=None):
        self.kind = kind
        self.p = int(p)
        if kind == "diag":
            r = np.asarray(diag, dtype=np.float64).ravel()
            if r.size != self.p:
                raise DimensionMismatchError("diagonal length differs from p")
            if np.any(r <= 0) or not np.all(np.isfinite(r)):
                raise NonPositiveEigenvalueError("Sigma0 diagonal must be positive")
            self._r = r
        elif kind == "tridiag":
            self.d, self.e = float(d), float(e)
            k = np.arange(1, self.p + 1)
            self._r = self.d + 2.0 * self.e * np.cos(k * np.pi / (self.p + 1))
            if np.any(np.abs(self._r) < 1e-12):
                raise NonPositiveEigenvalueError("tridiagonal root is singular")
        elif kind == "dense":
            R = np.asarray(root, dtype=np.float64)
            if R.shape != (self.p, self.p):
                raise DimensionMismatchError("root matrix must be p x p")
            if not np.allclose(R, R.T, atol=1e-12):
                raise InputError("root matrix must be symmetric")
            self._R = 0.5 * (R + R.T)
            self._r, self._E = np.linalg.eigh(self._R)
            if np.any(np.abs(self._r) < 1e-12):
                raise NonPositiveEigenvalueError("root matrix is singular")
        else:
            raise InputError(f"unknown Sigma0 kind {kind!r}")

    @classmethod
    def identity(cls, p: int) -> "Sigma0":
        return cls("diag", p, diag=np.ones(p))

    @classmethod
    def from_variances(cls, variances) -> "Sigma0":
        v = np.asarray(variances, dtype=np.float64)
        if np.any(v <= 0):
            raise NonPositiveEigenvalueError("variances must be positive")
        return cls("diag", v.size, diag=np.sqrt(v))

    @property
    def root_eigenvalues(self) -> np.ndarray:
        """Eigenvalues of R, aligned with ``to_eigenbasis`` coordinates."""
        return self._r

    @property
    def eigenvalues(self) -> np.ndarray:
        return self._r * self._r

    @property
    def is_scalar(self) -> bool:
        lam = self.eigenvalues
        return bool(np.ptp(lam) <= 1e-12 * lam.max())

    def apply_root(self, Z: np.ndarray) -> np.ndarray:
        """R @ Z for a p x m block (m may be 1 via a 1-d vector)."""
        if self.kind == "diag":
            return Z * (self._r if Z.ndim == 1 else self._r[:, None])
        if self.kind == "tridiag":
            out = self.d * Z
            out[1:] += self.e * Z[:-1]
            out[:-1] += self.e * Z[1:]
            return out
        return self._R @ Z

    def to_eigenbasis(self, V: np.ndarray) -> np.ndarray:
        """E^T V where R = E diag(r) E^T."""
        if self.kind == "diag":
            return V
        if self.kind == "tridiag":
            return fft.dst(V, type=1, norm="ortho", axis=0)
        return self._E.T @ V

    def from_eigenbasis(self, V: np.ndarray) -> np.ndarray:
        if self.kind == "diag":
            return V
        if self.kind == "tridiag":
            # the orthonormal DST-I matrix is symmetric and its own inverse
            return fft.dst(V, type=1, norm="ortho", axis=0)
        return self._E @ V

    def dense(self) -> np.ndarray:
        """Sigma0 as a dense matrix (small p only, for checks)."""
        if self.kind == "diag":
            return np.diag(self.eigenvalues)
        R = self.apply_root(np.eye(self.p))
        return R @ R

    def to_dict(self) -> dict:
        if self.kind == "diag":
            v = self.eigenvalues
            if np.all(v == v[0]):
                return {"kind": "scalar", "value": float(v[0]), "p": self.p}
            vals, starts = _runs(v)
            if len(vals) <= 16:
                return {"kind": "blocks", "values": vals, "counts": starts}
            return {"kind": "diag", "values": v.tolist()}
        if self.kind == "tridiag":
            return {"kind": "tridiag_root", "d": self.d, "e": self.e, "p": self.p}
        return {"kind": "dense_root", "matrix": self._R.tolist()}

    @classmethod
    def from_dict(cls, d: dict, p: int) -> "Sigma0":
        kind = d.get("kind")
        try:
            if kind == "identity":
                return cls.identity(p)
            if kind == "scalar":
                return cls.from_variances(np.full(p, float(d["value"])))
            if kind == "diag":
                return cls.from_variances(np.asarray(d["values"], dtype=float))
            if kind == "blocks":
                vals, counts = d["values"], d["counts"]
                if len(vals) != len(counts):
                    raise SchemaError("blocks needs equal-length values and counts")
                if sum(int(c) for c in counts) != p:
                    raise SchemaError("block counts must sum to p")
                return cls.from_variances(np.repeat(np.asarray(vals, float), np.asarray(counts, int)))
            if kind == "tridiag_root":
                return cls("tridiag", p, d=d["d"], e=d["e"])
            if kind == "dense_root":
                return cls("dense", p, root=np.asarray(d["matrix"], float))
        except KeyError as exc:
            raise SchemaError(f"sigma0 of kind {kind!r} is missing field {exc}") from None
        raise SchemaError(f"unknown sigma0 kind {kind!r}")


def _runs(v):
    vals, counts = [], []
    for x in v:
        if vals and x == vals[-1]:
            counts[-1] += 1
        else:
            vals.append(float(x))
            counts.append(1)
    return vals, counts


@dataclass
class PopulationModel:
    """tau populations sharing Sigma0; ``means`` is p x tau."""

    means: np.ndarray
    sigma0: Sigma0
    fractions: np.ndarray
    noise: NoiseLaw = field(default_factory=NoiseLaw)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.means.ndim == 1:
            self.means = self.means[:, None]
        self.fractions = np.asarray(self.fractions, dtype=np.float64).ravel()
        if self.means.shape[1] != self.fractions.size:
            raise DimensionMismatchError("one mean vector per fraction is required")
        if self.means.shape[0] != self.sigma0.p:
            raise DimensionMismatchError("mean length differs from the dimension of Sigma0")
        if abs(self.fractions.sum() - 1.0) > 1e-12:
            raise InputError("fractions must sum to 1")
        if self.tau > 1 and np.any((self.fractions <= 0) | (self.fractions >= 1)):
            raise InputError("fractions must lie in (0, 1)")

    @property
    def tau(self) -> int:
        return self.fractions.size

    @property
    def p(self) -> int:
        return self.sigma0.p

    def spectrum(self) -> DiscreteSpectrum:
        return spectrum_from_eigenvalues(self.sigma0.eigenvalues)

    @property
    def a(self) -> float:
        return float(self.sigma0.eigenvalues.mean())

    @property
    def b(self) -> float:
        return float(np.mean(self.sigma0.eigenvalues ** 2))

    def regime(self, n: int) -> RegimeParams:
        return RegimeParams(c=self.p / n, a=self.a, b=self.b)

    def group_sizes(self, n: int) -> np.ndarray:
        return apportion(n, self.fractions)

    def to_dict(self) -> dict:
        means = []
        for col in self.means.T:
            nz = np.flatnonzero(col)
            if nz.size <= self.p // 4:
                means.append({str(int(i)): float(col[i]) for i in nz})
            else:
                means.append(col.tolist())
        return {
            "schema": SCHEMA,
            "p": self.p,
            "fractions": self.fractions.tolist(),
            "noise": self.noise.to_dict(),
            "sigma0": self.sigma0.to_dict(),
            "means": means,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PopulationModel":
        """Parse the JSON document.

        ``means`` is a list with one entry per population, each either a dense list
        of length p or an object mapping 0-based coordinates to values. An optional
        ``mean_scale`` multiplies every mean.
        """
        if not isinstance(d, dict):
            raise SchemaError("model must be a JSON object")
        if d.get("schema", SCHEMA) != SCHEMA:
            raise SchemaError(f"unsupported schema {d.get('schema')!r}")
        for key in ("p", "fractions", "means"):
            if key not in d:
                raise SchemaError(f"model is missing field {key!r}")
        try:
            p = int(d["p"])
            fractions = np.asarray(d["fractions"], dtype=float)
            means = np.zeros((p, len(d["means"])))
            for j, m in enumerate(d["means"]):
                if isinstance(m, dict):
                    for k, v in m.items():
                        means[int(k), j] = float(v)
                else:
                    col = np.asarray(m, dtype=float)
                    if col.size != p:
                        raise SchemaError(f"mean {j} has length {col.size}, expected {p}")
                    means[:, j] = col
            means *= float(d.get("mean_scale", 1.0))
            sigma0 = Sigma0.from_dict(d.get("sigma0", {"kind": "identity"}), p)
            noise = NoiseLaw.from_dict(d.get("noise", "gaussian"))
        except (TypeError, ValueError, IndexError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"malformed model document: {exc}") from None
        return cls(means, sigma0, fractions, noise)

    @classmethod
    def from_json(cls, text: str) -> "PopulationModel":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}") from None
        return cls.from_dict(d)


@dataclass
class DataMatrix:
    X: np.ndarray  # p x n
    labels: np.ndarray  # 0-based group index per column
    n_per_group: np.ndarray


def apportion(n: int, fractions: Sequence[float]) -> np.ndarray:
    """Largest-remainder split of n; ties go to the lower index."""
    k = np.asarray(fractions, dtype=np.float64)
    quota = n * k
    base = np.floor(quota).astype(np.int64)
    short = int(n - base.sum())
    if short:
        rem = quota - base
        order = np.lexsort((np.arange(k.size), -rem))
        base[order[:short]] += 1
    return base


def column_rng(seed: int, replicate: int, group: int, column: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, replicate, group, column]))


def generate(model: PopulationModel, n: int, seed: int, replicate: int = 0) -> DataMatrix:
    """Draw a p x n data matrix with columns grouped by population."""
    if seed < 0 or replicate < 0:
        raise InputError("seed and replicate must be nonnegative")
    sizes = model.group_sizes(n)
    if np.any(sizes < 2):
        raise GroupTooSmallError(f"group sizes {sizes.tolist()} include a group below 2")
    p = model.p
    X = np.empty((p, n), order="F")
    labels = np.repeat(np.arange(model.tau), sizes)
    col = 0
    for g, ng in enumerate(sizes):
        Z = np.empty((p, ng), order="F")
        for j in range(ng):
            Z[:, j] = model.noise.sample(column_rng(seed, replicate, g, j), p)
        X[:, col:col + ng] = model.sigma0.apply_root(Z) + model.means[:, g:g + 1]
        col += ng
    return DataMatrix(X, labels, sizes)


def _u_matrix(model):
    return model.means * np.sqrt(model.fractions)[None, :]


def n_matrix(fractions) -> np.ndarray:
    """I - sqrt(k) sqrt(k)^T, the rank tau-1 projection."""
    sk = np.sqrt(np.asarray(fractions, dtype=np.float64))
    return np.eye(sk.size) - np.outer(sk, sk)


def sigma_mu_spikes(model: PopulationModel) -> np.ndarray:
    """The tau-1 eigenvalues of Sigma_mu, descending (rank deficiency gives zeros)."""
    if model.tau < 2:
        raise SingleGroupError("Sigma_mu needs at least two groups")
    U = _u_matrix(model)
    N = n_matrix(model.fractions)
    M = N @ (U.T @ U) @ N
    ev = np.linalg.eigvalsh(0.5 * (M + M.T))[::-1]
    return np.clip(ev[: model.tau - 1], 0.0, None)


def sigma_x_spikes(model: PopulationModel, n: int, p: int | None = None) -> np.ndarray:
    """Top tau-1 eigenvalues of (Sigma0 + Sigma_mu)/sqrt(c_n b_p), descending.

    x > max eig(Sigma0) is an eigenvalue of Sigma0 + Sigma_mu exactly when
    M(x) = N Ut^T diag(1/(lam - x)) Ut N has eigenvalue -1, with Ut the scaled
    means in the eigenbasis of Sigma0. The sorted eigenvalues of M(x) increase
    in x, so the j-th spike solves e_j(x) = -1. Missing spikes (no crossing)
    are reported as max eig(Sigma0).
    """
    if model.tau < 2:
        raise SingleGroupError("spikes need at least two groups")
    if p is None:
        p = model.p
    if p != model.p:
        raise DimensionMismatchError(f"p={p} but the model has dimension {model.p}")
    lam = model.sigma0.eigenvalues
    lmax = float(lam.max())
    scale = math.sqrt((p / n) * model.b)
    if model.sigma0.is_scalar:
        vals = lmax + sigma_mu_spikes(model)
        return vals / scale
    Ut = model.sigma0.to_eigenbasis(_u_matrix(model))
    N = n_matrix(model.fractions)

    def ev(x):
        G = Ut.T @ (Ut / (lam - x)[:, None])
        M = N @ G @ N
        return np.linalg.eigvalsh(0.5 * (M + M.T))

    tr_mu = float(np.sum(sigma_mu_spikes(model)))
    hi = lmax + tr_mu + 1.0
    lo = lmax + 1e-12 * max(1.0, lmax)
    out = np.full(model.tau - 1, lmax)
    e_lo = ev(lo)
    for j in range(model.tau - 1):
        if e_lo[j] < -1.0:
            out[j] = optimize.brentq(lambda x: ev(x)[j] + 1.0, lo, hi, xtol=1e-13, rtol=1e-15)
    return out / scale


# ---------------------------------------------------------------------------
# models used in the paper's simulations
# ---------------------------------------------------------------------------


def two_block_sigma0(p: int, low: float = 1.0, high: float = 2.0) -> Sigma0:
    half = p // 2
    return Sigma0.from_variances(np.concatenate([np.full(half, low), np.full(p - half, high)]))


def four_group_model(n: int, p: int, noise: NoiseLaw | str = "gaussian") -> PopulationModel:
    """Four balanced groups, Sigma0 = diag(1s, 2s), means scaled by (c_n b_p)^{1/4}.

    The Sigma_x spikes are 3 + eps (twice) and 2 + eps with eps = sqrt(2/(5 c_n)).
    """
    if isinstance(noise, str):
        noise = NoiseLaw(noise)
    if p < 3:
        raise InputError("need p >= 3")
    sigma0 = two_block_sigma0(p)
    b = float(np.mean(sigma0.eigenvalues ** 2))
    s = ((p / n) * b) ** 0.25
    means = np.zeros((p, 4))
    means[0, 1] = 4.0
    means[:2, 2] = [2.0, 3.0 * math.sqrt(2.0)]
    means[:3, 3] = [2.0, math.sqrt(2.0), -4.0]
    return PopulationModel(means * s, sigma0, np.full(4, 0.25), noise)


def four_group_lambda_limits(c: float) -> tuple[float, float]:
    """Closed-form spike limits for ``four_group_model`` at aspect ratio c."""
    eps = math.sqrt(2.0 / (5.0 * c))
    lam1 = 46.0 / 15.0 + eps + 0.8 / (3.0 - eps)
    lam2 = 2.1 + eps + 0.8 / (2.0 - eps)
    return lam1, lam2


def three_group_model(p: int, shift: float = 20.0, noise: NoiseLaw | str = "gaussian") -> PopulationModel:
    """Sigma0 = I, mu_1 = 0, mu_2 = -shift e_1, mu_3 = shift e_2, equal fractions."""
    if isinstance(noise, str):
        noise = NoiseLaw(noise)
    means = np.zeros((p, 3))
    means[0, 1] = -shift
    means[1, 2] = shift
    return PopulationModel(means, Sigma0.identity(p), np.full(3, 1.0 / 3.0), noise)


def tridiag_four_group_model(n: int, p: int, strong: bool = True, noise: NoiseLaw | str = "gaussian") -> PopulationModel:
    """Four balanced groups with a tridiagonal root (1 on the diagonal, 0.5 off it).

    ``strong`` selects the strong-signal mean configuration; means are scaled by c_n^{1/4}.
    """
    if isinstance(noise, str):
        noise = NoiseLaw(noise)
    if p < 4:
        raise InputError("need p >= 4")
    s = (p / n) ** 0.25
    means = np.zeros((p, 4))
    means[3, :] = 5.0
    if strong:
        q = math.sqrt(2.8)
        means[0, 1] = 4 * q
        means[:2, 2] = [2 * q, 2 * math.sqrt(8.4)]
        means[:3, 3] = [2 * q, (2.0 / 3.0) * math.sqrt(8.4), -(8.0 / 3.0) * math.sqrt(6.0)]
    else:
        q = math.sqrt(1.8)
        means[0, 1] = 4 * q
        means[:2, 2] = [2 * q, 2 * math.sqrt(5.4)]
        means[:3, 3] = [2 * q, 2 * math.sqrt(0.6), -4 * math.sqrt(1.2)]
    return PopulationModel(means * s, Sigma0("tridiag", p, d=1.0, e=0.5), np.full(4, 0.25), noise)


def two_group_shift_model(n: int, p: int, k1: float = 0.5, alpha: float = 3.0,
                          noise: NoiseLaw | str = "gaussian") -> PopulationModel:
    """Sigma0 = diag(1s, 2s), mu_1 = 0, mu_2 = w 1_p with w set so the spike equals alpha."""
    if isinstance(noise, str):
        noise = NoiseLaw(noise)
    sigma0 = two_block_sigma0(p)
    b = float(np.mean(sigma0.eigenvalues ** 2))
    # alpha = sqrt(n/(p b)) k1 k2 p w^2
    w = math.sqrt(alpha / (math.sqrt(n * p / b) * k1 * (1.0 - k1)))
    means = np.zeros((p, 2))
    means[:, 1] = w
    return PopulationModel(means, sigma0, np.array([k1, 1.0 - k1]), noise)


def null_model(p: int, tau: int = 1, noise: NoiseLaw | str = "gaussian") -> PopulationModel:
    """Identity covariance with all means zero."""
    if isinstance(noise, str):
        noise = NoiseLaw(noise)
    return PopulationModel(np.zeros((p, tau)), Sigma0.identity(p), np.full(tau, 1.0 / tau), noise)
