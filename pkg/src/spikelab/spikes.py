"""Spike classification, inversion, projection quantities and the spike CLT.

A population spike alpha (an eigenvalue of the renormalized Sigma_x) is *distant*
when alpha > a_frak; the matching sample eigenvalues of A_n then settle at
phi(alpha) > b_frak and fluctuate on the sqrt(n) scale. Their joint limit is the
spectrum of ``-sqrt(phi'(alpha)) Q^T N W N Q G`` with W a symmetric Gaussian
matrix whose covariance is built from theta and rho below.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from . import _kernels
from .datagen import PopulationModel, n_matrix, sigma_x_spikes
from .errors import (
    BelowEdgeError,
    BranchAmbiguityError,
    ClusterMismatchError,
    InputError,
    PoleViolationError,
    SingularQError,
)
from .spectrum import DiscreteSpectrum, RegimeParams, invert_phi, phi, phi_prime, support_edge

CLUSTER_TOL = 0.05
DISTANT = "distant"
CLOSE = "close"


@dataclass
class SpikeCluster:
    alpha: float
    multiplicity: int
    kind: str
    lambda_limit: float
    phi_prime: float | None
    variance: float | None = None  # limiting variance of sqrt(n) * (cluster sum - m * limit)

    def to_dict(self):
        return asdict(self)


@dataclass
class SpikeReport:
    clusters: list[SpikeCluster]
    a_frak: float
    b_frak: float
    c: float

    def to_dict(self):
        return {
            "schema": "spikelab/v1",
            "c": None if math.isinf(self.c) else self.c,
            "a_frak": self.a_frak,
            "b_frak": self.b_frak,
            "clusters": [cl.to_dict() for cl in self.clusters],
        }


def _check_poles(H, r, alpha):
    if r.infinite:
        if alpha == 0:
            raise PoleViolationError("alpha sits on the pole of phi at 0")
        return
    poles = H.t * r.inv_scale
    if np.any(np.abs(poles - alpha) <= 1e-12 * max(1.0, abs(alpha))):
        raise PoleViolationError(f"alpha={alpha} sits on a pole of phi")


def classify_spikes(alphas, multiplicities, H: DiscreteSpectrum, regime: RegimeParams) -> SpikeReport:
    """Label each spike cluster distant or close and give its almost-sure limit."""
    alphas = [float(a) for a in alphas]
    mults = [int(m) for m in multiplicities]
    if len(alphas) != len(mults):
        raise InputError("one multiplicity per alpha is required")
    if any(m < 1 for m in mults):
        raise InputError("multiplicities must be positive")
    if any(a2 > a1 for a1, a2 in zip(alphas, alphas[1:])):
        raise InputError("alphas must be in descending order")
    edges = support_edge(H, regime)
    clusters = []
    for a, m in zip(alphas, mults):
        # every pole lies left of a_frak, so a spike on a pole is a close spike
        if a > edges.a_frak:
            _check_poles(H, regime, a)
            clusters.append(SpikeCluster(a, m, DISTANT, phi(H, regime, a), phi_prime(H, regime, a)))
        else:
            clusters.append(SpikeCluster(a, m, CLOSE, edges.b_frak, None))
    return SpikeReport(clusters, edges.a_frak, edges.b_frak, regime.c)


def invert_spike(lam: float, H: DiscreteSpectrum, regime: RegimeParams) -> float:
    """The alpha > a_frak with phi(alpha) = lam."""
    edges = support_edge(H, regime)
    if lam <= edges.b_frak:
        raise BelowEdgeError(f"lambda={lam} is not above the edge {edges.b_frak}")
    try:
        return invert_phi(H, regime, lam, "right")
    except BranchAmbiguityError as exc:
        raise BelowEdgeError(str(exc)) from None


def group_alphas(alphas, rtol: float = 1e-8):
    """Merge (numerically) equal spikes into (alpha, multiplicity) clusters, descending."""
    vals = sorted((float(a) for a in alphas), reverse=True)
    out: list[list] = []
    for a in vals:
        if out and abs(out[-1][0] - a) <= rtol * max(1.0, abs(a)):
            out[-1][1] += 1
        else:
            out.append([a, 1])
    return [a for a, _ in out], [m for _, m in out]


@dataclass
class ProjectionData:
    """V, V', theta, rho and h at one alpha, plus N and the scaled means U."""

    alpha: complex | float
    fractions: np.ndarray
    N: np.ndarray
    V: np.ndarray
    Vprime: np.ndarray
    theta: np.ndarray
    rho: np.ndarray
    h: np.ndarray
    U: np.ndarray | None = None
    infinite: bool = False

    @property
    def tau(self) -> int:
        return self.fractions.size

    @classmethod
    def limit_infinite(cls, fractions, gram_scaled, alpha: float) -> "ProjectionData":
        """The p/n -> infinity limit, given U^T U / sqrt(c b) directly."""
        k = np.asarray(fractions, dtype=np.float64)
        gram = np.asarray(gram_scaled, dtype=np.float64)
        tau = k.size
        return cls(
            alpha=float(alpha),
            fractions=k,
            N=n_matrix(k),
            V=-gram / alpha,
            Vprime=gram / alpha**2,
            theta=np.zeros((tau, tau)),
            rho=np.zeros((tau,) * 4),
            h=np.zeros((tau,) * 3),
            infinite=True,
        )


def _table_moments(Y):
    """h and rho over the rows of Y (tau x p)."""
    if np.iscomplexobj(Y):
        return _kernels._moment_tables_np(Y.astype(np.complex128))
    return _kernels.moment_tables(Y)


def projection_data(model: PopulationModel, n: int, p: int | None = None, alpha=None) -> ProjectionData:
    """Finite-n proxies of V, V', theta, rho, h with Q(alpha) = Sigma0 - sqrt(c_n b_p) alpha I.

    ``alpha`` may be complex (the sesquilinear CLT evaluates these at -1/s(z)).
    """
    if p is None:
        p = model.p
    if p != model.p:
        raise InputError(f"p={p} but the model has dimension {model.p}")
    if alpha is None:
        raise InputError("alpha is required")
    k = model.fractions
    scale = math.sqrt((p / n) * model.b)
    kappa = scale * alpha
    lam = model.sigma0.eigenvalues
    root = model.sigma0.root_eigenvalues
    gap = lam - kappa
    if np.min(np.abs(gap)) <= 1e-12 * max(1.0, abs(kappa)):
        raise SingularQError(f"sqrt(c b) alpha = {kappa} is an eigenvalue of Sigma0")
    U = model.means * np.sqrt(k)[None, :]
    Ut = model.sigma0.to_eigenbasis(U)
    inv = 1.0 / gap
    V = Ut.T @ (Ut * inv[:, None])
    Vp = scale * (Ut.T @ (Ut * (inv * inv)[:, None]))
    theta = Ut.T @ (Ut * (lam * inv * inv)[:, None])
    if np.iscomplexobj(inv):
        Y = model.sigma0.from_eigenbasis((Ut * (root * inv)[:, None]).real) + 1j * model.sigma0.from_eigenbasis(
            (Ut * (root * inv)[:, None]).imag
        )
    else:
        Y = model.sigma0.from_eigenbasis(Ut * (root * inv)[:, None])
    h, rho = _table_moments(np.ascontiguousarray(Y.T))
    return ProjectionData(alpha, k.copy(), n_matrix(k), V, Vp, theta, rho, h, U=U, infinite=False)


def _w_cov_entry(th, rho, fp, v4, i, j, l, t):
    """Cov(W_ij, W_lt) by case; indices are reordered using W_ij = W_ji."""
    extra = fp * (v4 - 3.0) * rho[i, j, l, t]
    if i != j and l == t:
        i, j, l, t = l, t, i, j
    if i == j:
        if l == t:
            if i == l:
                return 2.0 * (2.0 * th[i, i] + th[i, i] ** 2 + 1.0 - fp) + extra
            return 2.0 * th[i, l] ** 2 + extra
        if t == i:
            l, t = t, l
        if l == i:
            return 2.0 * (th[i, t] + th[i, t] * th[i, i]) + extra
        return 2.0 * th[t, i] * th[i, l] + extra
    # both off-diagonal
    if {i, j} == {l, t}:
        return th[i, i] + th[j, j] + th[i, j] ** 2 + th[j, j] * th[i, i] + 1.0 - fp + extra
    shared = {i, j} & {l, t}
    if shared:
        s = shared.pop()
        a = i if j == s else j
        b = l if t == s else t
        # Cov(W_as, W_bs)
        return th[a, b] + th[s, b] * th[s, a] + th[s, s] * th[a, b] + extra
    return th[j, l] * th[t, i] + th[j, t] * th[l, i] + extra


def w_covariance(pd: ProjectionData, phi_prime_k: float, v4: float) -> np.ndarray:
    """Full tau^4 table C[i,j,l,t] = Cov(W_ij, W_lt)."""
    tau = pd.tau
    th = np.real_if_close(pd.theta)
    rho = np.real_if_close(pd.rho)
    C = np.empty((tau,) * 4, dtype=np.result_type(th, rho, float))
    for i in range(tau):
        for j in range(tau):
            for l in range(tau):
                for t in range(tau):
                    C[i, j, l, t] = _w_cov_entry(th, rho, phi_prime_k, v4, i, j, l, t)
    return C


def _sym_index(tau):
    return [(i, j) for i in range(tau) for j in range(i, tau)]


def w_free_covariance(C: np.ndarray) -> tuple[np.ndarray, list]:
    """Covariance over the upper-triangular entries of W."""
    idx = _sym_index(C.shape[0])
    m = len(idx)
    out = np.empty((m, m))
    for a, (i, j) in enumerate(idx):
        for b, (l, t) in enumerate(idx):
            out[a, b] = C[i, j, l, t]
    return 0.5 * (out + out.T), idx


def cluster_frame(pd: ProjectionData, multiplicity: int):
    """Q_k (tau x m), G and M = N Q G Q^T N for the cluster at pd.alpha."""
    NVN = pd.N @ np.real(pd.V) @ pd.N
    ev, vec = np.linalg.eigh(0.5 * (NVN + NVN.T))
    near = np.flatnonzero(np.abs(ev + 1.0) <= CLUSTER_TOL)
    if near.size != multiplicity:
        raise ClusterMismatchError(
            f"N V N has {near.size} eigenvalues within {CLUSTER_TOL} of -1, expected {multiplicity}"
        )
    Q = vec[:, near]
    Ginv = Q.T @ pd.N @ np.real(pd.Vprime) @ pd.N @ Q
    Ginv = 0.5 * (Ginv + Ginv.T)
    gev, gvec = np.linalg.eigh(Ginv)
    if np.any(gev <= 1e-12 * max(1.0, np.abs(gev).max())):
        raise ClusterMismatchError("Q^T N V' N Q is not positive definite")
    G = (gvec / gev) @ gvec.T
    Ghalf = (gvec / np.sqrt(gev)) @ gvec.T
    M = pd.N @ Q @ G @ Q.T @ pd.N
    return Q, G, Ghalf, M


def cluster_sum_variance(pd: ProjectionData, multiplicity: int, phi_prime_k: float, v4: float) -> float:
    """Exact variance of the sum of the m_k limiting eigenvalues.

    The sum is the trace ``-sqrt(phi') tr(M W)``, linear in W, so its variance
    is ``phi' sum M_ij M_lt Cov(W_ij, W_lt)``.
    """
    _, _, _, M = cluster_frame(pd, multiplicity)
    C = w_covariance(pd, phi_prime_k, v4)
    return float(phi_prime_k * np.einsum("ij,lt,ijlt->", M, M, np.real(C)))


def cluster_limit_sampler(pd: ProjectionData, multiplicity: int, phi_prime_k: float, v4: float,
                          seed: int, draws: int) -> np.ndarray:
    """Draws (draws x m) of the limiting eigenvalues of a spike cluster, descending per row."""
    if draws < 1:
        raise InputError("draws must be positive")
    Q, _, Ghalf, _ = cluster_frame(pd, multiplicity)
    C = w_covariance(pd, phi_prime_k, v4)
    cov, idx = w_free_covariance(np.real(C))
    ev, vec = np.linalg.eigh(cov)
    root = vec * np.sqrt(np.clip(ev, 0.0, None))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A3]))
    free = rng.standard_normal((draws, len(idx))) @ root.T
    tau = pd.tau
    W = np.zeros((draws, tau, tau))
    for a, (i, j) in enumerate(idx):
        W[:, i, j] = free[:, a]
        W[:, j, i] = free[:, a]
    P = pd.N @ Q @ Ghalf  # tau x m
    B = np.einsum("ia,nij,jb->nab", P, W, P)
    vals = np.linalg.eigvalsh(-math.sqrt(phi_prime_k) * B)
    return vals[:, ::-1].copy()


def two_sample_omega_eta(pd: ProjectionData) -> tuple[float, float]:
    if pd.tau != 2:
        raise InputError("omega and eta are defined for two groups")
    k1, k2 = pd.fractions
    th, rho = np.real(pd.theta), np.real(pd.rho)
    sk = math.sqrt(k1 * k2)
    omega = k2 * th[0, 0] + k1 * th[1, 1] - 2.0 * sk * th[0, 1]
    eta = (k2**2 * rho[0, 0, 0, 0] + k1**2 * rho[1, 1, 1, 1] + 6.0 * k1 * k2 * rho[0, 1, 0, 1]
           - 4.0 * k2 * sk * rho[0, 0, 0, 1] - 4.0 * k1 * sk * rho[0, 1, 1, 1])
    return float(omega), float(eta)


def two_sample_variance(omega: float, eta: float, alpha1: float, phi_prime_1: float, v4: float) -> float:
    """Limiting variance of sqrt(n)(lambda_1 - lambda_n1) for two groups."""
    fp = phi_prime_1
    q = (1.0 + omega) ** 2
    return 2.0 * fp * alpha1**2 * (1.0 - fp / q + fp * (v4 - 3.0) * eta / (2.0 * q))


def two_group_limit_data(alpha: float, k1: float = 0.5) -> ProjectionData:
    """Infinite-ratio projection data for two groups whose single spike equals alpha."""
    gram = np.array([[0.0, 0.0], [0.0, alpha / k1]])
    return ProjectionData.limit_infinite([k1, 1.0 - k1], gram, alpha)


def predict_spikes(model: PopulationModel, n: int, p: int | None = None) -> SpikeReport:
    """Spikes of Sigma_x, their classification and cluster-sum CLT variances."""
    if p is None:
        p = model.p
    alphas = sigma_x_spikes(model, n, p)
    vals, mults = group_alphas(alphas)
    H = model.spectrum()
    regime = model.regime(n)
    report = classify_spikes(vals, mults, H, regime)
    for cl in report.clusters:
        if cl.kind != DISTANT:
            continue
        pd = projection_data(model, n, p, cl.alpha)
        try:
            cl.variance = cluster_sum_variance(pd, cl.multiplicity, cl.phi_prime, model.noise.v4)
        except ClusterMismatchError:
            cl.variance = None
    return report
