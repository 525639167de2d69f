"""Replication engine for the simulation studies.

Each replicate draws its data from seed streams keyed by (seed, replicate), so
records do not depend on the order or the thread in which replicates run.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .covariance import both_spectra, sesquilinear_centering, sesquilinear_panel, spectral_summary, L_covariance
from .datagen import (
    SCHEMA,
    PopulationModel,
    Sigma0,
    four_group_model,
    generate,
    null_model,
    three_group_model,
    tridiag_four_group_model,
    two_group_shift_model,
)
from .errors import InputError, MissingOracleError, SchemaError, SpikelabError, StudyAbortedError
from .inference import constructed_labels, default_dn, estimate_num_groups, t0, t_statistic
from .spectrum import lsd_cdf, semicircle_cdf
from .spikes import DISTANT, predict_spikes

STUDIES = ("spike_clt", "group_count", "cluster_score", "sesquilinear", "lsd_fit")
THREADS_ENV = "SPIKELAB_THREADS"
MAX_FAILURE_RATIO = 0.05


@dataclass
class ExperimentConfig:
    model: PopulationModel
    n: int
    replicates: int
    seed: int
    study: str
    params: dict = field(default_factory=dict)
    preset: str | None = None

    def __post_init__(self):
        if self.study not in STUDIES:
            raise InputError(f"unknown study {self.study!r}; choose from {', '.join(STUDIES)}")
        if self.replicates < 1:
            raise InputError("replicates must be at least 1")
        if self.n < 3:
            raise InputError("n must be at least 3")
        if not 0 <= self.seed < 2**64:
            raise InputError("seed must be a 64-bit unsigned integer")

    @property
    def p(self) -> int:
        return self.model.p

    def to_dict(self) -> dict:
        d = {
            "schema": SCHEMA,
            "study": self.study,
            "n": self.n,
            "p": self.p,
            "replicates": self.replicates,
            "seed": self.seed,
            "params": self.params,
            "model": self.model.to_dict(),
        }
        if self.preset is not None:
            d["preset"] = self.preset
        return d

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        """Full document, or ``{"preset": name, ...overrides}``."""
        if not isinstance(d, dict):
            raise SchemaError("study config must be a JSON object")
        if d.get("schema", SCHEMA) != SCHEMA:
            raise SchemaError(f"unsupported schema {d.get('schema')!r}")
        if "model" not in d:
            if "preset" not in d:
                raise SchemaError("study config needs either a model or a preset")
            base = preset(d["preset"])
            return cls(
                base.model,
                int(d.get("n", base.n)),
                int(d.get("replicates", base.replicates)),
                int(d.get("seed", base.seed)),
                base.study,
                {**base.params, **d.get("params", {})},
                base.preset,
            )
        for key in ("n", "study"):
            if key not in d:
                raise SchemaError(f"study config is missing {key!r}")
        model = PopulationModel.from_dict(d["model"])
        if "p" in d and int(d["p"]) != model.p:
            raise SchemaError("p disagrees with the model")
        try:
            return cls(model, int(d["n"]), int(d.get("replicates", 1)), int(d.get("seed", 0)),
                       d["study"], dict(d.get("params", {})), d.get("preset"))
        except InputError as exc:
            raise SchemaError(str(exc)) from None


@dataclass
class StudyResult:
    study: str
    config_hash: str
    seed: int
    records: list  # one dict per successful replicate, ordered by replicate
    failures: list  # {"replicate", "error", "message"}
    aggregates: dict
    config: dict | None = None

    @property
    def failure_ratio(self) -> float:
        total = len(self.records) + len(self.failures)
        return len(self.failures) / total if total else 0.0

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "study": self.study,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "failure_ratio": self.failure_ratio,
            "failures": self.failures,
            "aggregates": self.aggregates,
            "records": self.records,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, allow_nan=True)

    @classmethod
    def from_dict(cls, d: dict) -> "StudyResult":
        if d.get("schema") != SCHEMA:
            raise SchemaError(f"unsupported schema {d.get('schema')!r}")
        try:
            return cls(d["study"], d["config_hash"], int(d["seed"]), list(d["records"]),
                       list(d["failures"]), dict(d["aggregates"]), d.get("config"))
        except KeyError as exc:
            raise SchemaError(f"study result is missing {exc}") from None

    def records_csv(self) -> str:
        """Scalar fields of the records as CSV; list fields are expanded by index."""
        rows = [_flatten(r) for r in self.records]
        cols = sorted({k for r in rows for k in r}, key=_natural_key)
        lines = [",".join(cols)]
        for r in rows:
            lines.append(",".join(repr(r.get(k, "")) if isinstance(r.get(k), float) else str(r.get(k, "")) for k in cols))
        return "\n".join(lines) + "\n"


def _natural_key(k):
    return [int(t) if t.isdigit() else t for t in k.replace("[", ".").replace("]", "").split(".")]


def _flatten(rec, prefix=""):
    out = {}
    for k, v in rec.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, list):
            for i, x in enumerate(np.ravel(np.asarray(v, dtype=object))):
                out[f"{key}[{i}]"] = x
        else:
            out[key] = v
    return out


# ---------------------------------------------------------------- spike targets

def spike_targets(model: PopulationModel, n: int):
    """Per-index limits lambda_nk of the distant spikes and their cluster layout."""
    report = predict_spikes(model, n)
    targets, clusters = [], []
    for cl in report.clusters:
        if cl.kind != DISTANT:
            continue
        idx = list(range(len(targets), len(targets) + cl.multiplicity))
        targets.extend([cl.lambda_limit] * cl.multiplicity)
        clusters.append({"indices": idx, "multiplicity": cl.multiplicity, "lambda_limit": cl.lambda_limit,
                         "alpha": cl.alpha, "theory_variance": cl.variance})
    return np.array(targets), clusters


def delta_statistics(summary, targets, oracle=None, b_p: float | None = None, correct: bool = True):
    """(delta, delta_hat) for the leading eigenvalues.

    ``summary`` holds the spectrum of A_hat, ``oracle`` that of A_n (or None).
    delta_j = sqrt(n)(lambda_j(A_n) - target_j) and
    delta_hat_j = sqrt(n)(lambda_j(A_hat) - sqrt(b_p / b_hat) target_j).
    """
    targets = np.asarray(targets, dtype=float)
    k = targets.size
    n = summary.n
    if summary.eigenvalues.size < k:
        raise InputError("fewer eigenvalues than targets")
    if correct:
        if b_p is None:
            raise MissingOracleError("the sqrt(b_p / b_hat) correction needs the population b_p")
        factor = math.sqrt(b_p / summary.b_hat)
    else:
        factor = 1.0
    delta_hat = math.sqrt(n) * (summary.eigenvalues[:k] - factor * targets)
    delta = None if oracle is None else math.sqrt(n) * (oracle.eigenvalues[:k] - targets)
    return delta, delta_hat


# ---------------------------------------------------------------- statistics

def _moments(x) -> dict:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return {"mean": None, "var": None}
    return {"mean": float(np.mean(x)), "var": float(np.var(x, ddof=1)) if x.size > 1 else None}


def _histogram(x, bins) -> dict:
    counts, edges = np.histogram(np.asarray(x, dtype=float), bins=bins)
    return {"bin_edges": edges.tolist(), "counts": counts.tolist()}


def ks_distance(sample, cdf) -> float:
    """Two-sided KS distance between the empirical law of ``sample`` and ``cdf``."""
    x = np.sort(np.asarray(sample, dtype=float))
    m = x.size
    F = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, m + 1)
    return float(max(np.max(i / m - F), np.max(F - (i - 1) / m)))


def bulk_eigenvalues(eigs, n_spikes: int) -> np.ndarray:
    """Drop the top spikes and the structural zero of the centering."""
    ev = np.sort(np.asarray(eigs, dtype=float))[::-1]
    ev = ev[n_spikes:]
    return np.delete(ev, np.argmin(np.abs(ev)))


# ---------------------------------------------------------------- per-study work

def _rec_spike_clt(cfg, d, ctx):
    model = cfg.model
    head = ctx["head"]
    if cfg.params.get("oracle", True):
        hat, orc = both_spectra(d.X, model.a, model.b)
    else:
        hat, orc = spectral_summary(d.X), None
    delta, delta_hat = delta_statistics(hat, ctx["targets"], orc, model.b, correct=True)
    rec = {
        "a_hat": hat.a_hat,
        "b_hat": hat.b_hat,
        "top_hat": hat.eigenvalues[:head].tolist(),
        "delta_hat": delta_hat.tolist(),
    }
    if orc is not None:
        rec["top"] = orc.eigenvalues[:head].tolist()
        rec["delta"] = delta.tolist()
    return rec


def _agg_spike_clt(cfg, records, ctx):
    bins = int(cfg.params.get("bins", 30))
    tol = float(cfg.params.get("tol", 0.15))
    out = {"targets": ctx["targets"].tolist(), "clusters": []}
    for cl in ctx["clusters"]:
        idx = cl["indices"]
        entry = dict(cl)
        for key in ("delta", "delta_hat"):
            if records and key in records[0]:
                sums = [float(np.sum(np.asarray(r[key])[idx])) for r in records]
                entry[key + "_sum"] = {**_moments(sums), "histogram": _histogram(sums, bins)}
        out["clusters"].append(entry)
    for key in ("top", "top_hat"):
        if records and key in records[0]:
            arr = np.array([r[key] for r in records])
            out[key + "_mean"] = arr.mean(axis=0).tolist()
            out[key + "_var"] = arr.var(axis=0, ddof=1).tolist() if len(records) > 1 else None
    check = cfg.params.get("check")
    if check is not None and records:
        arr = np.array([r["top_hat"][: len(check)] for r in records])
        out["check"] = list(check)
        out["within_tol"] = np.mean(np.abs(arr - np.asarray(check)[None, :]) < tol, axis=0).tolist()
        if "top" in records[0]:
            arr = np.array([r["top"][: len(check)] for r in records])
            out["within_tol_oracle"] = np.mean(np.abs(arr - np.asarray(check)[None, :]) < tol, axis=0).tolist()
    return out


def _rec_group_count(cfg, d, ctx):
    s = spectral_summary(d.X)
    return {"tau_hat": estimate_num_groups(s, ctx["d_n"]), "top_hat": s.eigenvalues[: ctx["head"]].tolist()}


def _agg_group_count(cfg, records, ctx):
    th = [r["tau_hat"] for r in records]
    vals, counts = np.unique(th, return_counts=True)
    return {
        "tau": cfg.model.tau,
        "d_n": ctx["d_n"],
        "accuracy": float(np.mean(np.asarray(th) == cfg.model.tau)) if th else None,
        "counts": {str(int(v)): int(c) for v, c in zip(vals, counts)},
    }


def _rec_cluster_score(cfg, d, ctx):
    s = spectral_summary(d.X)
    n1, n2 = (int(v) for v in d.n_per_group)
    out = []
    for lab in ctx["labelings"]:
        pred = constructed_labels(n1, n2, lab["acc"], lab["rec"])
        sc = t_statistic(d.X, pred, truth=d.labels, summary=s)
        out.append({"T": sc.T, "t0": sc.t0, "acc": sc.metrics.acc, "rec": sc.metrics.rec})
    return {"scores": out}


def _agg_cluster_score(cfg, records, ctx):
    out = []
    for j, lab in enumerate(ctx["labelings"]):
        T = np.array([r["scores"][j]["T"] for r in records])
        t0s = np.array([np.nan if r["scores"][j]["t0"] is None else r["scores"][j]["t0"] for r in records])
        k1 = float(min(cfg.model.fractions))
        out.append({
            "acc": lab["acc"],
            "rec": lab["rec"],
            "t0_nominal": t0(lab["acc"], lab["rec"], k1),
            "median_T": float(np.median(T)) if T.size else None,
            "mean_T": float(np.mean(T)) if T.size else None,
            "median_abs_T_minus_t0": float(np.nanmedian(np.abs(T - t0s))) if T.size else None,
        })
    return {"labelings": out}


def _rec_sesquilinear(cfg, d, ctx):
    panel = sesquilinear_panel(d.X, d.labels, cfg.model, ctx["z"])
    dev = panel.forms - ctx["limit"]
    return {"deviation": np.real(dev).tolist(), "L": np.real(panel.L).tolist()}


def _agg_sesquilinear(cfg, records, ctx):
    tau = cfg.model.tau
    tol = float(cfg.params.get("tol", 0.15))
    cross_tol = float(cfg.params.get("cross_tol", 0.1))
    m = 2 * tau
    tols = np.full((m, m), tol)
    tols[:tau, tau:] = cross_tol
    tols[tau:, :tau] = cross_tol
    if not records:
        return {"limit": np.real(ctx["limit"]).tolist()}
    dev = np.array([r["deviation"] for r in records])
    L = np.array([r["L"] for r in records])
    within = np.mean(np.abs(dev) < tols[None], axis=0)
    C = ctx["Lcov"]
    theory = np.real(np.einsum("abab->ab", C)) if C is not None else None
    return {
        "limit": np.real(ctx["limit"]).tolist(),
        "tolerance": tols.tolist(),
        "within_tol": within.tolist(),
        "min_within_tol": float(within.min()),
        "max_abs_deviation": np.abs(dev).max(axis=0).tolist(),
        "mean_deviation": dev.mean(axis=0).tolist(),
        "L_var": L.var(axis=0, ddof=1).tolist() if len(records) > 1 else None,
        "L_var_theory": None if theory is None else theory.tolist(),
    }


def _rec_lsd_fit(cfg, d, ctx):
    s = spectral_summary(d.X)
    bulk = bulk_eigenvalues(s.eigenvalues, cfg.model.tau - 1)
    return {"ks": ks_distance(bulk, ctx["cdf"]), "b_hat": s.b_hat}


def _agg_lsd_fit(cfg, records, ctx):
    ks = np.array([r["ks"] for r in records])
    return {
        "reference": ctx["reference"],
        "mean_ks": float(ks.mean()) if ks.size else None,
        "max_ks": float(ks.max()) if ks.size else None,
    }


def _context(cfg: ExperimentConfig) -> dict:
    """Deterministic per-study quantities shared by all replicates."""
    model, n, par = cfg.model, cfg.n, cfg.params
    ctx = {"head": int(par.get("head", max(cfg.model.tau + 1, 5)))}
    if cfg.study == "spike_clt":
        if "targets" in par:
            targets = np.asarray(par["targets"], dtype=float)
            clusters = [{"indices": [j], "multiplicity": 1, "lambda_limit": float(t), "alpha": None,
                         "theory_variance": None} for j, t in enumerate(targets)]
        else:
            targets, clusters = spike_targets(model, n)
        ctx.update(targets=targets, clusters=clusters)
    elif cfg.study == "group_count":
        ctx["d_n"] = float(par.get("d_n") or default_dn(n))
    elif cfg.study == "cluster_score":
        if model.tau != 2:
            raise InputError("cluster_score needs a two-group model")
        ctx["labelings"] = [{"acc": float(l["acc"]), "rec": float(l["rec"])}
                            for l in par.get("labelings", [{"acc": 1.0, "rec": 1.0}])]
    elif cfg.study == "sesquilinear":
        z = float(par.get("z", 3.0))
        k = model.group_sizes(n) / n
        ctx["z"] = z
        ctx["limit"] = sesquilinear_centering(model, n, k, z, limit=par.get("limit", "infinite"))
        ctx["Lcov"] = L_covariance(model, z, n, k)
    elif cfg.study == "lsd_fit":
        ref = par.get("reference", "semicircle")
        if ref == "semicircle":
            ctx["cdf"] = semicircle_cdf
        elif ref == "lsd":
            H, r = model.spectrum(), model.regime(n)
            ctx["cdf"] = lambda x: lsd_cdf(H, r, x)
        else:
            raise InputError("reference must be 'semicircle' or 'lsd'")
        ctx["reference"] = ref
    return ctx


_STUDY_FUNCS = {
    "spike_clt": (_rec_spike_clt, _agg_spike_clt),
    "group_count": (_rec_group_count, _agg_group_count),
    "cluster_score": (_rec_cluster_score, _agg_cluster_score),
    "sesquilinear": (_rec_sesquilinear, _agg_sesquilinear),
    "lsd_fit": (_rec_lsd_fit, _agg_lsd_fit),
}


def aggregate(cfg: ExperimentConfig, records: list, ctx: dict | None = None) -> dict:
    """Aggregates as a pure function of the records."""
    if ctx is None:
        ctx = _context(cfg)
    return _STUDY_FUNCS[cfg.study][1](cfg, records, ctx)


def default_workers() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            w = int(env)
        except ValueError:
            raise InputError(f"{THREADS_ENV} must be an integer") from None
        return max(1, w)
    return os.cpu_count() or 1


def _run_one(cfg, ctx, rep):
    rec_fn = _STUDY_FUNCS[cfg.study][0]
    try:
        d = generate(cfg.model, cfg.n, cfg.seed, rep)
        rec = rec_fn(cfg, d, ctx)
    except SpikelabError as exc:
        return None, {"replicate": rep, "error": type(exc).__name__, "message": str(exc)}
    rec["replicate"] = rep
    return rec, None


def run_study(cfg: ExperimentConfig, workers: int | None = None) -> StudyResult:
    """Run every replicate and aggregate.

    Replicate failures from the library are recorded; more than 5% of them
    aborts the study with ``StudyAbortedError`` (the partial result is attached
    as ``exc.result``).
    """
    ctx = _context(cfg)
    workers = default_workers() if workers is None else max(1, int(workers))
    reps = range(cfg.replicates)
    if workers == 1:
        outcomes = [_run_one(cfg, ctx, r) for r in reps]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda r: _run_one(cfg, ctx, r), reps))
    records = [rec for rec, _ in outcomes if rec is not None]
    failures = [f for _, f in outcomes if f is not None]
    result = StudyResult(cfg.study, cfg.config_hash(), cfg.seed, records, failures,
                         aggregate(cfg, records, ctx), cfg.to_dict())
    if result.failure_ratio > MAX_FAILURE_RATIO:
        exc = StudyAbortedError(f"{len(failures)} of {cfg.replicates} replicates failed "
                                f"(first: {failures[0]['error']}: {failures[0]['message']})")
        exc.result = result
        raise exc
    return result


# ---------------------------------------------------------------- presets

def sesquilinear_model(n: int, p: int) -> PopulationModel:
    """Two balanced groups, Sigma0 = I, mu_1 = c^{1/4} e_1, mu_2 = 2 c^{1/4} e_2."""
    s = (p / n) ** 0.25
    means = np.zeros((p, 2))
    means[0, 0] = s
    means[1, 1] = 2.0 * s
    return PopulationModel(means, Sigma0.identity(p), np.array([0.5, 0.5]))


def _table1(noise):
    def build():
        n, p = 200, 2000
        return ExperimentConfig(four_group_model(n, p, noise), n, 1000, 20240601, "spike_clt")
    return build


def _lsd_semicircle():
    n = 200
    return ExperimentConfig(null_model(n * n), n, 20, 20240602, "lsd_fit")


def _fig2():
    n = 300
    return ExperimentConfig(three_group_model(n * n), n, 100, 20240603, "spike_clt",
                            {"check": [7.886, 3.005, 2.0]})


def _group_count():
    n = 120
    return ExperimentConfig(tridiag_four_group_model(n, 250 * n, strong=True), n, 200, 20240604, "group_count")


def _cluster_score():
    n = 200
    return ExperimentConfig(two_group_shift_model(n, n * n, 0.5, 3.0), n, 100, 20240605, "cluster_score",
                            {"labelings": [{"acc": 0.6, "rec": 1.0}, {"acc": 0.6, "rec": 0.6}]})


def _sesquilinear():
    n = 200
    return ExperimentConfig(sesquilinear_model(n, n * n), n, 100, 20240606, "sesquilinear", {"z": 3.0})


PRESETS = {
    "table1_c10_caseI": _table1("exp_centered"),
    "table1_c10_caseII": _table1("bernoulli_t"),
    "lsd_semicircle": _lsd_semicircle,
    "fig2": _fig2,
    "group_count_caseII": _group_count,
    "cluster_score_fig3": _cluster_score,
    "sesquilinear": _sesquilinear,
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise InputError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    cfg = PRESETS[name]()
    cfg.preset = name
    return cfg
