"""Command-line front end.

Matrices are comma-separated with one row per variable and one column per
observation (p rows, n columns). Exit codes: 0 success, 1 usage error,
2 data or estimation failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from .covariance import spectral_summary
from .datagen import PopulationModel
from .errors import BelowEdgeError, ParseError, SpikelabError, WrongClusterCountError
from .inference import default_dn, estimate_num_groups, t_statistic, t_tau
from .montecarlo import ExperimentConfig, PRESETS, preset, run_study
from .spectrum import RegimeParams, lsd_density, semicircle_density
from .spikes import predict_spikes

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def read_matrix(path: str, header: bool = False) -> np.ndarray:
    try:
        X = np.loadtxt(path, delimiter=",", skiprows=1 if header else 0, ndmin=2)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if X.size == 0:
        raise ParseError(f"{path}: empty matrix")
    if not np.all(np.isfinite(X)):
        raise ParseError(f"{path}: non-finite entries")
    return X


def read_labels(path: str, n: int | None = None, header: bool = False) -> np.ndarray:
    try:
        raw = np.loadtxt(path, delimiter=",", skiprows=1 if header else 0, ndmin=1, dtype=float)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    raw = raw.ravel()
    if raw.size == 0 or np.any(raw != np.round(raw)):
        raise ParseError(f"{path}: labels must be integers")
    lab = raw.astype(np.int64)
    if n is not None and lab.size != n:
        raise ParseError(f"{path}: {lab.size} labels for {n} observations")
    return lab


def read_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from None


def _emit(text: str, out: str | None):
    if out:
        with open(out, "w") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


def cmd_estimate_groups(args):
    X = read_matrix(args.matrix, args.header)
    s = spectral_summary(X)
    d_n = args.dn if args.dn is not None else default_dn(s.n)
    out = {
        "schema": "spikelab/v1",
        "tau_hat": estimate_num_groups(s, d_n),
        "eigenvalues_head": s.eigenvalues[: args.head].tolist(),
        "d_n": d_n,
        "a_hat": s.a_hat,
        "b_hat": s.b_hat,
        "n": s.n,
        "p": s.p,
    }
    _emit(_dump(out), args.out)


def cmd_eval_clustering(args):
    X = read_matrix(args.matrix, args.header)
    n = X.shape[1]
    lab = read_labels(args.labels, n)
    truth = read_labels(args.truth, n) if args.truth else None
    s = spectral_summary(X)
    try:
        if np.unique(lab).size == 2:
            score = t_statistic(X, lab, truth=truth, summary=s)
        else:
            raise WrongClusterCountError("more than two clusters")
    except WrongClusterCountError:
        score = t_tau(X, lab, summary=s)
    except BelowEdgeError as exc:
        raise BelowEdgeError(f"no usable spike: {exc}") from None
    _emit(_dump(score.to_dict()), args.out)


def cmd_predict_spikes(args):
    model = PopulationModel.from_dict(read_json(args.model))
    p = args.p if args.p is not None else model.p
    if p != model.p:
        raise ParseError(f"--p {p} disagrees with the model dimension {model.p}")
    _emit(_dump(predict_spikes(model, args.n, p).to_dict()), args.out)


def _preset(name):
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return preset(name)


def cmd_simulate(args):
    if args.preset:
        cfg = _preset(args.preset)
    elif args.study:
        cfg = ExperimentConfig.from_dict(read_json(args.study))
    else:
        raise UsageError("simulate needs a study file or --preset")
    params = dict(cfg.params)
    if args.dn is not None:
        params["d_n"] = args.dn
    if args.z is not None:
        params["z"] = args.z
    cfg = dataclasses.replace(
        cfg,
        seed=cfg.seed if args.seed is None else args.seed,
        replicates=cfg.replicates if args.replicates is None else args.replicates,
        params=params,
    )
    res = run_study(cfg, workers=args.workers)
    if args.format == "csv":
        _emit(res.records_csv(), args.out)
    else:
        _emit(res.to_json(), args.out)


def _grid(spec: str) -> np.ndarray:
    try:
        lo, hi, num = spec.split(":")
        g = np.linspace(float(lo), float(hi), int(num))
    except ValueError:
        raise UsageError(f"grid must look like lo:hi:num, got {spec!r}") from None
    if g.size < 2:
        raise UsageError("grid needs at least two points")
    return g


def cmd_lsd(args):
    grid = _grid(args.grid)
    if args.preset:
        cfg = _preset(args.preset)
        model, n = cfg.model, cfg.n
    elif args.model:
        if args.n is None and not args.infinite:
            raise UsageError("lsd needs --n (or --infinite) with a model file")
        model, n = PopulationModel.from_dict(read_json(args.model)), args.n
    elif not args.infinite:
        raise UsageError("lsd needs a model file, --preset or --infinite")
    else:
        model = n = None
    if args.infinite or model is None:
        dens = semicircle_density(grid)
    else:
        H = model.spectrum()
        dens = lsd_density(H, RegimeParams.from_spectrum(H, model.p / n), grid)
    lines = ["x,density"] + [f"{x!r},{d!r}" for x, d in zip(grid.tolist(), dens.tolist())]
    _emit("\n".join(lines), args.out)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="spikelab", description=__doc__.strip().splitlines()[0])
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p, header=True):
        p.add_argument("--out", help="also write the output to this path")
        if header:
            p.add_argument("--header", action="store_true", help="skip a header row in CSV inputs")

    p = sub.add_parser("estimate-groups", help="estimate the number of populations")
    p.add_argument("matrix", help="p x n CSV (rows are variables)")
    p.add_argument("--dn", type=float, help="threshold offset d_n (default 1/(log n)^2)")
    p.add_argument("--head", type=int, default=10, help="number of leading eigenvalues to report")
    common(p)
    p.set_defaults(func=cmd_estimate_groups)

    p = sub.add_parser("eval-clustering", help="score a clustering without ground truth")
    p.add_argument("matrix")
    p.add_argument("labels", help="one integer label per column of the matrix")
    p.add_argument("--truth", help="true labels, enables ACC/REC/PRE and t0")
    common(p)
    p.set_defaults(func=cmd_eval_clustering)

    p = sub.add_parser("predict-spikes", help="spike limits and CLT variances for a model")
    p.add_argument("model", help="model JSON")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--p", type=int)
    common(p, header=False)
    p.set_defaults(func=cmd_predict_spikes)

    p = sub.add_parser("simulate", help="run a Monte Carlo study")
    p.add_argument("study", nargs="?", help="study JSON (full config or {\"preset\": name, ...})")
    p.add_argument("--preset", help=f"one of: {', '.join(sorted(PRESETS))}")
    p.add_argument("--seed", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--dn", type=float)
    p.add_argument("--z", type=float)
    p.add_argument("--workers", type=int, help="thread count (default: SPIKELAB_THREADS or CPU count)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    common(p, header=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("lsd", help="limiting spectral density on a grid")
    p.add_argument("model", nargs="?", help="model JSON")
    p.add_argument("--n", type=int)
    p.add_argument("--preset", help="take the model and n from a study preset")
    p.add_argument("--infinite", action="store_true", help="use the p/n -> infinity semicircle law")
    p.add_argument("--grid", default="-2.5:2.5:101", help="lo:hi:num (default -2.5:2.5:101)")
    common(p, header=False)
    p.set_defaults(func=cmd_lsd)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(f"spikelab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SpikelabError, OSError) as exc:
        print(f"spikelab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
