"""Command-line interface.

Subcommands: ``fit``, ``align``, ``report``, ``predict``, ``dynamic-predict``
and ``simulate``. Every subcommand writes only inside its ``--outdir``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or domain
error, 3 numerical failure, 4 convergence flagged (outputs still written).
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import os
import sys

import numpy as np
import pandas as pd

from . import __version__
from .basis import build_basis
from .data import ScalingRecord, ingest_long_csv, standardize
from .errors import ConfigurationError, DataError, DomainError, NumericalError
from .model import ModelConfig
from .postprocess import (
    Reference,
    convergence_summary,
    default_reference,
    procrustes_align,
    variance_explained,
    write_alignment_report,
    write_fpc_estimate,
    write_variance_table,
)
from .predict import PREDICTION_COLUMNS, dynamic_predict, static_predict, write_predictions
from .sampler import SamplerConfig, load_draws, run, save_draws
from .simulate import EngineConfig, SimScenario, run_study

log = logging.getLogger("sparsefpca")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL, EXIT_CONVERGENCE = 1, 2, 3, 4
THREADS_ENV = "SPARSEFPCA_THREADS"

# defaults for the fit configuration; "K" has no default and must be given
FIT_DEFAULTS = {
    "model": {"Q": 20, "degree": 3, "quad_points": 10, "alpha": 0.1,
              "a_sigma": 0.01, "b_sigma": 0.01, "a_lambda": 0.01, "b_lambda": 0.01,
              "a_mu": 0.01, "b_mu": 0.01, "a_psi": 0.01, "b_psi": 0.01},
    "sampler": {"n_chains": 2, "n_warmup": 2000, "n_samples": 1000, "seed": 0, "mode": "blocked-gibbs",
                "target_accept": 0.8, "max_depth": 10, "lambda_update": "truncated", "init": "data"},
    "columns": {},
    "time_range": None,
}
REQUIRED_MODEL_KEYS = ("K",)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_dump(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def effective_fit_config(user: dict) -> dict:
    """Merge a user fit config with the defaults; unknown or missing required keys raise."""
    if not isinstance(user, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = set(user) - set(FIT_DEFAULTS)
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    model = dict(user.get("model", {}))
    for key in REQUIRED_MODEL_KEYS:
        if key not in model:
            raise ConfigurationError(f"missing config key: model.{key}")
    cfg = {}
    for section in ("model", "sampler"):
        given = dict(user.get(section, {}))
        allowed = set(FIT_DEFAULTS[section]) | (set(REQUIRED_MODEL_KEYS) if section == "model" else set())
        bad = set(given) - allowed
        if bad:
            raise ConfigurationError(f"unknown {section} key(s): {', '.join(sorted(bad))}")
        cfg[section] = {**FIT_DEFAULTS[section], **given}
    cfg["columns"] = dict(user.get("columns", {}))
    cfg["time_range"] = user.get("time_range")
    return cfg


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _run_manifest(cfg: dict, inputs: dict, seed) -> dict:
    return {
        "engine_version": __version__,
        "config_sha256": _config_hash(cfg),
        "seed": seed,
        "inputs": {name: {"path": os.path.abspath(p), "sha256": _sha256(p)} for name, p in inputs.items()},
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
    }


def _set_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is not None:
        if n < 1:
            raise ConfigurationError("--threads must be at least 1")
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    return n


def _basis_from(draws):
    spec = draws.basis_spec
    return build_basis(spec["Q"], spec["degree"], spec["quad_points"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_fit(args) -> int:
    with open(args.config) as fh:
        try:
            user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{args.config}: invalid JSON ({exc})") from None
    cfg = effective_fit_config(user)
    m, s = cfg["model"], cfg["sampler"]
    records = ingest_long_csv(args.data, cfg["columns"])
    data, scaling = standardize(records, time_range=cfg["time_range"])
    basis = build_basis(m["Q"], m["degree"], m["quad_points"])
    mc = ModelConfig(**{k: v for k, v in m.items() if k not in ("degree", "quad_points")}, P=data.n_vars)
    if mc.K > mc.P * mc.Q:
        raise ConfigurationError("K must not exceed P * Q")
    sc = SamplerConfig(**s)
    os.makedirs(args.outdir, exist_ok=True)
    _json_dump(cfg, os.path.join(args.outdir, "effective_config.json"))
    draws = run(sc, data, basis, mc, scaling, workers=args.threads or 1)
    save_draws(draws, os.path.join(args.outdir, "draws"))
    scaling.save(os.path.join(args.outdir, "scaling.json"))
    aligned = procrustes_align(draws, default_reference(draws, basis), basis)
    report = write_alignment_report(os.path.join(args.outdir, "convergence.json"), aligned)
    _json_dump(_run_manifest(cfg, {"data": args.data, "config": args.config}, s["seed"]),
               os.path.join(args.outdir, "run_manifest.json"))
    flagged = report["convergence"]["flagged"] or report["sampler"]["persistent_divergences"]
    print(f"fit: {draws.n_chains} chains x {draws.n_samples} draws written to {args.outdir}; "
          f"max R-hat {report['convergence']['max_rhat']:.4f}, divergences {report['sampler']['n_divergent']}")
    return EXIT_CONVERGENCE if flagged else 0


def _load_reference(path, draws) -> Reference:
    """Reference CSV with columns ``time`` (original units), ``variable``, ``k``, ``value``."""
    df = pd.read_csv(path)
    need = {"time", "variable", "k", "value"}
    if not need <= set(df.columns):
        raise DataError(f"{path}: reference needs columns {sorted(need)}")
    sc = draws.scaling
    variables = [str(v) for v in sc.variables]
    times = np.unique(df["time"].to_numpy(dtype=float))
    K = draws.K
    vals = np.full((len(variables) * times.size, K), np.nan)
    for _, r in df.iterrows():
        p = variables.index(str(r["variable"]))
        m = int(np.searchsorted(times, r["time"]))
        vals[p * times.size + m, int(r["k"]) - 1] = r["value"]
    if np.isnan(vals).any():
        raise DataError(f"{path}: reference is incomplete; every (time, variable, k) needs a value")
    return Reference(vals, sc.to_unit_time(times), source=f"file:{os.path.basename(path)}")


def _aligned(args):
    draws = load_draws(args.draws)
    basis = _basis_from(draws)
    ref = _load_reference(args.reference, draws) if getattr(args, "reference", None) else default_reference(draws, basis)
    return draws, basis, procrustes_align(draws, ref, basis)


def cmd_align(args) -> int:
    draws, basis, aligned = _aligned(args)
    os.makedirs(args.outdir, exist_ok=True)
    C, S = draws.n_chains, draws.n_samples
    idx = pd.DataFrame({"chain": np.repeat(np.arange(1, C + 1), S), "draw": np.tile(np.arange(1, S + 1), C)})
    for name in ("rotations", "Psi", "scores"):
        arr = getattr(aligned, name).reshape(C * S, -1)
        cols = [f"{name}[{';'.join(str(i + 1) for i in ix)}]" for ix in np.ndindex(*getattr(aligned, name).shape[2:])]
        out = pd.concat([idx, pd.DataFrame(arr, columns=cols)], axis=1)
        out.to_csv(os.path.join(args.outdir, f"aligned_{name}.csv"), index=False, float_format="%.17g")
    report = write_alignment_report(os.path.join(args.outdir, "alignment_report.json"), aligned)
    print(f"align: reference {aligned.reference.source}; max R-hat {report['convergence']['max_rhat']:.4f}")
    return EXIT_CONVERGENCE if report["convergence"]["flagged"] else 0


def cmd_report(args) -> int:
    draws, basis, aligned = _aligned(args)
    os.makedirs(args.outdir, exist_ok=True)
    ve = variance_explained(draws)
    write_variance_table(os.path.join(args.outdir, "variance_explained.csv"), ve)
    write_fpc_estimate(os.path.join(args.outdir, "fpc_estimate.csv"), aligned, basis)
    summary = convergence_summary(aligned)
    report = write_alignment_report(os.path.join(args.outdir, "report.json"), aligned, summary)
    print(ve.to_string(index=False))
    return EXIT_CONVERGENCE if report["convergence"]["flagged"] else 0


def _parse_times(text):
    if text is None:
        return None
    text = text.strip()
    if not text:
        return np.zeros(0)
    return np.array([float(x) for x in text.split(",")])


def _split_times(times, scaling: ScalingRecord, outdir, hi=None):
    """Drop out-of-range times, writing one row per rejected time."""
    hi = scaling.t_max if hi is None else hi
    span = scaling.t_max - scaling.t_min
    ok = (times >= scaling.t_min - 1e-9 * span) & (times <= hi + 1e-9 * span)
    if np.any(~ok):
        rej = pd.DataFrame({"time": times[~ok], "reason": f"outside fitted range [{scaling.t_min}, {hi}]"})
        rej.to_csv(os.path.join(outdir, "rejected_times.csv"), index=False)
        for t in times[~ok]:
            log.warning("time %s is outside the fitted range and was skipped", t)
    return times[ok], int(np.sum(~ok))


def _empty_predictions(path) -> None:
    pd.DataFrame({c: [] for c in PREDICTION_COLUMNS}).to_csv(path, index=False)


def cmd_predict(args) -> int:
    draws = load_draws(args.draws)
    basis = _basis_from(draws)
    os.makedirs(args.outdir, exist_ok=True)
    out = os.path.join(args.outdir, "predictions.csv")
    times = _parse_times(args.times)
    if times is not None:
        times, n_bad = _split_times(times, draws.scaling, args.outdir)
        if times.size == 0:
            _empty_predictions(out)
            print("predict: no targets; wrote an empty table")
            return EXIT_DATA if n_bad else 0
    subjects = None if args.subjects is None else [s for s in args.subjects.split(",") if s]
    if subjects is not None and not subjects:
        _empty_predictions(out)
        return 0
    traj = static_predict(draws, subjects=subjects, times=times, basis=basis, with_noise=args.with_noise,
                          rng=np.random.default_rng(args.seed))
    write_predictions(out, traj)
    print(f"predict: {len(traj.subjects)} subject(s) x {traj.times.size} time(s) -> {out}")
    return 0


def cmd_dynamic(args) -> int:
    draws = load_draws(args.draws)
    basis = _basis_from(draws)
    os.makedirs(args.outdir, exist_ok=True)
    out = os.path.join(args.outdir, "predictions.csv")
    new = ingest_long_csv(args.new)
    rng = np.random.default_rng(args.seed)
    times = _parse_times(args.times)
    frames = []
    for subj, rec in new.groupby("subject", sort=True):
        t = None
        if times is not None:
            t, _ = _split_times(times, draws.scaling, args.outdir, hi=args.cutoff + args.horizon)
            if t.size == 0:
                continue
        traj = dynamic_predict(rec, args.cutoff, args.horizon, draws, basis=basis, times=t, rng=rng,
                               with_noise=args.with_noise)
        frames.append(traj.to_frame())
    if frames:
        pd.concat(frames, ignore_index=True).to_csv(out, index=False, float_format="%.10g")
    else:
        _empty_predictions(out)
    print(f"dynamic-predict: {len(frames)} subject(s) -> {out}")
    return 0


def cmd_simulate(args) -> int:
    scenario = SimScenario.load(args.scenario)
    engine = EngineConfig()
    if args.engine:
        with open(args.engine) as fh:
            engine = EngineConfig.from_dict(json.load(fh))
    if args.replicates is not None:
        import dataclasses

        scenario = dataclasses.replace(scenario, n_replicates=args.replicates)
    os.makedirs(args.outdir, exist_ok=True)
    if args.timing_sizes:
        return _timing_study(scenario, engine, args)
    report = run_study(scenario, engine, outdir=args.outdir, save_draws=args.save_draws,
                       workers=args.threads or 1)
    _json_dump(engine.to_dict(), os.path.join(args.outdir, "engine.json"))
    s = report.summary()
    print(json.dumps({k: s[k] for k in ("n_completed", "mean_rise", "mean_coverage")}, indent=2, sort_keys=True))
    return EXIT_NUMERICAL if report.failures and not report.replicates else 0


def _timing_study(scenario, engine, args) -> int:
    """Wall-clock of one fit per subject count ``I``."""
    import dataclasses
    import time

    rows = []
    for I in [int(x) for x in args.timing_sizes.split(",")]:
        sc = dataclasses.replace(scenario, I=I, n_replicates=1)
        t0 = time.perf_counter()
        rep = run_study(sc, engine)
        rows.append({"I": I, "seconds": time.perf_counter() - t0, "completed": len(rep.replicates)})
    pd.DataFrame(rows).to_csv(os.path.join(args.outdir, "timing_study.csv"), index=False)
    print(pd.DataFrame(rows).to_string(index=False))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sparsefpca", description="Bayesian sparse multivariate FPCA")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=None,
                   help=f"cap on worker processes and BLAS threads (default: ${THREADS_ENV} or unlimited)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="sample the posterior for a long-format CSV")
    f.add_argument("data")
    f.add_argument("--config", required=True, help="JSON config; model.K is required")
    f.add_argument("--outdir", required=True)
    f.set_defaults(func=cmd_fit)

    for name, func, helptext in (("align", cmd_align, "Procrustes-align draws and write R-hat diagnostics"),
                                 ("report", cmd_report, "variance explained, FPC estimate and diagnostics")):
        a = sub.add_parser(name, help=helptext)
        a.add_argument("draws", help="draws directory written by fit")
        a.add_argument("--reference", help="CSV with time,variable,k,value (default: posterior-mean SVD)")
        a.add_argument("--outdir", required=True)
        a.set_defaults(func=func)

    pr = sub.add_parser("predict", help="static predictions for fitted subjects")
    pr.add_argument("draws")
    pr.add_argument("--times", help="comma-separated original-unit times (default: observed grid)")
    pr.add_argument("--subjects", help="comma-separated subject labels (default: all)")
    pr.add_argument("--with-noise", action="store_true", help="intervals for new observations")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--outdir", required=True)
    pr.set_defaults(func=cmd_predict)

    d = sub.add_parser("dynamic-predict", help="predict new subjects from their data up to a cutoff")
    d.add_argument("draws")
    d.add_argument("--new", required=True, help="long-format CSV of the new subjects' observations")
    d.add_argument("--cutoff", type=float, required=True)
    d.add_argument("--horizon", type=float, default=0.0)
    d.add_argument("--times", help="comma-separated prediction times")
    d.add_argument("--with-noise", action="store_true")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--outdir", required=True)
    d.set_defaults(func=cmd_dynamic)

    s = sub.add_parser("simulate", help="replicated simulation study")
    s.add_argument("scenario", help="scenario JSON")
    s.add_argument("--engine", help="engine JSON (model and sampler settings)")
    s.add_argument("--replicates", type=int)
    s.add_argument("--save-draws", action="store_true")
    s.add_argument("--timing-sizes", help="comma-separated subject counts for a timing study")
    s.add_argument("--outdir", required=True)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.threads = _set_threads(args.threads)
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DomainError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
