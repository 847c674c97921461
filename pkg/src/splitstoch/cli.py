"""Command-line experiment runner.

Builds a problem, reports the admissible step-size and relaxation windows,
runs seeded repeats and writes per-run traces, an aggregate, and a manifest::

    splitstoch --problem cs --n 512 --rows 0.25 --sparsity 0.01 --transform dct \\
        --participation 0.3 --alpha 1 --sigma 0.5 --repeats 20 --output out/

Exit codes: 0 success, 1 configuration error, 2 parse error, 3 non-finite iterate.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import shlex
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from splitstoch.core import EmptyParameterWindow, InvalidConfig, SplitStochError, make_config, validate_config
from splitstoch.diagnostics.metrics import eval_phi
from splitstoch.diagnostics.reference import NoConvergence, reference_solve, run_seed
from splitstoch.problems import (
    ParseError,
    NonBinaryLabels,
    build_compressed_sensing,
    build_logistic,
    load_libsvm,
    split_train_test,
    synthetic_binary_dataset,
    toy1d,
)
from splitstoch.sampling import ParticipationPolicy
from splitstoch.solver import MaxItersExceeded, NonFiniteIterate, run

EXIT_OK, EXIT_CONFIG, EXIT_PARSE, EXIT_NONFINITE = 0, 1, 2, 3

TRACE_FIELDS = ("k", "stopping_error", "consensus_max", "phi", "h_value", "lyapunov",
                "prox_calls", "grad_calls", "elapsed_s")
FLAG_KEYS = ("problem", "seed", "repeats", "iters", "tol", "participation", "alpha", "sigma", "gamma",
             "lambda-relax", "output", "n", "rows", "sparsity", "transform", "data", "train-frac",
             "lambda-lo", "lambda-hi", "m-agents", "threads", "timing", "reference")


class ConfigFileError(ValueError):
    pass


def _float_or_auto(text: str):
    if text == "auto":
        return "auto"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {text!r}") from None


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitstoch", description=__doc__.split("\n\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--problem", choices=("cs", "logistic", "toy1d"), default="toy1d")
    p.add_argument("--config", help="flat key = value file (keys are flag names) or a run manifest.json")
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--iters", type=int, default=1000, help="minimum iteration count K")
    p.add_argument("--tol", type=float, default=1e-8, help="stopping tolerance on the consensus error")
    p.add_argument("--participation", type=float, default=1.0, help="fraction of users sampled per step")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--gamma", type=_float_or_auto, default="auto")
    p.add_argument("--lambda-relax", type=_float_or_auto, default="auto")
    p.add_argument("--output", default="splitstoch-out")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $SPLITSTOCH_THREADS or 1)")
    p.add_argument("--timing", type=_bool, nargs="?", const=True, default=False,
                   help="fill the elapsed_s trace column (makes traces non-reproducible)")
    p.add_argument("--reference", type=_bool, nargs="?", const=True, default=True,
                   help="compute a reference optimum for the summary")
    cs = p.add_argument_group("compressed sensing")
    cs.add_argument("--n", type=int, default=512)
    cs.add_argument("--rows", type=float, default=0.25, help="measurements: fraction of n if <= 1, else a count")
    cs.add_argument("--sparsity", type=float, default=0.01)
    cs.add_argument("--transform", choices=("dct", "dft_real"), default="dct")
    lg = p.add_argument_group("logistic regression")
    lg.add_argument("--data", default="synthetic", help="LIBSVM file, or 'synthetic'")
    lg.add_argument("--train-frac", type=float, default=0.75)
    lg.add_argument("--lambda-lo", type=float, default=1e-3)
    lg.add_argument("--lambda-hi", type=float, default=1e-2)
    lg.add_argument("--m-agents", type=int, default=21)
    return p


def read_config_file(path) -> list[str]:
    """Turn a config file into argv tokens that precede the command line (so flags win)."""
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigFileError(f"{path}: {exc}") from None
        items = data.get("config", data).items()
    else:
        items = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigFileError(f"{path}:{lineno}: expected key = value")
            items.append((key.strip(), value.strip()))
    argv = []
    for key, value in items:
        key = key.replace("_", "-")
        if key not in FLAG_KEYS:
            raise ConfigFileError(f"{path}: unknown key {key!r}")
        if value is None:
            continue
        argv += [f"--{key}", str(value)]
    return argv


def parse_args(argv):
    parser = build_parser()
    pre_parser = argparse.ArgumentParser(add_help=False)
    pre_parser.add_argument("--config")
    pre, _ = pre_parser.parse_known_args(argv)
    file_argv = read_config_file(pre.config) if pre.config else []
    args = parser.parse_args(file_argv + list(argv))
    if args.threads is None:
        args.threads = int(os.environ.get("SPLITSTOCH_THREADS", "1"))
    return args


def effective_config(args) -> dict:
    """Flag values as a flat dict (the form stored in the manifest and config.txt)."""
    out = {}
    for key in FLAG_KEYS:
        if key == "threads":
            continue  # never affects results
        out[key] = getattr(args, key.replace("-", "_"))
    return out


# -- problem construction -----------------------------------------------------------

@dataclass
class Built:
    problem: object
    x_true: np.ndarray | None = None
    certificate_source: object = None
    phi_star: float | None = None


def _cs_rows(args) -> int:
    return int(round(args.rows * args.n)) if args.rows <= 1 else int(args.rows)


def _load_dataset(args):
    if args.data == "synthetic":
        return synthetic_binary_dataset(seed=args.seed)
    return load_libsvm(args.data)


def build_problem(args, seed: int, dataset=None) -> Built:
    if args.problem == "toy1d":
        planted = toy1d()
        return Built(planted.problem, certificate_source=planted, phi_star=planted.phi_star)
    if args.problem == "cs":
        inst, problem = build_compressed_sensing(args.n, _cs_rows(args), args.sparsity, args.transform, seed)
        return Built(problem, x_true=inst.x_true)
    train, _ = split_train_test(dataset, args.train_frac, args.seed)
    return Built(build_logistic(train, args.m_agents, (args.lambda_lo, args.lambda_hi), seed))


def make_run_config(args, problem, seed: int):
    return make_config(
        problem,
        alpha=args.alpha,
        sigma=args.sigma,
        gamma=None if args.gamma == "auto" else args.gamma,
        lambdas=None if args.lambda_relax == "auto" else args.lambda_relax,
        participation=ParticipationPolicy.fixed_fraction(args.participation),
        max_iters=args.iters,
        tolerance=args.tol,
        seed=seed,
    )


# -- output -------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for rec in trace:
            w.writerow([_fmt(getattr(rec, f)) for f in TRACE_FIELDS])


def write_aggregate(path, traces) -> None:
    """Per-``k`` mean and standard deviation across runs (over the runs that reached ``k``)."""
    cols = TRACE_FIELDS[1:-1]
    longest = max(len(t) for t in traces)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "runs"] + [f"{c}_{s}" for c in cols for s in ("mean", "std")])
        for j in range(longest):
            recs = [t[j] for t in traces if j < len(t)]
            row = [recs[0].k, len(recs)]
            for c in cols:
                vals = np.array([np.nan if getattr(r, c) is None else getattr(r, c) for r in recs], dtype=float)
                with warnings.catch_warnings(), np.errstate(invalid="ignore"):
                    warnings.simplefilter("ignore", RuntimeWarning)
                    row += [_fmt(np.mean(vals)), _fmt(np.std(vals))]
            w.writerow(row)


def write_signal(path, x, x_true) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x_final", "x_true"])
        for a, b in zip(x, x_true):
            w.writerow([_fmt(a), _fmt(b)])


# -- driver ---------------------------------------------------------------------------

def _one_run(args, r: int, dataset, inner_threads: int):
    seed = run_seed(args.seed, r)
    built = build_problem(args, seed, dataset)
    problem = built.problem
    config = make_run_config(args, problem, seed)
    report = validate_config(problem, config)
    cert = built.certificate_source.certificate(config) if built.certificate_source is not None else None
    status = "converged"
    if inner_threads > 1:
        with ThreadPoolExecutor(inner_threads) as pool:
            result = _run_guarded(problem, config, cert, pool, args.timing)
    else:
        result = _run_guarded(problem, config, cert, None, args.timing)
    if isinstance(result, MaxItersExceeded):
        status = "hard_cap"
    state, trace = result.state, result.trace
    return dict(r=r, seed=seed, built=built, config=config, report=report, state=state, trace=trace, status=status)


def _run_guarded(problem, config, cert, executor, timing):
    try:
        return run(problem, config, certificate=cert, executor=executor, timing=timing)
    except MaxItersExceeded as exc:
        return exc


def run_experiment(args, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        dataset = _load_dataset(args) if args.problem == "logistic" else None
    except (ParseError, NonBinaryLabels) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as exc:
        print(f"error: cannot read data: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.repeats < 1 or args.threads < 1:
        print("error: --repeats and --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG

    # validate once on the first repeat's instance before spending any time
    try:
        probe = build_problem(args, run_seed(args.seed, 0), dataset)
        probe_cfg = make_run_config(args, probe.problem, run_seed(args.seed, 0))
        report = validate_config(probe.problem, probe_cfg)
    except (EmptyParameterWindow, SplitStochError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"problem: {probe.problem.name}  (m = {probe.problem.m}, n = {probe.problem.n})", file=out)
    print(f"gamma = {probe_cfg.gamma:.6g}", file=out)
    print(report.describe(), file=out)
    if not report.ok:
        print("error: configuration outside the admissible windows", file=sys.stderr)
        return EXIT_CONFIG

    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    outer = min(args.threads, args.repeats)
    inner = args.threads if args.repeats == 1 else 1
    try:
        if outer > 1:
            with ThreadPoolExecutor(outer) as pool:
                results = list(pool.map(lambda r: _one_run(args, r, dataset, inner), range(args.repeats)))
        else:
            results = [_one_run(args, r, dataset, inner) for r in range(args.repeats)]
    except NonFiniteIterate as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (InvalidConfig, EmptyParameterWindow) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    runs_meta = []
    for res in results:
        write_trace(outdir / f"run_{res['r']:03d}.csv", res["trace"])
        runs_meta.append(_summarize(args, res, outdir))
        if res["status"] == "hard_cap":
            print(f"warning: run {res['r']} hit the hard iteration cap; partial trace written", file=sys.stderr)
    write_aggregate(outdir / "aggregate.csv", [res["trace"] for res in results])

    cfg = effective_config(args)
    (outdir / "config.txt").write_text("".join(f"{k} = {v}\n" for k, v in cfg.items()))
    manifest = {
        "config": cfg,
        "seeds": [res["seed"] for res in results],
        "validation": {
            "gamma": probe_cfg.gamma,
            "gamma_bound": report.gamma_bound,
            "lambda": list(probe_cfg.lambdas[:1]) if len(set(probe_cfg.lambdas)) == 1 else list(probe_cfg.lambdas),
            "checks": report.checks,
        },
        "runs": runs_meta,
        "summary": _aggregate_summary(runs_meta),
        "command": "splitstoch " + " ".join(shlex.quote(a) for a in _argv_for(cfg)),
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n")
    for line in _summary_lines(manifest["summary"]):
        print(line, file=out)
    return EXIT_OK


def _summarize(args, res, outdir) -> dict:
    state, trace, built = res["state"], res["trace"], res["built"]
    problem = built.problem
    users = problem.m - 1
    iters = state.k
    meta = {
        "run": res["r"],
        "seed": res["seed"],
        "status": res["status"],
        "iterations": iters,
        "stopping_error": trace[-1].stopping_error if trace else math.inf,
        "phi_final": eval_phi(problem, state.x),
        "prox_calls": state.prox_calls,
        "grad_calls": state.grad_calls,
        "grad_calls_per_iter": (state.grad_calls - 2 * users) / iters if iters else 0.0,
        "grad_calls_full_participation_per_iter": 3 * users,
    }
    if built.x_true is not None:
        meta["relative_error"] = float(np.linalg.norm(state.x - built.x_true) / max(np.linalg.norm(built.x_true), 1e-300))
        write_signal(outdir / f"signal_{res['r']:03d}.csv", state.x, built.x_true)
    if args.reference:
        phi_star = built.phi_star
        if phi_star is None:
            try:
                _, phi_star = reference_solve(problem, tol=1e-10)
            except NoConvergence:
                phi_star = None
        if phi_star is not None:
            meta["phi_star"] = phi_star
            # x^K may be infeasible for constrained problems; then the gap is measured on H
            gap_value = meta["phi_final"] if math.isfinite(meta["phi_final"]) else trace[-1].h_value
            meta["objective_gap"] = abs(gap_value - phi_star)
    return meta


def _aggregate_summary(runs_meta) -> dict:
    summary = {"runs": len(runs_meta)}
    for key in ("iterations", "stopping_error", "grad_calls_per_iter", "relative_error", "objective_gap"):
        vals = [m[key] for m in runs_meta if key in m]
        if vals:
            summary[f"{key}_mean"] = float(np.mean(vals))
            summary[f"{key}_max"] = float(np.max(vals))
    if runs_meta:
        summary["grad_calls_full_participation_per_iter"] = runs_meta[0]["grad_calls_full_participation_per_iter"]
    rel = [m["relative_error"] for m in runs_meta if "relative_error" in m]
    if rel:
        summary["runs_relative_error_le_1e-3"] = int(sum(e <= 1e-3 for e in rel))
    return summary


def _summary_lines(summary):
    for key, value in summary.items():
        yield f"{key}: {value:.6g}" if isinstance(value, float) else f"{key}: {value}"


def _argv_for(cfg: dict):
    for key, value in cfg.items():
        yield f"--{key}"
        yield str(value)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except (ConfigFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except SystemExit as exc:  # argparse reports usage errors itself
        return int(exc.code) if isinstance(exc.code, int) else EXIT_PARSE
    return run_experiment(args)


if __name__ == "__main__":
    sys.exit(main())
