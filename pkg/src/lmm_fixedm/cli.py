"""Command line front end: ``lmm-fixedm {fit,ci,predict,simulate}``.

Exit codes: 0 success, 1 input error, 2 fit did not converge (or the data
are degenerate).
"""

from __future__ import annotations

import argparse
import csv
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .inference import CLASSICAL, FIXEDM, classical_ci, fixedm_ci
from .kernel import DomainError
from .likelihood import DegenerateFitError, RankError
from .model import DataFormatError, InvalidSpecError, ModelSpec, read_csv, validate
from .optimize import fit
from .prediction import PredictionError, blup
from .simulation import (ScenarioError, StudyError, bundled_scenario_path, load_scenario, run_study,
                         write_raw_csv, write_summary_csv)

EXIT_OK, EXIT_INPUT, EXIT_NOCONV = 0, 1, 2


class InputError(Exception):
    pass


def _g(x) -> str:
    return f"{x:.6g}"


def _index_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise InputError(f"bad index list {text!r}; expected comma-separated integers") from None


@contextmanager
def _output(path):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            yield fh


def _load(args):
    try:
        data = read_csv(args.data)
    except OSError as exc:
        raise InputError(f"cannot read {args.data}: {exc.strerror}") from None
    spec = ModelSpec(_index_list(args.fixed), _index_list(args.random))
    diag = validate(data, spec)
    if diag.spec_errors:
        raise InputError(diag.spec_errors[0])
    if diag.nonfinite:
        cid, row, col = diag.nonfinite[0]
        raise InputError(f"non-finite value in cluster {cid}, row {row + 1}, column {col}")
    if diag.x_rank_deficient:
        raise InputError("stacked X(alpha) is rank deficient")
    return data, spec


def cmd_fit(args) -> int:
    data, spec = _load(args)
    f = fit(data, spec)
    rows = [("m", data.m), ("N", data.N), ("converged", int(f.converged)), ("iterations", f.iterations),
            ("kkt_residual", _g(f.kkt_residual)), ("neg2loglik", _g(f.neg2loglik_min)), ("v2", _g(f.v2_hat))]
    rows += [(f"theta_{k}", _g(t)) for k, t in zip(spec.gamma, f.theta_hat)]
    rows += [(f"sigma2_{k}", _g(s)) for k, s in f.sigma2_hat.items()]
    rows += [(f"beta_{j}", _g(b)) for j, b in zip(spec.alpha, f.beta_hat)]
    rows.append(("active_set", " ".join(str(k) for k in f.active_set)))
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "value"])
        w.writerows(rows)
    if not f.converged:
        print(f"warning: optimizer did not converge (KKT residual {f.kkt_residual:.3g})", file=sys.stderr)
        return EXIT_NOCONV
    return EXIT_OK


def cmd_ci(args) -> int:
    if not 0.0 < args.level < 1.0:
        raise InputError(f"--level must lie in (0, 1), got {args.level}")
    data, spec = _load(args)
    f = fit(data, spec)
    makers = {"classical": [classical_ci], "fixedm": [fixedm_ci], "both": [classical_ci, fixedm_ci]}[args.method]
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "method", "lower", "upper", "level"])
        for k in spec.gamma:
            for make in makers:
                ci = make(f, data.m, k, args.level)
                w.writerow([k, ci.method, _g(ci.lower), _g(ci.upper), _g(ci.level)])
    return EXIT_OK if f.converged else EXIT_NOCONV


def cmd_predict(args) -> int:
    data, spec = _load(args)
    f = fit(data, spec)
    pred = blup(data, spec, f)
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster", "k", "blup", "ls"])
        for c, bh, bl in zip(data.clusters, pred.b_blup, pred.b_ls):
            for k, a, b in zip(spec.gamma, bh, bl):
                w.writerow([c.id, k, _g(a), _g(b) if np.isfinite(b) else ""])
    return EXIT_OK if f.converged else EXIT_NOCONV


def _scenario_path(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    bundled = name if name.endswith(".scn") else name + ".scn"
    try:
        return bundled_scenario_path(bundled)
    except FileNotFoundError:
        raise InputError(f"scenario file not found: {name}") from None


def cmd_simulate(args) -> int:
    scenario = load_scenario(_scenario_path(args.scenario))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = run_study(scenario, threads=args.threads)
    write_summary_csv(scenario, summary, out / "summary.csv")
    write_raw_csv(summary, out / "raw.csv")
    for name in summary.estimands:
        print(f"{name}: mean {_g(summary.mean[name])} sd {_g(summary.sd[name])}")
    for (meth, k), P in summary.coverage.items():
        print(f"coverage {meth} sigma2_{k}: {_g(P)} (se {_g(summary.coverage_se[(meth, k)])})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmm-fixedm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def model_args(p):
        p.add_argument("--data", required=True, help="CSV with header cluster,y,x1..xp,z1..zq")
        p.add_argument("--fixed", default="", help="1-based fixed-effect columns, e.g. 1,2,3")
        p.add_argument("--random", default="", help="1-based random-effect columns")
        p.add_argument("--out", default=None, help="output file (default stdout)")

    p = sub.add_parser("fit", help="ML fit of one candidate model")
    model_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("ci", help="confidence intervals for the random-effect variances")
    model_args(p)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--method", choices=("classical", "fixedm", "both"), default="both")
    p.set_defaults(func=cmd_ci)

    p = sub.add_parser("predict", help="empirical BLUP and LS predictions of the random effects")
    model_args(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="run a simulation study from a scenario file")
    p.add_argument("--scenario", required=True, help="scenario file, or the name of a bundled one (table1_m30)")
    p.add_argument("--out", default=".", help="output directory for summary.csv and raw.csv")
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: $LMM_FIXEDM_THREADS or 1)")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, DataFormatError, InvalidSpecError, DomainError, ScenarioError, RankError,
            PredictionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DegenerateFitError as exc:
        print(f"error: degenerate fit: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    except StudyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOCONV


if __name__ == "__main__":
    sys.exit(main())
