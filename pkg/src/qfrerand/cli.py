"""Command-line client.

Every subcommand builds the same request model the HTTP service accepts and
either executes it in-process (default) or POSTs it to ``--server URL``.
Outputs are JSON reports and CSVs written through the canonical serializers,
so a given seed produces byte-identical files regardless of transport or
worker count.

Exit codes: 0 success, 2 invalid input, 3 numeric failure.  Errors are
printed to stderr as single-line JSON records.
"""

from __future__ import annotations

import argparse
import json
import sys
import urllib.error
import urllib.request
from typing import Optional

from pydantic import ValidationError

from .errors import InputError, NumericError, QFRerandError, SchemaViolation
from .reports import canonical_json, write_csv, write_json
from .service.app import do_assign, do_calibrate, do_diagnose, do_infer, do_simulate
from .service.schemas import (
    AssignRequest,
    CalibrateRequest,
    CovariatesPayload,
    CriterionSpec,
    DiagnoseRequest,
    InferRequest,
    SimulateRequest,
)

_HANDLERS = {
    "/calibrate": do_calibrate,
    "/assign": do_assign,
    "/diagnose": do_diagnose,
    "/infer": do_infer,
    "/simulate": do_simulate,
}

_SIM_FIELDS = ["d", "gamma", "scenario", "method", "sd_ratio", "mc_se", "replications", "seed"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise SchemaViolation(message)


def _read(path: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _read_vector(path: str) -> list[float]:
    values = []
    for lineno, line in enumerate(_read(path).splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            values.append(float(line))
        except ValueError as exc:
            raise InputError(f"{path} line {lineno}: {exc}") from exc
    if not values:
        raise InputError(f"{path} contains no values")
    return values


def _read_matrix(path: str) -> list[list[float]]:
    rows = []
    for lineno, line in enumerate(_read(path).splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError as exc:
            raise InputError(f"{path} line {lineno}: {exc}") from exc
    if not rows:
        raise InputError(f"{path} contains no rows")
    return rows


def _criterion_args(sub: argparse.ArgumentParser, name_flag: str):
    sub.add_argument(name_flag, dest="criterion_name", default=None,
                     help="criterion: mahalanobis|euclidean|squared_euclidean|ridge|"
                          "weighted_euclidean|pca|oracle|custom")
    sub.add_argument("--ridge-lambda", type=float, default=None)
    sub.add_argument("--exponent", type=float, default=None)
    sub.add_argument("--weights-file", default=None, help="one positive weight per line")
    sub.add_argument("--k", type=int, default=None)
    sub.add_argument("--k-rule", choices=["kaiser", "variance_explained", "weighted_eigenvalue"],
                     default=None)
    sub.add_argument("--variance-fraction", type=float, default=None)
    sub.add_argument("--inner", choices=["mahalanobis", "euclidean", "squared_euclidean", "ridge"],
                     default="mahalanobis")
    sub.add_argument("--beta-file", default=None, help="oracle criterion coefficients, one per line")
    sub.add_argument("--matrix-csv", default=None, help="custom PSD matrix, CSV rows")


def _criterion_spec(args) -> CriterionSpec:
    name = args.criterion_name
    if args.matrix_csv is not None:
        if name is not None and name != "custom":
            raise SchemaViolation("--matrix-csv conflicts with the chosen criterion method")
        name = "custom"
    if name is None:
        raise SchemaViolation("a criterion method is required")
    return CriterionSpec(
        method=name,
        ridge_lambda=args.ridge_lambda,
        exponent=args.exponent,
        weights=_read_vector(args.weights_file) if args.weights_file else None,
        k=args.k,
        k_rule=args.k_rule,
        variance_fraction=args.variance_fraction,
        inner=args.inner,
        beta=_read_vector(args.beta_file) if args.beta_file else None,
        matrix=_read_matrix(args.matrix_csv) if args.matrix_csv else None,
    )


def _common_args(sub: argparse.ArgumentParser):
    sub.add_argument("--covariates", required=True, help="CSV: header, unit_id, numeric columns")
    sub.add_argument("--p", type=float, default=0.5)
    sub.add_argument("--alpha", type=float, default=0.01)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--workers", type=int, default=1)
    sub.add_argument("--server", default=None, help="service URL; default runs in-process")
    sub.add_argument("--drop-zero-variance", action="store_true",
                     help="drop constant columns with a warning instead of erroring")


def _covariates(args) -> CovariatesPayload:
    return CovariatesPayload(csv_text=_read(args.covariates),
                             drop_zero_variance=args.drop_zero_variance)


def _execute(path: str, request, server: Optional[str]) -> dict:
    if server is None:
        return _HANDLERS[path](request).model_dump()
    url = server.rstrip("/") + path
    http_req = urllib.request.Request(
        url, data=request.model_dump_json().encode("utf-8"),
        headers={"Content-Type": "application/json"}, method="POST",
    )
    try:
        with urllib.request.urlopen(http_req) as resp:
            return json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as exc:
        body = exc.read().decode("utf-8", errors="replace")
        try:
            err = json.loads(body).get("error", {})
        except json.JSONDecodeError:
            err = {}
        message = err.get("message", body)
        if err.get("exit_code") == 3:
            raise NumericError(message) from exc
        raise InputError(message) from exc
    except urllib.error.URLError as exc:
        raise InputError(f"cannot reach server {server}: {exc}") from exc


def _emit_json(payload: dict, out: Optional[str]):
    if out:
        write_json(payload, out)
    else:
        sys.stdout.write(canonical_json(payload))


def cmd_calibrate(args) -> int:
    request = CalibrateRequest(
        covariates=_covariates(args), p=args.p, criterion=_criterion_spec(args),
        alpha=args.alpha, method=args.method, draws=args.draws,
        seed=args.seed, workers=args.workers,
    )
    _emit_json(_execute("/calibrate", request, args.server), args.out)
    return 0


def cmd_assign(args) -> int:
    request = AssignRequest(
        covariates=_covariates(args), p=args.p, criterion=_criterion_spec(args),
        alpha=args.alpha, calibration=args.calibration, draws=args.draws,
        max_draws=args.max_draws, seed=args.seed, workers=args.workers,
    )
    payload = _execute("/assign", request, args.server)
    rows = [{"unit_id": u, "w": w} for u, w in zip(payload["unit_ids"], payload["w"])]
    write_csv(rows, ["unit_id", "w"], args.out)
    sidecar = {
        "draws_used": payload["draws_used"],
        "q_value": payload["q_value"],
        "a": payload["a"],
        "config": payload["config"],
    }
    write_json(sidecar, _sidecar_path(args.out))
    return 0


def _sidecar_path(csv_path: str) -> str:
    return (csv_path[:-4] if csv_path.endswith(".csv") else csv_path) + ".json"


def cmd_diagnose(args) -> int:
    request = DiagnoseRequest(
        covariates=_covariates(args), p=args.p, criterion=_criterion_spec(args),
        alpha=args.alpha, calibration=args.calibration, draws=args.draws,
        nu_draws=args.nu_draws,
        beta=_read_vector(args.beta) if args.beta else None,
        r_squared=args.r_squared, seed=args.seed, workers=args.workers,
    )
    _emit_json(_execute("/diagnose", request, args.server), args.report)
    return 0


def cmd_infer(args) -> int:
    request = InferRequest(
        covariates=_covariates(args), p=args.p, criterion=_criterion_spec(args),
        alpha=args.alpha, calibration=args.calibration, draws=args.draws,
        assignment_csv=_read(args.assignment), outcomes_csv=_read(args.outcomes),
        method=args.method, level=args.level, m=args.m, mc_draws=args.mc_draws,
        tau0=args.tau0, seed=args.seed, workers=args.workers,
    )
    _emit_json(_execute("/infer", request, args.server), args.out)
    return 0


def cmd_simulate(args) -> int:
    try:
        config = json.loads(_read(args.config))
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"bad simulation config: {exc}") from exc
    if not isinstance(config, dict):
        raise SchemaViolation("simulation config must be a JSON object")
    if args.workers is not None:
        config["workers"] = args.workers
    if args.seed is not None:
        config["seed"] = args.seed
    request = SimulateRequest(**config)
    payload = _execute("/simulate", request, args.server)
    write_csv(payload["rows"], _SIM_FIELDS, args.out)
    write_json({"config": payload["config"]}, _sidecar_path(args.out))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="qfrerand", description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)

    cal = commands.add_parser("calibrate", help="turn alpha into an acceptance cutoff a")
    _common_args(cal)
    _criterion_args(cal, "--criterion")
    cal.add_argument("--method", choices=["mc", "gamma", "exact"], default="mc")
    cal.add_argument("--draws", type=int, default=None)
    cal.add_argument("--out", default=None)
    cal.set_defaults(func=cmd_calibrate)

    asg = commands.add_parser("assign", help="draw one accepted treatment assignment")
    _common_args(asg)
    _criterion_args(asg, "--method")
    asg.add_argument("--calibration", choices=["mc", "gamma", "exact", "auto"], default="auto")
    asg.add_argument("--draws", type=int, default=None)
    asg.add_argument("--max-draws", type=int, default=None)
    asg.add_argument("--out", required=True, help="assignment CSV; JSON sidecar goes next to it")
    asg.set_defaults(func=cmd_assign)

    diag = commands.add_parser("diagnose", help="reduction factors and optimality diagnostics")
    _common_args(diag)
    _criterion_args(diag, "--method")
    diag.add_argument("--calibration", choices=["mc", "gamma", "exact", "auto"], default="auto")
    diag.add_argument("--draws", type=int, default=None)
    diag.add_argument("--nu-draws", type=int, default=None)
    diag.add_argument("--beta", default=None, help="outcome projection, one value per line")
    diag.add_argument("--r-squared", type=float, default=None)
    diag.add_argument("--report", default=None)
    diag.set_defaults(func=cmd_diagnose)

    inf = commands.add_parser("infer", help="post-experiment tests and intervals")
    _common_args(inf)
    _criterion_args(inf, "--criterion")
    inf.add_argument("--calibration", choices=["mc", "gamma", "exact", "auto"], default="auto")
    inf.add_argument("--draws", type=int, default=None)
    inf.add_argument("--assignment", required=True)
    inf.add_argument("--outcomes", required=True)
    inf.add_argument("--method", choices=["randomization", "asymptotic"], default="randomization")
    inf.add_argument("--level", type=float, default=0.95)
    inf.add_argument("--M", dest="m", type=int, default=2000)
    inf.add_argument("--mc-draws", type=int, default=20_000)
    inf.add_argument("--tau0", type=float, default=0.0)
    inf.add_argument("--out", default=None)
    inf.set_defaults(func=cmd_infer)

    sim = commands.add_parser("simulate", help="scenario comparison tables")
    sim.add_argument("--config", required=True, help="JSON simulation config")
    sim.add_argument("--out", required=True, help="results CSV; JSON sidecar goes next to it")
    sim.add_argument("--seed", type=int, default=None, help="override the config seed")
    sim.add_argument("--workers", type=int, default=None)
    sim.add_argument("--server", default=None)
    sim.set_defaults(func=cmd_simulate)

    return parser


def _fail(kind: str, message: str, code: int) -> int:
    record = {"error": {"kind": kind, "message": message, "exit_code": code}}
    sys.stderr.write(json.dumps(record) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        return _fail("SchemaViolation", str(exc).replace("\n", "; "), 2)
    except NumericError as exc:
        return _fail(type(exc).__name__, str(exc), 3)
    except (InputError, QFRerandError) as exc:
        return _fail(type(exc).__name__, str(exc), 2)


if __name__ == "__main__":
    sys.exit(main())
