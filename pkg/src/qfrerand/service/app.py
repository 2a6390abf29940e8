"""FastAPI service wrapping the core package.

Each endpoint has a plain handler function (``do_*``) that takes the request
model and returns the response model; the CLI calls these directly when no
server URL is given, so both transports share one code path and one wire
format.
"""

from __future__ import annotations

from math import ceil

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..assign import rerandomize
from ..design import DesignModel
from ..diagnostics import (
    delta_variance,
    frobenius_norm,
    nu_factors_approx,
    nu_factors_mc,
    oracle_gain,
    post_rerand_covariance,
    total_variance_reduction,
)
from ..errors import (
    GroupCountMismatch,
    InputError,
    LengthMismatch,
    NumericError,
    ZeroEta,
)
from ..inference import infer
from ..reports import read_column_csv
from ..rng import STREAM_ASSIGN, STREAM_BATCH, derive_seed, substream
from ..simulate import SimulationConfig, run_comparison
from ..threshold import calibrate
from .schemas import (
    AssignRequest,
    AssignResponse,
    CalibrateRequest,
    CalibrateResponse,
    DiagnoseRequest,
    DiagnoseResponse,
    InferRequest,
    InferResponse,
    SimulateRequest,
    SimulateResponse,
    SimulateRow,
)


def _base_config(command: str, req, design: DesignModel, criterion, dropped: list[str]) -> dict:
    return {
        "command": command,
        "covariates_sha256": req.covariates.digest(),
        "n": design.n,
        "d": design.d,
        "dropped_columns": dropped,
        "p": req.p,
        "criterion": req.criterion.echo(criterion),
        "alpha": req.alpha,
        "seed": req.seed,
    }


def do_calibrate(req: CalibrateRequest) -> CalibrateResponse:
    design, dropped = req.covariates.to_design(req.p)
    criterion = req.criterion.build(design, req.alpha, req.seed)
    thr = calibrate(criterion, req.alpha, method=req.method,
                    draws=req.draws, seed=req.seed, workers=req.workers)
    config = _base_config("calibrate", req, design, criterion, dropped)
    config.update({"method": req.method, "draws": thr.draws})
    return CalibrateResponse(
        a=thr.a, alpha_target=thr.alpha_target, alpha_achieved=thr.alpha_achieved,
        se=thr.se, method=thr.method, config=config,
    )


def do_assign(req: AssignRequest) -> AssignResponse:
    design, dropped = req.covariates.to_design(req.p)
    criterion = req.criterion.build(design, req.alpha, req.seed)
    thr = calibrate(criterion, req.alpha, method=req.calibration,
                    draws=req.draws, seed=req.seed, workers=req.workers)
    rng = substream(req.seed, STREAM_ASSIGN)
    result = rerandomize(design, criterion, thr, rng, max_draws=req.max_draws)
    config = _base_config("assign", req, design, criterion, dropped)
    config.update({"calibration": req.calibration, "draws": thr.draws,
                   "max_draws": req.max_draws})
    return AssignResponse(
        unit_ids=list(design.unit_ids),
        w=[int(v) for v in result.assignment.w],
        draws_used=result.draws_used,
        q_value=result.q_value,
        a=thr.a,
        config=config,
    )


def do_diagnose(req: DiagnoseRequest) -> DiagnoseResponse:
    design, dropped = req.covariates.to_design(req.p)
    criterion = req.criterion.build(design, req.alpha, req.seed)
    thr = calibrate(criterion, req.alpha, method=req.calibration,
                    draws=req.draws, seed=req.seed, workers=req.workers)
    nu_draws = req.nu_draws or max(200_000, ceil(2000.0 / req.alpha))
    nu = nu_factors_mc(criterion, thr, nu_draws,
                       seed=derive_seed(req.seed, STREAM_BATCH, 1), workers=req.workers)

    nu_approx_vals = None
    nu_approx_note = None
    if req.alpha > 0.05:
        nu_approx_note = "approximation skipped: alpha > 0.05"
    else:
        try:
            nu_approx_vals = [float(v) for v in nu_factors_approx(criterion, req.alpha).nu]
        except ZeroEta:
            nu_approx_note = "approximation skipped: criterion spectrum has zero eigenvalues"

    cov = post_rerand_covariance(design, criterion, nu)
    delta = None
    nu_star = None
    percent = None
    if req.beta is not None:
        beta = np.asarray(req.beta, dtype=float)
        if beta.shape != (design.d,):
            raise LengthMismatch(f"beta has {beta.shape[0]} entries for d={design.d}")
        beta_z = design.svd_v.T @ beta
        delta = delta_variance(design, criterion, nu, beta_z)
        gain = oracle_gain(design, beta, req.alpha,
                           r_squared=req.r_squared if req.r_squared is not None else 1.0)
        nu_star = gain.nu_star
        percent = gain.percent_reduction

    config = _base_config("diagnose", req, design, criterion, dropped)
    config.update({
        "calibration": req.calibration, "draws": thr.draws, "nu_draws": nu_draws,
        "beta_given": req.beta is not None, "r_squared": req.r_squared,
    })
    return DiagnoseResponse(
        a=thr.a,
        eta=[float(v) for v in criterion.eta],
        nu_mc=[float(v) for v in nu.nu],
        nu_mc_se=[float(v) for v in nu.se],
        accepted=nu.accepted,
        nu_approx=nu_approx_vals,
        nu_approx_note=nu_approx_note,
        frobenius_complete=frobenius_norm(design.sigma),
        frobenius_rerandomized=frobenius_norm(cov),
        total_variance_reduction=total_variance_reduction(nu),
        delta_variance=delta,
        oracle_nu_star=nu_star,
        oracle_percent_reduction=percent,
        config=config,
    )


def _aligned(design: DesignModel, ids: tuple[str, ...], values: list, what: str) -> np.ndarray:
    by_id = dict(zip(ids, values))
    if len(by_id) != len(ids):
        raise InputError(f"{what} CSV has duplicate unit ids")
    missing = [u for u in design.unit_ids if u not in by_id]
    if missing or len(ids) != design.n:
        raise LengthMismatch(f"{what} CSV does not cover exactly the design's units")
    return np.asarray([by_id[u] for u in design.unit_ids], dtype=float)


def do_infer(req: InferRequest) -> InferResponse:
    design, dropped = req.covariates.to_design(req.p)
    criterion = req.criterion.build(design, req.alpha, req.seed)
    thr = calibrate(criterion, req.alpha, method=req.calibration,
                    draws=req.draws, seed=req.seed, workers=req.workers)
    w_ids, w_vals = read_column_csv(req.assignment_csv, "assignment")
    y_ids, y_vals = read_column_csv(req.outcomes_csv, "outcomes")
    w = _aligned(design, w_ids, w_vals, "assignment")
    y = _aligned(design, y_ids, y_vals, "outcomes")
    if not np.all(np.isin(w, (0.0, 1.0))):
        raise InputError("assignment values must be 0 or 1")
    if int(w.sum()) != design.n1:
        raise GroupCountMismatch(
            f"assignment has {int(w.sum())} treated units, p={req.p} implies {design.n1}"
        )

    result = infer(
        design, criterion, thr, w, y, method=req.method, level=req.level,
        m=req.m, draws=req.mc_draws, tau0=req.tau0, seed=req.seed,
        workers=req.workers,
    )
    config = _base_config("infer", req, design, criterion, dropped)
    config.update({
        "calibration": req.calibration, "draws": thr.draws, "method": req.method,
        "level": req.level, "m": req.m, "mc_draws": req.mc_draws, "tau0": req.tau0,
    })
    return InferResponse(
        tau_hat=result.tau_hat, method=result.method, level=req.level,
        p_value=result.p_value, ci_lo=result.ci[0], ci_hi=result.ci[1],
        conservative=result.conservative, config=config,
    )


def do_simulate(req: SimulateRequest) -> SimulateResponse:
    config = SimulationConfig(
        d=req.d, gamma_conc=req.gamma_conc, n=req.n, p=req.p, tau=req.tau,
        scenario=req.scenario, alpha=req.alpha, replications=req.replications,
        methods=tuple(req.methods), seed=req.seed, calibration=req.calibration,
        calibration_draws=req.calibration_draws,
    )
    rows = run_comparison(config, workers=req.workers)
    out_rows = [
        SimulateRow(
            d=r.d, gamma=r.gamma_conc, scenario=r.scenario, method=r.method,
            sd_ratio=r.sd_ratio, mc_se=r.mc_se, replications=r.replications,
            seed=r.seed,
        )
        for r in rows
    ]
    echo = req.model_dump()
    echo.pop("workers")
    echo["command"] = "simulate"
    return SimulateResponse(rows=out_rows, config=echo)


app = FastAPI(title="qfrerand", version=__version__)


@app.exception_handler(InputError)
async def _input_error(_: Request, exc: InputError):
    return JSONResponse(
        status_code=422,
        content={"error": {"kind": type(exc).__name__, "message": str(exc), "exit_code": 2}},
    )


@app.exception_handler(NumericError)
async def _numeric_error(_: Request, exc: NumericError):
    return JSONResponse(
        status_code=409,
        content={"error": {"kind": type(exc).__name__, "message": str(exc), "exit_code": 3}},
    )


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/calibrate", response_model=CalibrateResponse)
def calibrate_endpoint(req: CalibrateRequest) -> CalibrateResponse:
    return do_calibrate(req)


@app.post("/assign", response_model=AssignResponse)
def assign_endpoint(req: AssignRequest) -> AssignResponse:
    return do_assign(req)


@app.post("/diagnose", response_model=DiagnoseResponse)
def diagnose_endpoint(req: DiagnoseRequest) -> DiagnoseResponse:
    return do_diagnose(req)


@app.post("/infer", response_model=InferResponse)
def infer_endpoint(req: InferRequest) -> InferResponse:
    return do_infer(req)


@app.post("/simulate", response_model=SimulateResponse)
def simulate_endpoint(req: SimulateRequest) -> SimulateResponse:
    return do_simulate(req)
