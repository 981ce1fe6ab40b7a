"""Monte-Carlo sweeps over a grid of privacy targets."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator, TextIO

import numpy as np

from ..accountant import NoiseCalibration, PrivacyBudget, audit_calibration, calibrate
from ..errors import InfeasibleError, OutOfRangeError
from ..freq_est import rhr_calibration, rhr_run_indices
from ..mean_est import CsgmConfig, csgm_preselect_run, csgm_run, l2_mean_pipeline, l2_rounding_level, preselect_calibration
from ..rng import Seeds
from ..shuffle import ShufflePlan, local_plan, plan_budget, plan_shuffled_sqkr, shuffled_sqkr_run
from ..transforms import KashinFrame
from .config import ExperimentConfig
from .data import gen_synthetic_freq, gen_synthetic_mean

COLUMNS = (
    "protocol", "n", "d", "b", "gamma", "eps_target", "delta",
    "eps_accounted_closed", "eps_accounted_rdp", "mse_mean", "mse_stderr", "l1_mean",
    "bits_total", "bits_per_client", "trials", "seed", "infeasible",
)


@dataclass(frozen=True)
class TrialResult:
    """Aggregate of all trials at one grid point (one output row)."""

    protocol: str
    n: int
    d: int
    b: float | None
    gamma: float | None
    eps_target: float
    delta: float
    eps_accounted_closed: float
    eps_accounted_rdp: float
    mse_mean: float
    mse_stderr: float
    l1_mean: float
    bits_total: int
    bits_per_client: float
    trials: int
    seed: int
    infeasible: bool

    def row(self) -> dict:
        return {k: getattr(self, k) for k in COLUMNS}


@dataclass(frozen=True)
class _Point:
    """Everything fixed at one grid point; ``trial(seeds)`` returns (sq_err, l1_err, bits)."""

    trial: Callable[[Seeds], tuple[float, float, int]]
    gamma: float | None
    accounted: tuple[float, float]


def account_run(config: ExperimentConfig, calibration: NoiseCalibration | ShufflePlan) -> tuple[float, float]:
    """``(closed_form_eps, rdp_eps)`` for the noise or plan a grid point runs with."""
    if isinstance(calibration, ShufflePlan):
        return plan_budget(calibration, config.n)
    return audit_calibration(calibration)


def _errors(estimate: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    diff = estimate - truth
    return float(diff @ diff), float(np.abs(diff).sum())


def _mean_point(config: ExperimentConfig, budget: PrivacyBudget, data: np.ndarray) -> _Point:
    n, d, p = config.n, config.d, config.protocol
    truth = data.mean(axis=0)
    c = 1 / math.sqrt(d)
    acc = config.accounting
    if p in ("csgm", "gaussian-baseline"):
        gamma = 1.0 if p == "gaussian-baseline" else (config.gamma if config.gamma is not None else min(1.0, config.b / d))
        cal = calibrate(budget, gamma, d, c, acc, n=n)

        def trial(seeds: Seeds):
            cfg = CsgmConfig(n, d, gamma, budget, c, shared_seed=seeds.sampling, accounting=acc)
            out = csgm_run(data, cfg, np.random.Generator(np.random.PCG64(seeds.noise)), cal)
            return (*_errors(out.estimate, truth), out.stats.bits_total)

        return _Point(trial, gamma, account_run(config, cal))
    if p == "csgm-preselect":
        cal = preselect_calibration(n, d, config.b, budget, c, acc)

        def trial(seeds: Seeds):
            out = csgm_preselect_run(data, d, config.b, budget, seeds, c, dprime=cal.coords, accounting=acc, calibration=cal)
            return (*_errors(out.estimate, truth), out.stats.bits_total)

        return _Point(trial, cal.gamma, account_run(config, cal))
    if p == "l2-pipeline":
        frame = KashinFrame.for_dimension(d, config.sign_seed, config.kashin_level)
        C = config.norm_bound
        cal = preselect_calibration(n, frame.D, config.b, budget, l2_rounding_level(frame, C), acc)

        def trial(seeds: Seeds):
            out = l2_mean_pipeline(data, C, config.b, budget, frame, seeds, dprime=cal.coords, accounting=acc, calibration=cal)
            return (*_errors(out.estimate, truth), out.stats.bits_total)

        return _Point(trial, cal.gamma, account_run(config, cal))
    # shuffle protocols
    frame = KashinFrame.for_dimension(d, config.sign_seed, config.kashin_level)
    b = int(config.b)
    if p == "shuffled-sqkr":
        plan = plan_shuffled_sqkr(budget, b, frame.D, n, b0=config.b0, accounting=acc)
    else:
        plan = local_plan(budget.eps, b, frame.D, config.b0)

    def trial(seeds: Seeds):
        out = shuffled_sqkr_run(data, config.norm_bound, plan, frame, seeds)
        return (*_errors(out.estimate, truth), out.stats.bits_total)

    return _Point(trial, None, account_run(config, plan))


def _freq_point(config: ExperimentConfig, budget: PrivacyBudget, data) -> _Point:
    b = int(config.b)
    cal = rhr_calibration(budget, data.n, data.padded_d, b, config.accounting)
    truth = data.frequencies

    def trial(seeds: Seeds):
        out = rhr_run_indices(data.indices, data.padded_d, b, seeds, cal.sigma2_sum, cal)
        return (*_errors(out.estimate[: data.d], truth), out.stats.bits_total)

    return _Point(trial, cal.gamma, account_run(config, cal))


def _dataset(config: ExperimentConfig):
    if config.protocol == "rhr":
        return gen_synthetic_freq(config.n, config.d, config.distribution, config.data_seed, config.zipf_s)
    return gen_synthetic_mean(config.n, config.d, config.data_seed)


def _infeasible_row(config: ExperimentConfig, eps: float) -> TrialResult:
    nan = math.nan
    return TrialResult(
        config.protocol, config.n, config.d, config.b, config.gamma, eps, config.delta,
        nan, nan, nan, nan, nan, 0, nan, config.trials, config.protocol_seed, True,
    )


def run_point(config: ExperimentConfig, eps: float, data=None) -> TrialResult:
    """All trials at one grid value of eps."""
    data = _dataset(config) if data is None else data
    budget = PrivacyBudget(eps, config.delta)
    try:
        point = _freq_point(config, budget, data) if config.protocol == "rhr" else _mean_point(config, budget, data)
    except (InfeasibleError, OutOfRangeError):
        return _infeasible_row(config, eps)

    def one(k: int):
        return point.trial(Seeds.derive(config.protocol_seed, k))

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(one, range(config.trials)))
    else:
        results = [one(k) for k in range(config.trials)]
    sq = np.array([r[0] for r in results])
    l1 = np.array([r[1] for r in results])
    bits = sum(r[2] for r in results)
    stderr = float(sq.std(ddof=1) / math.sqrt(sq.size)) if sq.size > 1 else math.nan
    closed, rdp = point.accounted
    return TrialResult(
        config.protocol, config.n, config.d, config.b, point.gamma, eps, config.delta,
        closed, rdp, float(sq.mean()), stderr, float(l1.mean()),
        int(bits), bits / (config.n * config.trials), config.trials, config.protocol_seed, False,
    )


def run_sweep(config: ExperimentConfig) -> Iterator[TrialResult]:
    """One TrialResult per grid value, yielded as soon as it is computed.

    Trial ``k`` uses seeds derived from ``(protocol_seed, k)`` at every grid
    point, so results do not depend on scheduling or worker count.
    """
    data = _dataset(config)
    for eps in config.eps_grid:
        yield run_point(config, eps, data)


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def _json_value(value):
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, float):
        return float(format(value, ".12g")) if math.isfinite(value) else None
    return value


class RowWriter:
    """Single-writer sink; CSV rows are flushed as they arrive."""

    def __init__(self, fh: TextIO, fmt: str = "csv"):
        if fmt not in ("csv", "json"):
            raise ValueError(f"unknown output format {fmt!r}")
        self.fh = fh
        self.fmt = fmt
        self._rows: list[dict] = []
        if fmt == "csv":
            self._csv = csv.writer(fh, lineterminator="\n")
            self._csv.writerow(COLUMNS)

    def write(self, result: TrialResult) -> None:
        row = result.row()
        if self.fmt == "csv":
            self._csv.writerow([_fmt(row[k]) for k in COLUMNS])
            self.fh.flush()
        else:
            self._rows.append({k: _json_value(row[k]) for k in COLUMNS})

    def close(self) -> None:
        if self.fmt == "json":
            json.dump(self._rows, self.fh, indent=1)
            self.fh.write("\n")
        self.fh.flush()
