"""Monte-Carlo experiment harness.

Each procedure variant is calibrated once on its own draws; all variants
are then evaluated on one shared stream of fresh replications.  Every
replication owns a child random stream keyed by its index, so results do
not depend on how replications are split across workers.
"""

from __future__ import annotations

import csv
import io
import logging
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import policy as pol
from .estimate import EmConfig, EstimationError, fit_mixture, storey_pi
from .locfdr import DEFAULT_MAX_BLOCK_SIZE, locfdr_batch, marginal_locfdr
from .model import Independent, TwoGroupModel, child_stream, sample_batch
from .policy import CalibrationError, CalibrationSet, Criterion

__all__ = [
    "ProcedureVariant",
    "SimulationReport",
    "ExperimentError",
    "metrics_from_replications",
    "run_experiment",
    "parse_variants",
    "CSV_COLUMNS",
]

log = logging.getLogger(__name__)

CSV_COLUMNS = ["procedure", "TP", "TP_se", "FDR", "FDR_se", "pFDR", "pFDR_se",
               "mFDR", "mFDR_se", "PrR0", "PrR0_se"]

# stream keys
_CAL, _EVAL, _EST = 0, 1, 2

_LOCFDR_PROCS = ("OMT", "marg", "ind", "est")
_OTHER_PROCS = {"est-mfdr": "est_mfdr", "adaptive-bh": "adaptive_bh", "bh": "bh", "oracle-bh": "oracle_bh"}
_DISPLAY = {"est_mfdr": "est-mFDR", "adaptive_bh": "adaptive-BH", "bh": "BH", "oracle_bh": "oracle-BH"}


class ExperimentError(RuntimeError):
    """Calibration failure tagged with the variant that caused it."""

    def __init__(self, variant: str, cause: Exception):
        super().__init__(f"{variant}: {cause}")
        self.variant = variant
        self.cause = cause


@dataclass(frozen=True)
class ProcedureVariant:
    """A rejection procedure to evaluate.

    ``procedure`` is one of OMT, marg, ind, est, est_mfdr, adaptive_bh, bh,
    oracle_bh.  OMT scores hypotheses by the full locFDR; marg and ind by
    the marginal locFDR, calibrated under the true model and under
    independence respectively; est fits a mixture to each dataset.
    """

    procedure: str
    criterion: Criterion | None = None

    def __post_init__(self):
        if self.procedure in _LOCFDR_PROCS:
            if self.criterion is None:
                raise ValueError(f"{self.procedure} needs a criterion")
            object.__setattr__(self, "criterion", Criterion.parse(self.criterion))
        elif self.procedure not in _OTHER_PROCS.values():
            raise ValueError(f"unknown procedure {self.procedure!r}")

    @property
    def statistic(self) -> str:
        return "full" if self.procedure == "OMT" else "marginal"

    @property
    def calibration_model(self) -> str:
        return "independence" if self.procedure == "ind" else "true"

    @property
    def name(self) -> str:
        if self.procedure in _LOCFDR_PROCS:
            prefix = "est-OMT" if self.procedure == "est" else self.procedure
            return f"{prefix}-{self.criterion.label}"
        return _DISPLAY[self.procedure]

    @classmethod
    def parse(cls, name: str) -> "ProcedureVariant":
        key = name.strip()
        low = key.lower()
        if low in _OTHER_PROCS:
            return cls(_OTHER_PROCS[low])
        m = re.fullmatch(r"(omt|marg|ind|est-omt)-(fdr|pfdr|mfdr)", low)
        if not m:
            raise ValueError(f"unknown procedure variant {name!r}")
        proc = {"omt": "OMT", "marg": "marg", "ind": "ind", "est-omt": "est"}[m.group(1)]
        return cls(proc, m.group(2))


def parse_variants(names: Iterable[str]) -> list[ProcedureVariant]:
    return [ProcedureVariant.parse(n) for n in names]


# --------------------------------------------------------------------------
# metrics


def _se(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else float("nan")


def metrics_from_replications(v, r) -> dict:
    """Error rates and power from per-replication (V, R) counts.

    pFDR is missing (None) when no replication rejects; mFDR is missing
    when the total number of rejections is zero.
    """
    v = np.asarray(v, dtype=float)
    r = np.asarray(r, dtype=float)
    if len(v) == 0 or len(v) != len(r):
        raise ValueError("need a nonempty set of (V, R) records")
    n = len(r)
    fdp = v / np.maximum(r, 1.0)
    pos = r > 0
    n_pos = int(pos.sum())
    out = {
        "TP": float((r - v).mean()), "TP_se": _se(r - v),
        "FDR": float(fdp.sum() / n), "FDR_se": _se(fdp),
        "pFDR": float(fdp.sum() / n_pos) if n_pos else None,
        "pFDR_se": _se(fdp[pos]) if n_pos else None,
        "PrR0": float(1.0 - n_pos / n), "PrR0_se": _se((~pos).astype(float)),
        "n_reps": n, "n_rejecting": n_pos,
    }
    if r.sum() > 0:
        ratio = v.sum() / r.sum()
        resid = v - ratio * r
        out["mFDR"] = float(ratio)
        out["mFDR_se"] = float(np.sqrt(np.var(resid, ddof=1) / n) / r.mean()) if n > 1 else float("nan")
    else:
        out["mFDR"] = out["mFDR_se"] = None
    return out


@dataclass
class SimulationReport:
    rows: dict
    n_reps: int
    seed: int
    alpha: float
    wall_time: float = 0.0
    policies: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict, repr=False)

    def __getitem__(self, name: str) -> dict:
        return self.rows[name]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for name, row in self.rows.items():
            w.writerow([name] + ["" if row[c] is None else f"{row[c]:.10g}" for c in CSV_COLUMNS[1:]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


# --------------------------------------------------------------------------
# calibration of fixed (non-estimated) policies


def _calibration_key(model: TwoGroupModel, v: ProcedureVariant) -> tuple[str, str]:
    if isinstance(model.dependence, Independent):
        return ("full", "true")
    return (v.statistic, v.calibration_model)


def _calibrate_fixed(model, variants, alpha, n_cal, seed, max_block_size) -> dict:
    policies = {}
    sets: dict = {}
    keys = sorted({_calibration_key(model, v) for v in variants if v.procedure in ("OMT", "marg", "ind")})
    for v in variants:
        if v.procedure not in ("OMT", "marg", "ind"):
            continue
        key = _calibration_key(model, v)
        try:
            if v.criterion is Criterion.MFDR and key[0] == "marginal":
                # E sum (T - alpha) 1{T <= t} involves only the marginal law
                policies[v.name] = pol.mfdr_policy(model, alpha, marginal=True)
                continue
            if v.criterion is Criterion.MFDR and isinstance(model.dependence, Independent):
                policies[v.name] = pol.mfdr_policy(model, alpha)
                continue
            if key not in sets:
                cal_model = model.marginal_model() if key[1] == "independence" else model
                marginal = key[0] == "marginal"
                stat = lambda z, m=cal_model, mg=marginal: locfdr_batch(m, z, marginal=mg,
                                                                      max_block_size=max_block_size)
                rng = child_stream(seed, _CAL, keys.index(key))
                sets[key] = CalibrationSet.draw(cal_model, n_cal, rng, stat)
            if v.criterion is Criterion.MFDR:
                policies[v.name] = pol.mfdr_policy(model, alpha, calibration_set=sets[key])
            else:
                policies[v.name] = pol.calibrate_mu(model, alpha, v.criterion, calibration_set=sets[key])
        except CalibrationError as exc:
            raise ExperimentError(v.name, exc) from exc
    return policies


# --------------------------------------------------------------------------
# replication chunks


@dataclass
class _ChunkTask:
    model: TwoGroupModel
    variants: list
    policies: dict
    alpha: float
    seed: int
    reps: tuple[int, int]
    est_n_cal: int
    em_config: EmConfig
    storey_lambda: float
    max_block_size: int


def _pvalues(model: TwoGroupModel, z: np.ndarray) -> np.ndarray:
    # left-tailed test against the null law; the alternatives shift downward
    return np.clip(model.mixture.null_cdf(z), 0.0, 1.0)


def _est_decisions(z_row, variants, alpha, k, rng_seed, est_n_cal, em_config):
    fit = fit_mixture(z_row, em_config)
    out = {}
    if not fit.alt_assignment or fit.pi_hat <= 0:
        for v in variants:
            out[v.name] = np.zeros(k, dtype=np.int8)
        return out, fit
    mix = fit.to_mixture()
    t = np.asarray(marginal_locfdr(mix, z_row))
    fitted = TwoGroupModel(k, mix, Independent())
    cset = None
    for v in variants:
        if v.procedure == "est_mfdr":
            out[v.name] = pol.est_mfdr_stepup(t, alpha)
            continue
        if v.criterion is Criterion.MFDR:
            p = pol.mfdr_policy(fitted, alpha)
        else:
            if cset is None:
                cset = CalibrationSet.draw(fitted, est_n_cal, rng_seed)
            try:
                p = pol.calibrate_mu(fitted, alpha, v.criterion, calibration_set=cset)
            except CalibrationError as exc:
                raise ExperimentError(v.name, exc) from exc
        out[v.name] = pol.decide_batch(p, t)[0]
    return out, fit


def _run_chunk(task: _ChunkTask) -> dict:
    lo, hi = task.reps
    model = task.model
    k = model.k
    n = hi - lo
    h = np.empty((n, k), dtype=np.int8)
    z = np.empty((n, k))
    for i, rep in enumerate(range(lo, hi)):
        hh, zz = sample_batch(model, child_stream(task.seed, _EVAL, rep), 1)
        h[i], z[i] = hh[0], zz[0]
    names = [v.name for v in task.variants]
    v_count = {nm: np.zeros(n, np.int64) for nm in names}
    r_count = {nm: np.zeros(n, np.int64) for nm in names}

    def record(name, d):
        d = np.atleast_2d(d).astype(bool)
        r_count[name][:] = d.sum(axis=1)
        v_count[name][:] = (d & (h == 0)).sum(axis=1)

    stats_cache: dict = {}

    def statistic(kind):
        if kind not in stats_cache:
            if kind == "full":
                stats_cache[kind] = locfdr_batch(model, z, max_block_size=task.max_block_size)
            elif kind == "marginal":
                stats_cache[kind] = locfdr_batch(model, z, marginal=True)
            else:
                stats_cache[kind] = _pvalues(model, z)
        return stats_cache[kind]

    est_variants = [v for v in task.variants if v.procedure in ("est", "est_mfdr")]
    for v in task.variants:
        if v.procedure in ("OMT", "marg", "ind"):
            kind = "full" if isinstance(model.dependence, Independent) else v.statistic
            record(v.name, pol.decide_batch(task.policies[v.name], statistic(kind)))
        elif v.procedure == "bh":
            record(v.name, pol.bh(statistic("p"), task.alpha))
        elif v.procedure == "oracle_bh":
            record(v.name, pol.bh(statistic("p"), task.alpha, pi0_adjust=1.0 - model.pi))
        elif v.procedure == "adaptive_bh":
            p = statistic("p")
            d = np.zeros_like(p, dtype=np.int8)
            for i in range(n):
                pi0 = 1.0 - storey_pi(p[i], task.storey_lambda)
                d[i] = pol.bh(p[i], task.alpha, pi0_adjust=pi0) if pi0 > 0 else 1
            record(v.name, d)
    if est_variants:
        dec = {v.name: np.zeros((n, k), np.int8) for v in est_variants}
        for i, rep in enumerate(range(lo, hi)):
            try:
                out, _ = _est_decisions(z[i], est_variants, task.alpha, k,
                                        child_stream(task.seed, _EST, rep), task.est_n_cal, task.em_config)
            except EstimationError:
                out = {v.name: np.zeros(k, np.int8) for v in est_variants}
            for nm, d in out.items():
                dec[nm][i] = d
        for nm, d in dec.items():
            record(nm, d)
    return {"lo": lo, "V": v_count, "R": r_count}


def run_experiment(model: TwoGroupModel, variants: Sequence, alpha: float = 0.05, n_reps: int = 1000,
                   n_cal: int = 10_000, seed: int = 0, workers: int = 1, chunk_size: int = 50,
                   est_n_cal: int = 1000, em_config: EmConfig | None = None, storey_lambda: float = 0.5,
                   max_block_size: int = DEFAULT_MAX_BLOCK_SIZE) -> SimulationReport:
    """Calibrate every variant, then evaluate all of them on ``n_reps``
    shared replications.

    Parameters
    ----------
    variants
        :class:`ProcedureVariant` objects or names such as ``"OMT-FDR"``,
        ``"marg-pFDR"``, ``"ind-mFDR"``, ``"est-OMT-FDR"``, ``"est-mFDR"``,
        ``"BH"``, ``"oracle-BH"``, ``"adaptive-BH"``.
    est_n_cal
        Calibration draws per replication for the est-OMT variants, which
        recalibrate on every fitted model.
    workers
        Process count; results are identical for any value because each
        replication draws from its own stream.
    """
    t0 = time.perf_counter()
    variants = [v if isinstance(v, ProcedureVariant) else ProcedureVariant.parse(v) for v in variants]
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ValueError("duplicate procedure variants")
    if n_reps < 1:
        raise ValueError("n_reps must be positive")
    policies = _calibrate_fixed(model, variants, alpha, n_cal, seed, max_block_size)
    em_config = em_config or EmConfig(seed=seed)
    tasks = [_ChunkTask(model, variants, policies, alpha, seed, (lo, min(lo + chunk_size, n_reps)),
                        est_n_cal, em_config, storey_lambda, max_block_size)
             for lo in range(0, n_reps, chunk_size)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_run_chunk, tasks))
    else:
        results = [_run_chunk(t) for t in tasks]
    results.sort(key=lambda r: r["lo"])
    V = {nm: np.concatenate([r["V"][nm] for r in results]) for nm in names}
    R = {nm: np.concatenate([r["R"][nm] for r in results]) for nm in names}
    rows = {nm: metrics_from_replications(V[nm], R[nm]) for nm in names}
    return SimulationReport(rows, n_reps, seed, alpha, time.perf_counter() - t0,
                            {nm: p.to_dict() for nm, p in policies.items()},
                            {nm: (V[nm], R[nm]) for nm in names})
