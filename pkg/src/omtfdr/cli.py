"""Command-line interface.

Subcommands: locfdr, calibrate, decide, simulate, fit, analyze.  Every run
writes its outputs plus a JSON run manifest into ``--out-dir``.

Exit codes: 0 success, 2 configuration error, 3 calibration failure,
4 input-data error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import policy as pol
from .estimate import EmConfig, EstimationError, clamp_zscores, composite_locfdr, fit_mixture, storey_pi
from .locfdr import DEFAULT_MAX_BLOCK_SIZE, BlockTooLargeError, locfdr
from .model import (Blocks, Equicorrelated, Independent, MarginalMixture, ModelError, NormalComponent,
                    TwoGroupModel)
from .simulate import ExperimentError, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_CALIBRATION, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("omtfdr")


class ConfigError(Exception):
    pass


class InputDataError(Exception):
    pass


# --------------------------------------------------------------------------
# config and file helpers


def load_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc


def _components(spec, default):
    if spec is None:
        return default
    if isinstance(spec, dict):
        spec = [spec]
    return tuple(NormalComponent(float(c.get("weight", 1.0)), float(c["mean"]), float(c.get("sd", 1.0))) for c in spec)


def model_from_config(cfg: dict, max_block_size: int | None = None) -> TwoGroupModel:
    """Build a :class:`TwoGroupModel` from its JSON description.

    ``{"k": 5000, "pi": 0.3, "alt": {"mean": -1.5, "sd": 1},
    "dependence": {"type": "blocks", "block_size": 5, "rho": 0.5,
    "delta": -1.5, "alt_var": 1.01}}``.  For Gaussian dependence the
    marginal mixture follows from the dependence parameters.
    """
    try:
        k = int(cfg["k"])
        pi = float(cfg["pi"])
        dep = dict(cfg.get("dependence") or {"type": "independent"})
        kind = dep.pop("type", "independent").lower()
        if kind == "independent":
            null = _components(cfg.get("null"), (NormalComponent(1.0, 0.0, 1.0),))
            if cfg.get("alt") is None:
                raise ConfigError("independent model needs 'alt' components")
            model = TwoGroupModel(k, MarginalMixture(pi, null, _components(cfg["alt"], None)), Independent())
        elif kind == "blocks":
            delta = float(dep["delta"])
            null_var = float(dep.get("null_var", 1.0))
            alt_var = float(dep.get("alt_var", 1.0))
            if "block_sizes" in dep:
                sizes = tuple(int(s) for s in dep["block_sizes"])
            else:
                bs = int(dep["block_size"])
                if k % bs:
                    raise ConfigError(f"k={k} is not a multiple of block_size={bs}")
                sizes = (bs,) * (k // bs)
            rho = dep["rho"]
            rho = tuple(float(r) for r in rho) if isinstance(rho, list) else float(rho)
            blocks = Blocks(sizes, rho, delta, null_var=null_var, alt_var=alt_var)
            mix = MarginalMixture.normal(pi, delta, np.sqrt(alt_var), 0.0, np.sqrt(null_var))
            model = TwoGroupModel(k, mix, blocks)
        elif kind == "equicorrelated":
            model = TwoGroupModel.equicorrelated(k, pi, float(dep["rho"]), float(dep.get("sigma2", 1.0)),
                                                 float(dep["delta"]))
        else:
            raise ConfigError(f"unknown dependence type {kind!r}")
    except KeyError as exc:
        raise ConfigError(f"model config is missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc
    if max_block_size is not None and isinstance(model.dependence, Blocks):
        biggest = max(model.dependence.block_sizes)
        if biggest > max_block_size:
            raise BlockTooLargeError(
                f"block exceeds enumeration limit: size {biggest} > max_block_size {max_block_size}")
    return model


def read_vector(path) -> tuple[str, np.ndarray]:
    """One-column CSV with header ``z`` or ``p``."""
    p = Path(path)
    if not p.is_file():
        raise InputDataError(f"input file not found: {p}")
    with open(p, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) != 1 or rows[0][0].strip() not in ("z", "p"):
        raise InputDataError(f"{p}: expected a one-column CSV with header 'z' or 'p'")
    kind = rows[0][0].strip()
    try:
        values = np.array([float(r[0]) for r in rows[1:] if r], dtype=float)
    except (ValueError, IndexError) as exc:
        raise InputDataError(f"{p}: non-numeric entry ({exc})") from exc
    if len(values) == 0:
        raise InputDataError(f"{p}: no values")
    if kind == "z" and not np.all(np.isfinite(values)):
        raise InputDataError(f"{p}: z-scores must be finite")
    if kind == "p" and np.any((values < 0) | (values > 1) | np.isnan(values)):
        raise InputDataError(f"{p}: p-values must lie in [0, 1]")
    return kind, values


def write_columns(path: Path, columns: dict) -> None:
    names = list(columns)
    cols = [np.asarray(columns[n]) for n in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([_fmt(x) for x in row])


def _fmt(x):
    if isinstance(x, (np.integer, int)) or (isinstance(x, np.ndarray) and x.dtype.kind in "iub"):
        return str(int(x))
    if isinstance(x, (str, np.str_)):
        return str(x)
    return repr(float(x))


class RunManifest:
    """One JSON record per invocation."""

    def __init__(self, command: str, config_text: str, seed):
        self.data = {
            "command": command,
            "config_digest": hashlib.sha256(config_text.encode()).hexdigest(),
            "seed": seed,
            "version": __version__,
            "start": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "end": None,
            "warnings": [],
            "outputs": [],
        }

    def warn(self, msg: str) -> None:
        self.data["warnings"].append(msg)

    def output(self, path: Path) -> Path:
        self.data["outputs"].append(path.name)
        return path

    def write(self, out_dir: Path) -> Path:
        self.data["end"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
        path = out_dir / f"{self.data['command']}.manifest.json"
        path.write_text(json.dumps(self.data, indent=2) + "\n")
        return path


def _resolve_seed(seed):
    return int(seed) if seed is not None else int(np.random.SeedSequence().entropy % (2**63))


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


# --------------------------------------------------------------------------
# subcommands


def cmd_locfdr(args, out: Path):
    cfg = load_json(args.config)
    model = model_from_config(cfg.get("model", cfg), args.max_block_size)
    kind, z = read_vector(args.input)
    if kind != "z":
        raise InputDataError("locfdr needs z-scores (header 'z')")
    if len(z) != model.k:
        raise InputDataError(f"input has {len(z)} values but the model has k={model.k}")
    man = RunManifest("locfdr", _dump(cfg), None)
    t = locfdr(model, z, max_block_size=args.max_block_size)
    write_columns(man.output(out / "locfdr.csv"), {"T": t.t})
    return man


def _policy_settings(args, cfg):
    alpha = args.alpha if args.alpha is not None else float(cfg.get("alpha", 0.05))
    criterion = args.criterion or cfg.get("criterion", "fdr")
    n_cal = args.cal_samples if args.cal_samples is not None else int(cfg.get("n_cal", 10_000))
    seed = _resolve_seed(args.seed if args.seed is not None else cfg.get("seed"))
    return alpha, pol.Criterion.parse(criterion), n_cal, seed


def cmd_calibrate(args, out: Path):
    cfg = load_json(args.config)
    model_cfg = cfg.get("model", cfg)
    model = model_from_config(model_cfg, args.max_block_size)
    alpha, criterion, n_cal, seed = _policy_settings(args, cfg)
    man = RunManifest("calibrate", _dump(cfg), seed)
    rng = np.random.default_rng(seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if criterion is pol.Criterion.MFDR:
            policy = pol.mfdr_policy(model, alpha, n_cal=n_cal, rng=rng)
        else:
            policy = pol.calibrate_mu(model, alpha, criterion, n_cal=n_cal, rng=rng)
    policy.diagnostics.seed = seed
    for w in caught:
        man.warn(str(w.message))
    if policy.diagnostics.fallback_grid:
        man.warn("calibration fell back to grid search over mu")
    record = policy.to_dict()
    record["model"] = model_cfg
    (out / "policy.json").write_text(json.dumps(record, indent=2) + "\n")
    man.output(out / "policy.json")
    return man


def cmd_decide(args, out: Path):
    record = load_json(args.policy)
    try:
        policy = pol.CalibratedPolicy.from_dict(record)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid policy record: {exc}") from exc
    if "model" not in record:
        raise ConfigError("policy record has no embedded model")
    model = model_from_config(record["model"], args.max_block_size)
    kind, z = read_vector(args.input)
    if kind != "z":
        raise InputDataError("decide needs z-scores (header 'z')")
    if len(z) != model.k:
        raise InputDataError(f"input has {len(z)} values but the model has k={model.k}")
    man = RunManifest("decide", _dump(record), None)
    t = locfdr(model, z, max_block_size=args.max_block_size)
    d = pol.decide(policy, t)
    write_columns(man.output(out / "decisions.csv"), {"d": d})
    return man


def cmd_simulate(args, out: Path):
    cfg = load_json(args.config)
    model = model_from_config(cfg["model"] if "model" in cfg else cfg, args.max_block_size)
    variants = cfg.get("variants", ["OMT-FDR", "OMT-pFDR", "OMT-mFDR", "oracle-BH"])
    alpha = args.alpha if args.alpha is not None else float(cfg.get("alpha", 0.05))
    n_reps = args.reps if args.reps is not None else int(cfg.get("n_reps", 1000))
    n_cal = args.cal_samples if args.cal_samples is not None else int(cfg.get("n_cal", 10_000))
    seed = _resolve_seed(args.seed if args.seed is not None else cfg.get("seed"))
    man = RunManifest("simulate", _dump(cfg), seed)
    try:
        report = run_experiment(model, variants, alpha, n_reps=n_reps, n_cal=n_cal, seed=seed,
                                workers=args.workers, est_n_cal=int(cfg.get("est_n_cal", 1000)),
                                max_block_size=args.max_block_size)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report.to_csv(man.output(out / "results.csv"))
    (out / "policies.json").write_text(json.dumps(report.policies, indent=2, sort_keys=True) + "\n")
    man.output(out / "policies.json")
    man.data["n_reps"] = n_reps
    man.data["n_cal"] = n_cal
    man.data["wall_time"] = report.wall_time
    return man


def _zscores(args, rng, man):
    kind, v = read_vector(args.input)
    if kind == "z":
        return v
    z, clamped = clamp_zscores(v, rng)
    if clamped.any():
        man.warn(f"{int(clamped.sum())} z-scores clamped (|z| > 6 replaced by draws from N(+-6, 1))")
    return z


def _em_config(args, seed) -> EmConfig:
    prior = None
    if args.prior:
        prior = tuple(float(x) for x in args.prior.split(","))
    try:
        return EmConfig(n_components=args.components, dirichlet_prior=prior,
                        pin_null=not args.free_null, seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_fit(args, out: Path):
    seed = _resolve_seed(args.seed)
    man = RunManifest("fit", _dump(vars_for_digest(args)), seed)
    z = _zscores(args, np.random.default_rng(seed), man)
    try:
        fit = fit_mixture(z, _em_config(args, seed))
    except ValueError as exc:
        raise InputDataError(str(exc)) from exc
    (out / "mixture.json").write_text(json.dumps(fit.to_dict(), indent=2) + "\n")
    man.output(out / "mixture.json")
    return man


def cmd_analyze(args, out: Path):
    seed = _resolve_seed(args.seed)
    man = RunManifest("analyze", _dump(vars_for_digest(args)), seed)
    rng = np.random.default_rng(seed)
    z = _zscores(args, rng, man)
    alpha = args.alpha if args.alpha is not None else 0.05
    n_cal = args.cal_samples if args.cal_samples is not None else 10_000
    try:
        fit = fit_mixture(z, _em_config(args, seed))
    except ValueError as exc:
        raise InputDataError(str(exc)) from exc
    k = len(z)
    t = np.asarray(composite_locfdr(fit, z))
    fitted = TwoGroupModel(k, fit.to_mixture(), Independent())
    criterion = pol.Criterion.parse(args.criterion or "fdr")
    if criterion is pol.Criterion.MFDR:
        omt = pol.mfdr_policy(fitted, alpha)
    else:
        omt = pol.calibrate_mu(fitted, alpha, criterion, n_cal=n_cal, rng=rng)
    omt_name = f"est-OMT-{criterion.label}"
    p = np.clip(fitted.mixture.null_cdf(z), 0.0, 1.0)
    pi0 = 1.0 - storey_pi(p, args.storey_lambda)
    decisions = {
        omt_name: pol.decide_batch(omt, t)[0],
        "est-mFDR": pol.est_mfdr_stepup(t, alpha),
        "adaptive-BH": pol.bh(p, alpha, pi0_adjust=pi0) if pi0 > 0 else np.ones(k, np.int8),
        "BH": pol.bh(p, alpha),
    }
    write_columns(man.output(out / "decisions.csv"),
                  {"index": np.arange(k), "z": z, "locfdr": t, **decisions})
    write_columns(man.output(out / "summary.csv"),
                  {"procedure": np.array(list(decisions)),
                   "rejections": np.array([int(d.sum()) for d in decisions.values()])})
    (out / "mixture.json").write_text(json.dumps(fit.to_dict(), indent=2) + "\n")
    man.output(out / "mixture.json")
    man.data["policy"] = omt.to_dict()
    return man


def vars_for_digest(args) -> dict:
    d = {k: v for k, v in vars(args).items() if k not in ("func", "out_dir", "workers")}
    if getattr(args, "input", None) and Path(args.input).is_file():
        d["input_sha256"] = hashlib.sha256(Path(args.input).read_bytes()).hexdigest()
    return d


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omtfdr", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON model/experiment config")
        p.add_argument("--out-dir", default=".", help="directory for outputs and the run manifest")
        p.add_argument("--max-block-size", type=int, default=DEFAULT_MAX_BLOCK_SIZE)
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("locfdr", help="exact locFDR of a z-vector under a model")
    common(p)
    p.add_argument("--input", required=True, help="one-column CSV with header 'z'")
    p.set_defaults(func=cmd_locfdr)

    p = sub.add_parser("calibrate", help="calibrate an OMT policy by Monte Carlo")
    common(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--criterion", choices=["fdr", "pfdr", "mfdr"])
    p.add_argument("--cal-samples", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("decide", help="apply a calibrated policy to a z-vector")
    common(p, config=False)
    p.add_argument("--policy", required=True, help="policy JSON written by 'calibrate'")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_decide)

    p = sub.add_parser("simulate", help="Monte-Carlo comparison of procedures")
    common(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--reps", type=int)
    p.add_argument("--cal-samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    for name, func, helptext in (("fit", cmd_fit, "fit a normal mixture to z-scores or p-values"),
                                 ("analyze", cmd_analyze, "fit, then apply est-OMT, est-mFDR and BH")):
        p = sub.add_parser(name, help=helptext)
        common(p, config=False)
        p.add_argument("--input", required=True, help="one-column CSV with header 'z' or 'p'")
        p.add_argument("--components", type=int, default=2)
        p.add_argument("--prior", help="comma-separated Dirichlet pseudo-counts, one per component")
        p.add_argument("--free-null", action="store_true", help="fit the null component instead of pinning N(0,1)")
        p.add_argument("--seed", type=int)
        if name == "analyze":
            p.add_argument("--alpha", type=float)
            p.add_argument("--criterion", choices=["fdr", "pfdr", "mfdr"])
            p.add_argument("--cal-samples", type=int)
            p.add_argument("--storey-lambda", type=float, default=0.5)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        man = args.func(args, out)
    except (ConfigError, ModelError, BlockTooLargeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pol.CalibrationError, ExperimentError) as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except (InputDataError, EstimationError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_DATA
    man.write(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
