"""Command-line front end for reproducible end-to-end runs.

Subcommands: simulate, identify, fit, predict, conformal, bench.  Every run
takes a JSON config, a seed, and an output directory; artifacts plus a
manifest recording the exact configuration are written under the output
directory.  Exit codes: 0 success, 1 usage error, 2 data/assumption failure,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import BaselineConfig, baseline_fit, baseline_predict
from .basis import BasisParams
from .conformal import coverage_eval, conformal_interval, plugin_interval, residual_scores, split_quantile
from .data import Dataset, DatasetError, load_dataset, save_dataset
from .identify import AssumptionError, IdentificationError, check_assumptions, identify_all
from .model import NumericalError, beta_posterior, build_design, predict_mc, rmse_by_horizon
from .rng import substream
from .sim import SimConfig, generate_dataset
from .train import ModelState, TrainConfig, TrainingDivergence, fit


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc


def _write_manifest(out: Path, command: str, config: dict, seed: int | None,
                    artifacts: list[str]) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "artifacts": sorted(artifacts),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _parallel_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _load_basis(path: str) -> BasisParams:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if "basis" in obj:
        obj = obj["basis"]
    return BasisParams.from_json(json.dumps(obj))


def _write_predictions_csv(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit_id", "horizon", "mean", "sample_std"])
        for unit_id, horizon, mean, std in rows:
            writer.writerow([unit_id, horizon, repr(float(mean)), repr(float(std))])


def cmd_simulate(args) -> int:
    config = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = SimConfig(seed=args.seed, **config)
    ds, gt = generate_dataset(cfg)
    save_dataset(ds, out / "dataset.jsonl")
    gt_obj = {
        "effects": json.loads(gt.effects.to_json()),
        "basis": json.loads(gt.basis.to_json()),
        "betas": gt.betas.tolist(),
        "mus": gt.mus.tolist(),
        "sigmas": gt.sigmas.tolist(),
        "sigma_noise": gt.sigma_noise,
        "seed": gt.seed,
    }
    with open(out / "ground_truth.json", "w", encoding="utf-8") as fh:
        json.dump(gt_obj, fh, indent=2)
        fh.write("\n")
    report = check_assumptions(ds, cfg.r, 3, gt.basis)
    with open(out / "assumption_report.json", "w", encoding="utf-8") as fh:
        json.dump(report.summary(), fh, indent=2)
        fh.write("\n")
    _write_manifest(out, "simulate", config, args.seed,
                    ["dataset.jsonl", "ground_truth.json", "assumption_report.json"])
    return 0


def cmd_identify(args) -> int:
    config = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(config["dataset"])
    bp = _load_basis(config["basis"])
    r = int(config.get("r", ds.r_hint or 0))
    if r < 1:
        raise UsageError("latent dimension r missing from config and dataset")
    k = config.get("k", 3)
    result = identify_all(ds, bp, r, k, family=config.get("family", "unbounded"))
    with open(out / "assumption_report.json", "w", encoding="utf-8") as fh:
        json.dump(result.report.summary(), fh, indent=2)
        fh.write("\n")
    out_obj = {
        "beta_hat": result.beta_hat.tolist(),
        "psi_lag_hat": {str(d): v.tolist() for d, v in result.psi_lag_hat.items()},
        "effects_hat": json.loads(result.effects_hat.to_json()),
        "diagnostics": result.diagnostics,
    }
    with open(out / "identify_result.json", "w", encoding="utf-8") as fh:
        json.dump(out_obj, fh, indent=2)
        fh.write("\n")
    _write_manifest(out, "identify", config, args.seed,
                    ["identify_result.json", "assumption_report.json"])
    return 0


def cmd_fit(args) -> int:
    config = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(config["dataset"])
    train_kwargs = {k: v for k, v in config.items() if k not in ("dataset", "basis")}
    cfg = TrainConfig(seed=args.seed, **train_kwargs)
    basis = _load_basis(config["basis"]) if "basis" in config else None
    result = fit(ds, cfg, basis=basis)
    with open(out / "model.json", "w", encoding="utf-8") as fh:
        fh.write(result.state.to_json())
        fh.write("\n")
    with open(out / "learning_curve.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_evidence", "holdout_evidence", "selected"])
        for e, (tr, ho) in enumerate(zip(result.train_curve, result.holdout_curve)):
            writer.writerow([e, repr(float(tr)), repr(float(ho)),
                             int(e == result.selected_epoch)])
    _write_manifest(out, "fit", config, args.seed, ["model.json", "learning_curve.csv"])
    return 0


def _predict_unit(unit, state: ModelState, t_cond: int, window_end: int,
                  future_d, samples: int, seed: int):
    rows = build_design(unit, state.basis, state.effects, 1, window_end)
    post = beta_posterior(rows, state.noise, unit_id=unit.unit_id)
    pred = predict_mc(unit, t_cond, state.basis, state.effects, state.noise,
                      post, future_d, samples, seed)
    return pred


def cmd_predict(args) -> int:
    config = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(config["dataset"])
    with open(config["model"], "r", encoding="utf-8") as fh:
        state = ModelState.from_json(fh.read())
    delta = int(config.get("delta", 5))
    t_cond = int(config.get("condition_t", ds.T - delta))
    if not (0 <= t_cond and t_cond + delta <= ds.T):
        raise UsageError(f"condition_t={t_cond} with delta={delta} exceeds T={ds.T}")
    window = config.get("posterior_window", "burn_in")
    if window not in ("burn_in", "full"):
        raise UsageError("posterior_window must be 'burn_in' or 'full'")
    window_end = min(ds.T0, t_cond) if window == "burn_in" else t_cond
    samples = int(config.get("samples", 200))

    def worker(unit):
        future_d = unit.d[t_cond : t_cond + delta]
        return _predict_unit(unit, state, t_cond, window_end, future_d,
                             samples, args.seed)

    preds = _parallel_map(worker, ds.units, args.threads)
    rows = []
    for unit, pred in zip(ds.units, preds):
        for i in range(delta):
            rows.append((unit.unit_id, i + 1, pred.mean[i], pred.sample_std[i]))
    _write_predictions_csv(out / "predictions.csv", rows)
    with open(out / "actuals.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit_id", "horizon", "actual"])
        for unit in ds.units:
            for i in range(delta):
                writer.writerow([unit.unit_id, i + 1, repr(float(unit.x[t_cond + 1 + i]))])
    _write_manifest(out, "predict", config, args.seed,
                    ["predictions.csv", "actuals.csv"])
    return 0


def _read_csv_map(path: str, value_col: str) -> dict[tuple[str, int], float]:
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            table[(row["unit_id"], int(row["horizon"]))] = float(row[value_col])
    return table


def cmd_conformal(args) -> int:
    config = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preds = _read_csv_map(config["predictions"], "mean")
    actuals = _read_csv_map(config["actuals"], "actual")
    horizon = config.get("horizon")
    keys = sorted(
        key for key in preds
        if key in actuals and (horizon is None or key[1] == int(horizon))
    )
    if not keys:
        raise DatasetError("no overlapping (unit, horizon) rows between files")
    alpha = float(config.get("alpha", 0.05))
    cal_fraction = float(config.get("cal_fraction", 0.5))
    perm = substream(args.seed, "conformal-split").permutation(len(keys))
    n_cal = max(1, int(round(cal_fraction * len(keys))))
    cal_keys = [keys[i] for i in np.sort(perm[:n_cal])]
    test_keys = [keys[i] for i in np.sort(perm[n_cal:])]
    if not test_keys:
        raise DatasetError("calibration fraction leaves no test rows")
    scores = residual_scores([preds[k] for k in cal_keys],
                             [actuals[k] for k in cal_keys])
    q_hat = split_quantile(scores, alpha)
    intervals = [conformal_interval(preds[k], q_hat) for k in test_keys]
    coverage = coverage_eval(intervals, [actuals[k] for k in test_keys])
    summary = {
        "alpha": alpha,
        "n_cal": len(cal_keys),
        "n_test": len(test_keys),
        "q_hat": q_hat,
        "coverage": coverage,
    }
    if "sigma" in config:
        plug = [plugin_interval(preds[k], float(config["sigma"]), alpha) for k in test_keys]
        summary["plugin_coverage"] = coverage_eval(plug, [actuals[k] for k in test_keys])
    with open(out / "intervals.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit_id", "horizon", "lower", "upper", "actual", "covered"])
        for key, iv in zip(test_keys, intervals):
            writer.writerow([key[0], key[1], repr(iv.lower), repr(iv.upper),
                             repr(actuals[key]), int(iv.contains(actuals[key]))])
    with open(out / "coverage.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    _write_manifest(out, "conformal", config, args.seed,
                    ["intervals.csv", "coverage.json"])
    return 0


def run_bench(config: dict, seed: int, threads: int = 1) -> dict:
    """Train/test comparison of the structured model vs the recurrent
    baseline on per-unit-unseen interventions; returns per-horizon RMSE."""
    sim_cfg = dict(config.get("sim", {}))
    delta = int(config.get("delta", 5))
    n_train = int(config.get("n_train", 2000))
    n_test = int(config.get("n_test", 500))
    # one generative world per seed: the test units are fresh draws from the
    # same simulator (disjoint unit-id range), not a differently-seeded one
    world_seed = int(substream(seed, "bench-world").integers(0, 2**31))
    train_ds, _ = generate_dataset(
        SimConfig(seed=world_seed, N=n_train, schedule_mode="train", **sim_cfg)
    )
    test_ds, _ = generate_dataset(
        SimConfig(seed=world_seed, N=n_test, unit_offset=n_train,
                  schedule_mode="test_unseen", test_horizon=delta, **sim_cfg)
    )
    t_obs = test_ds.T - delta

    fit_cfg = TrainConfig(seed=seed, **config.get("train", {}))
    fitted = fit(train_ds, fit_cfg)
    base_cfg = BaselineConfig(seed=seed, **config.get("baseline", {}))
    base = baseline_fit(train_ds, base_cfg)

    samples = int(config.get("samples", 200))
    state = fitted.state

    def structured(unit):
        window_end = min(train_ds.T0, t_obs)
        rows = build_design(unit, state.basis, state.effects, 1, window_end)
        post = beta_posterior(rows, state.noise, unit_id=unit.unit_id)
        pred = predict_mc(unit, t_obs, state.basis, state.effects, state.noise,
                          post, unit.d[t_obs : t_obs + delta], samples, seed)
        return pred.mean

    def blackbox(unit):
        hist = type(unit)(unit_id=unit.unit_id, z=unit.z, x=unit.x[: t_obs + 1],
                          d=unit.d[:t_obs])
        return baseline_predict(base.params, hist, unit.d[t_obs : t_obs + delta])

    struct_preds = np.array(_parallel_map(structured, test_ds.units, threads))
    base_preds = np.array(_parallel_map(blackbox, test_ds.units, threads))
    actuals = np.array([u.x[t_obs + 1 : t_obs + 1 + delta] for u in test_ds.units])
    return {
        "horizons": [f"T+{i + 1}" for i in range(delta)],
        "structured": rmse_by_horizon(struct_preds, actuals).tolist(),
        "baseline": rmse_by_horizon(base_preds, actuals).tolist(),
    }


def cmd_bench(args) -> int:
    config = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = run_bench(config, args.seed, args.threads)
    with open(out / "bench.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model"] + table["horizons"])
        writer.writerow(["structured"] + [repr(v) for v in table["structured"]])
        writer.writerow(["baseline"] + [repr(v) for v in table["baseline"]])
    _write_manifest(out, "bench", config, args.seed, ["bench.csv"])
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "identify": cmd_identify,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "conformal": cmd_conformal,
    "bench": cmd_bench,
}


def build_parser() -> _Parser:
    parser = _Parser(prog="seqeffects", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker threads")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, AssumptionError, IdentificationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, TrainingDivergence, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except (TypeError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
