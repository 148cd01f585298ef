"""Command-line harness: validate, bench, race, replay.

Every command takes a JSON config (``--config``), optional ``--seed`` /
``--variant`` / ``--out`` overrides, and emits machine-readable results
(schema-versioned CSV plus JSON summaries). Exit codes: 0 success,
1 validation failure, 2 configuration error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import scipy.stats

from . import config as config_mod
from .closed_loop import LOG_SCHEMA, SimLog, run_closed_loop
from .errors import (
    EXIT_CONFIGURATION_ERROR,
    EXIT_NUMERICAL_ERROR,
    EXIT_OK,
    EXIT_VALIDATION_FAILURE,
    ConfigurationError,
    NumericalError,
)
from .residual_models import ExactSodResidual, N_FEATURES
from .validation import run_all_checks

LOG = logging.getLogger("stgpmpc")

BENCH_SCHEMA = "stgp-bench-v1"
BENCH_COLUMNS = ("iteration", "data_count", "update_s", "evaluate_s", "qp_s", "total_s")
BENCH_VARIANTS = ("stgp", "exact_sod", "exact_uncapped", "spatial_ip")


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_ready(payload), indent=2) + "\n")


# ---------------------------------------------------------------------------
# validate


def cmd_validate(args) -> int:
    config_mod.load_config(args.config)
    results = run_all_checks()
    for result in results:
        print(result.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed")
        return EXIT_VALIDATION_FAILURE
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def _bench_learner(config: dict, variant: str):
    if variant == "exact_uncapped":
        gp = config["gp"]
        return ExactSodResidual(
            spatial=config_mod.spatial_kernel(config),
            temporal=config_mod.temporal_kernel(config),
            noise_variance=float(gp["noise_variance"]),
            dt=float(config["control"]["dt"]),
            budget=int(gp["oracle_cap"]),
            uncapped=True,
            oracle_cap=int(gp["oracle_cap"]),
        )
    return config_mod.build_learner(config, variant)


def _synthetic_stream(config: dict, rng: np.random.Generator):
    """Smooth random walk over the operating box plus a drifting target."""
    bounds = np.asarray(config["gp"]["inducing"]["bounds"], dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]
    span = hi - lo
    z = 0.5 * (lo + hi)
    weights = rng.normal(size=(3, N_FEATURES))
    phases = rng.uniform(0, 2 * np.pi, size=3)
    sigma_f = np.sqrt(float(config["gp"]["signal_variance"]))
    noise = np.sqrt(float(config["gp"]["noise_variance"]))
    dt = float(config["control"]["dt"])

    def step(k: int):
        nonlocal z
        z = np.clip(z + 0.05 * span * rng.standard_normal(N_FEATURES), lo, hi)
        t = k * dt
        y = 0.5 * sigma_f * np.sin(weights @ (z / np.maximum(span, 1e-9)) + phases + 0.1 * t)
        y = y + noise * rng.standard_normal(3)
        return z.copy(), y

    return step


def run_bench(config: dict, variant: str, updates: int | None = None) -> tuple[list, dict]:
    if variant not in BENCH_VARIANTS:
        raise ConfigurationError(f"bench variant must be one of {BENCH_VARIANTS}, got {variant!r}")
    bench_cfg = config["bench"]
    n_updates = int(updates if updates is not None else bench_cfg["updates"])
    n_stages = int(bench_cfg["stages"])
    warmup = min(int(bench_cfg["warmup"]), n_updates // 2)
    stride = int(bench_cfg["timing_stride"])
    if variant in ("exact_sod", "exact_uncapped"):
        # The batch refit is cubic; thin the timed evaluations to keep the
        # bench itself tractable while still resolving the growth trend.
        stride = max(stride, n_updates // 40, 1)

    learner = _bench_learner(config, variant)
    rng = np.random.default_rng(int(config["seed"]))
    stream = _synthetic_stream(config, rng)
    horizon_states = np.zeros((n_stages, 9))
    rows = []
    for k in range(n_updates):
        z, y = stream(k)
        timed = (k % stride == 0) or k == n_updates - 1
        t0 = time.perf_counter()
        learner.observe(z[np.newaxis], y)
        t1 = time.perf_counter()
        if timed:
            horizon_states[:, [3, 4, 5, 6, 7]] = z  # evaluate around the newest input
            learner.predict_along(horizon_states, np.zeros((n_stages, 3)))
            t2 = time.perf_counter()
            count = getattr(learner, "count", k + 1)
            rows.append((k, int(count), t1 - t0, t2 - t1, 0.0, t2 - t0))

    timed_rows = [r for r in rows if r[0] >= warmup]
    totals = np.array([r[5] for r in timed_rows])
    counts = np.array([r[1] for r in timed_rows])
    deciles = []
    if len(totals) >= 10:
        chunks = np.array_split(totals, 10)
        deciles = [float(np.mean(c)) for c in chunks]
    slope_stats = None
    if len(totals) >= 3:
        regression = scipy.stats.linregress(counts.astype(float), totals)
        slope_stats = {
            "slope_s_per_point": float(regression.slope),
            "p_value_one_sided_increasing": float(regression.pvalue / 2.0)
            if regression.slope > 0
            else 1.0 - float(regression.pvalue / 2.0),
        }
    summary = {
        "schema": "stgp-bench-summary-v1",
        "variant": variant,
        "updates": n_updates,
        "timed_samples": len(timed_rows),
        "warmup_excluded": warmup,
        "decile_means_s": deciles,
        "first_decile_mean_s": deciles[0] if deciles else None,
        "last_decile_mean_s": deciles[-1] if deciles else None,
        "last_over_first_ratio": (deciles[-1] / deciles[0]) if deciles and deciles[0] > 0 else None,
        "timing_regression": slope_stats,
        "final_data_count": int(counts[-1]) if len(counts) else 0,
    }
    return rows, summary


def _write_bench_csv(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# schema={BENCH_SCHEMA}", ",".join(BENCH_COLUMNS)]
    for row in rows:
        lines.append(
            ",".join(
                [str(int(row[0])), str(int(row[1]))]
                + [format(float(v), ".9e") for v in row[2:]]
            )
        )
    path.write_text("\n".join(lines) + "\n")


def cmd_bench(args) -> int:
    config = config_mod.load_config(args.config, overrides=_overrides(args))
    variant = args.variant or config["variant"]
    if variant == "nominal":
        raise ConfigurationError("bench requires a learning variant, not 'nominal'")
    rows, summary = run_bench(config, variant, updates=args.updates)
    out = Path(args.out or config["out_dir"])
    _write_bench_csv(out / f"bench_{variant}.csv", rows)
    _write_json(out / f"bench_{variant}_summary.json", summary)
    print(json.dumps(_json_ready(summary), indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# race


def cmd_race(args) -> int:
    config = config_mod.load_config(args.config, overrides=_overrides(args))
    variant = args.variant or config["variant"]
    setup = config_mod.build_race_setup(config, variant)
    LOG.info("racing variant=%s duration=%.1fs seed=%d", variant, config["duration"], config["seed"])
    log = run_closed_loop(setup, duration=float(config["duration"]), seed=int(config["seed"]))
    out = Path(args.out or config["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    log.to_csv(out / "race_log.csv")
    summary = log.summary()
    summary["variant"] = variant
    summary["seed"] = int(config["seed"])
    _write_json(out / "race_summary.json", summary)
    print(json.dumps(_json_ready(summary), indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# replay


def run_replay(config: dict, log: SimLog, variant: str) -> dict:
    learner = _bench_learner(config, variant) if variant != "nominal" else config_mod.build_learner(config, "nominal")
    noise_var = float(config["gp"]["noise_variance"])
    states = log.states()
    residuals = log.residuals()
    active = log.column("learning_active").astype(bool)

    errors, stds, observed = [], [], []
    for k in range(len(states)):
        if not active[k]:
            learner.tick()
            continue
        x = states[k]
        pred = learner.predict_along(x[np.newaxis], np.zeros((1, 3)))
        y = residuals[k]
        errors.append(y - pred.mean[0])
        stds.append(np.sqrt(pred.variance[0] + noise_var))
        observed.append(y)
        learner.observe(x[np.newaxis, [3, 4, 5, 6, 7]], y)

    errors = np.array(errors) if errors else np.zeros((0, 3))
    stds = np.array(stds) if stds else np.zeros((0, 3))
    rms = np.sqrt(np.mean(np.square(errors), axis=0)) if len(errors) else np.zeros(3)
    raw_rms = np.sqrt(np.mean(np.square(np.array(observed)), axis=0)) if observed else np.zeros(3)
    coverage = float(np.mean(np.abs(errors) <= 2.0 * stds)) if len(errors) else float("nan")
    return {
        "schema": "stgp-replay-report-v1",
        "variant": variant,
        "scored_steps": int(len(errors)),
        "one_step_rms": {k: float(v) for k, v in zip(("v_x", "v_y", "omega"), rms)},
        "raw_residual_rms": {k: float(v) for k, v in zip(("v_x", "v_y", "omega"), raw_rms)},
        "two_sigma_coverage": coverage,
    }


def cmd_replay(args) -> int:
    config = config_mod.load_config(args.config, overrides=_overrides(args))
    variant = args.variant or config["variant"]
    log = SimLog.from_csv(args.log, dt=float(config["control"]["dt"]))
    report = run_replay(config, log, variant)
    out = Path(args.out or config["out_dir"])
    _write_json(out / f"replay_{variant}.json", report)
    print(json.dumps(_json_ready(report), indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _overrides(args) -> dict:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "variant", None) is not None and args.variant in config_mod.VARIANTS:
        overrides["variant"] = args.variant
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = args.out
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stgpmpc",
        description="Spatio-temporal GP learning and GP-MPC racing simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="JSON config file (optional)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--variant", type=str, default=None, help="controller/model variant")

    p_validate = sub.add_parser("validate", help="run the numerical self-checks")
    common(p_validate)
    p_validate.set_defaults(func=cmd_validate)

    p_bench = sub.add_parser("bench", help="time online updates and evaluations")
    common(p_bench)
    p_bench.add_argument("--updates", type=int, default=None, help="override bench.updates")
    p_bench.set_defaults(func=cmd_bench)

    p_race = sub.add_parser("race", help="run the closed-loop racing simulation")
    common(p_race)
    p_race.set_defaults(func=cmd_race)

    p_replay = sub.add_parser("replay", help="re-score a recorded log against a model")
    common(p_replay)
    p_replay.add_argument("--log", type=str, required=True, help="race_log.csv to replay")
    p_replay.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("STGP_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIGURATION_ERROR
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
