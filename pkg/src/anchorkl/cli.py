"""Config-driven experiment runner.

Subcommands: ``audit-estimators``, ``audit-fdiv``, ``bench``,
``dynamics``, ``train``.  Parameters come from a flat ``key = value``
config file, overridable with ``--key value`` on the command line; every
key has a documented default and unknown keys are rejected.  Each run
writes deterministic CSVs plus a manifest (config echo and library
versions, no timestamps) and, for the sweep/training subcommands,
matplotlib figures next to the CSVs.

Exit codes: 0 all assertions passed, 1 an audit assertion failed,
2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__, audits, bench, dynamics
from . import trainer as trainer_mod
from .estimators import ClipRange, EstimatorVariant
from .rng import stream

USAGE_ERROR = 2
AUDIT_FAILURE = 1


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(" ", "").split(",") if x)


@dataclass(frozen=True)
class Key:
    default: object
    parse: Callable[[str], object]
    help: str


COMMON_KEYS = {
    "seed": Key(0, int, "64-bit experiment seed"),
    "out": Key("out", str, "output directory"),
}

PLOT_KEY = {"plots": Key(True, _parse_bool, "render figures beside the CSVs")}

SCHEMAS: dict[str, dict[str, Key]] = {
    "audit-estimators": {
        **COMMON_KEYS,
        "pairs": Key(100, int, "policy pairs for the estimator claims matrix"),
        "vocab": Key(8, int, "vocabulary size for enumeration audits"),
        "topk_pairs": Key(10, int, "pairs for the top-k audit"),
        "offpolicy_pairs": Key(20, int, "pairs for the off-policy audit"),
        "variance_pairs": Key(100, int, "pairs for the variance-ordering report"),
    },
    "audit-fdiv": {
        **COMMON_KEYS,
        "vocab": Key(8, int, "vocabulary size for enumeration audits"),
        "alpha": Key(3.0, float, "alpha-divergence parameter (not -1, 0, 1)"),
        "fdiv_pairs": Key(3, int, "pairs per generator"),
    },
    "bench": {
        **COMMON_KEYS,
        **PLOT_KEY,
        "vocab": Key(2000, int, "vocabulary size"),
        "target_mass": Key(0.8, float, "top-32 probability mass target"),
        "trials": Key(200, int, "independent synthetic tasks"),
        "k_list": Key((4, 8, 16, 32, 64, 128, 256), _parse_int_list, "top-k head sizes"),
        "b_list": Key(
            (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192),
            _parse_int_list,
            "batch sizes",
        ),
    },
    "dynamics": {
        **COMMON_KEYS,
        **PLOT_KEY,
        "etas": Key((0.0, 0.5, 0.9, 0.95, 0.99), _parse_float_list, "EMA coefficients for the grid"),
        "grid_points": Key(9, int, "log-spaced alpha*beta*lambda points"),
        "grid_min": Key(1e-3, float, "grid lower end"),
        "grid_max": Key(4.0, float, "grid upper end"),
        "instances": Key(50, int, "closed-form agreement instances"),
        "steady_instances": Key(1000, int, "steady-state bound instances"),
        "dim_max": Key(64, int, "max dimension for random instances"),
        "k_max": Key(1000, int, "max step horizon for closed-form checks"),
    },
    "train": {
        **COMMON_KEYS,
        **PLOT_KEY,
        "vocab": Key(16, int, "vocabulary size"),
        "length": Key(8, int, "sequence length"),
        "target": Key(0, int, "target token index for the reward"),
        "group_size": Key(64, int, "rollouts per step"),
        "steps": Key(500, int, "training steps"),
        "lr": Key(0.05, float, "optimizer step size"),
        "beta": Key(0.001, float, "KL coefficient"),
        "eta": Key(0.9, float, "EMA coefficient (1 freezes the anchor)"),
        "t_ema": Key(10, int, "anchor update period"),
        "inner_epochs": Key(1, int, "updates per rollout batch"),
        "estimator": Key("topk_rev", str, "k1|k2|k3|k3pp|k4|k5|topk_rev|topk_fwd"),
        "k": Key(8, int, "top-k head size"),
        "s_min": Key(-1.0, float, "IW clip lower bound (-1 = estimator default)"),
        "s_max": Key(-1.0, float, "IW clip upper bound (-1 = estimator default)"),
        "eps_high": Key(0.28, float, "clip-higher upper epsilon"),
        "eps_low": Key(0.2, float, "clip-higher lower epsilon"),
        "optimizer": Key("adam", str, "adam|sgd"),
        "markov": Key(False, _parse_bool, "first-order-Markov policy table"),
    },
}


def parse_config_file(path: Path) -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = text.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def resolve_config(subcommand: str, raw: dict[str, str]) -> dict[str, object]:
    schema = SCHEMAS[subcommand]
    cfg = {k: spec.default for k, spec in schema.items()}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} for {subcommand}")
        try:
            cfg[key] = schema[key].parse(value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from exc
    return cfg


def _fmt(value: object) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def write_manifest(out: Path, subcommand: str, cfg: dict[str, object]) -> None:
    lines = [f"subcommand = {subcommand}"]
    for key in sorted(cfg):
        lines.append(f"{key} = {_fmt(cfg[key])}")
    lines.append(f"anchorkl_version = {__version__}")
    lines.append(f"numpy_version = {np.__version__}")
    (out / f"{subcommand}_manifest.txt").write_text("\n".join(lines) + "\n")


def _claim_rows_csv(rows: list[audits.ClaimRow]) -> list[Sequence[object]]:
    return [(r.check, r.subject, r.metric, r.max_err, r.tol, r.passed) for r in rows]


CLAIM_HEADER = ("check", "subject", "metric", "max_err", "tol", "passed")


def run_audit_estimators(cfg: dict[str, object], out: Path) -> int:
    seed = int(cfg["seed"])
    rows = audits.table1_audit(seed, n_pairs=int(cfg["pairs"]), v=int(cfg["vocab"]))
    rows += audits.topk_audit(seed, n_pairs=int(cfg["topk_pairs"]), v=int(cfg["vocab"]))
    rows += audits.offpolicy_audit(seed, n_pairs=int(cfg["offpolicy_pairs"]), v=int(cfg["vocab"]))
    rows += audits.sequence_audit(seed)
    rows += audits.variance_report(seed, n_pairs=int(cfg["variance_pairs"]))
    write_csv(out / "audit_estimators.csv", CLAIM_HEADER, _claim_rows_csv(rows))
    return _report_failures(rows)


def run_audit_fdiv(cfg: dict[str, object], out: Path) -> int:
    seed = int(cfg["seed"])
    rows = audits.fdiv_estimator_audit(
        seed, v=int(cfg["vocab"]), n_pairs=int(cfg["fdiv_pairs"]), alpha=float(cfg["alpha"])
    )
    rows += audits.optimal_policy_audit(seed)
    rows += audits.pg_loss_audit(seed)
    write_csv(out / "audit_fdiv.csv", CLAIM_HEADER, _claim_rows_csv(rows))
    return _report_failures(rows)


def _report_failures(rows: list[audits.ClaimRow]) -> int:
    failures = [r for r in rows if not r.passed]
    for r in failures:
        print(f"FAIL {r.check}/{r.subject}/{r.metric}: err={r.max_err!r} tol={r.tol!r}", file=sys.stderr)
    print(f"{len(rows) - len(failures)}/{len(rows)} assertions passed")
    return AUDIT_FAILURE if failures else 0


def run_bench(cfg: dict[str, object], out: Path) -> int:
    spec = bench.SynthTaskSpec(
        vocab=int(cfg["vocab"]),
        target_mass=float(cfg["target_mass"]),
        k_list=tuple(cfg["k_list"]),
        b_list=tuple(cfg["b_list"]),
        trials=int(cfg["trials"]),
        seed=int(cfg["seed"]),
    )
    records = bench.run_sweep(spec)
    write_csv(
        out / "bench_relrmse.csv",
        ("estimator", "K", "B", "m", "V", "trials", "rel_rmse"),
        [(r.estimator, r.k, r.b, r.m, r.vocab, r.trials, r.rel_rmse) for r in records],
    )
    crit_rows = []
    for k in spec.k_list:
        b_star = bench.critical_sample_size(records, k)
        crit_rows.append((k, "" if b_star is None else b_star))
    write_csv(out / "bench_critical_sample_size.csv", ("K", "B_star"), crit_rows)
    if cfg["plots"]:
        from . import plots

        plots.bench_figure(records, out / "bench_relrmse.png")
    return 0


def run_dynamics(cfg: dict[str, object], out: Path) -> int:
    seed = int(cfg["seed"])
    grid_rows: list[dict] = []
    failures = 0
    # Log-spaced behavior grid: classification must match simulation.
    grid = dynamics.log_spaced_grid(int(cfg["grid_points"]), float(cfg["grid_min"]), float(cfg["grid_max"]))
    for eta in cfg["etas"]:
        for abl in grid:
            classified = dynamics.classify_regime(float(eta), float(abl))
            simulated = dynamics.simulated_regime(float(eta), float(abl))
            match = classified is simulated
            failures += 0 if match else 1
            grid_rows.append(
                {
                    "eta": float(eta),
                    "alpha_beta_lambda_max": float(abl),
                    "classified": classified.value,
                    "simulated": simulated.value,
                    "match": match,
                }
            )
    write_csv(
        out / "dynamics_regimes.csv",
        ("eta", "alpha_beta_lambda_max", "classified", "simulated", "match"),
        [
            (r["eta"], r["alpha_beta_lambda_max"], r["classified"], r["simulated"], r["match"])
            for r in grid_rows
        ],
    )
    # Probe points from the stability summary (classification only).
    probe_rows = []
    for eta in dynamics.PROBE_ETAS:
        for abl in dynamics.PROBE_ALPHA_BETA_LAMBDA:
            probe_rows.append((eta, abl, dynamics.classify_regime(eta, abl).value))
    write_csv(out / "dynamics_probe_regimes.csv", ("eta", "alpha_beta_lambda_max", "regime"), probe_rows)

    # Closed form vs iteration, and steady state.
    agree_rows = []
    for trial in range(int(cfg["instances"])):
        rng = stream(seed, trial, "dyn-closed")
        dim, k, err = dynamics.closed_form_agreement(rng, int(cfg["dim_max"]), int(cfg["k_max"]))
        ok = err <= 1e-10
        failures += 0 if ok else 1
        agree_rows.append((trial, dim, k, err, ok))
    write_csv(
        out / "dynamics_closed_form.csv",
        ("instance", "dim", "k", "rel_err", "passed"),
        agree_rows,
    )

    steady_rows = []
    for trial in range(int(cfg["steady_instances"])):
        rng = stream(seed, trial, "dyn-steady")
        dim = int(rng.integers(1, 17))
        fisher = dynamics.FisherSpec.random(dim, rng)
        eta = float(rng.uniform(0.0, 0.99))
        alpha = float(rng.uniform(0.01, 0.2))
        # Keep the spectrum stable: alpha beta lambda_max < 1 + eta.
        beta = float(rng.uniform(0.1, 0.9)) * (1.0 + eta) / (alpha * fisher.lambda_max)
        cfg_d = dynamics.DynamicsConfig(alpha=alpha, beta=beta, eta=eta, g=rng.standard_normal(dim))
        delta_star, kl_star, bound = dynamics.steady_state(cfg_d, fisher)
        f_mat = fisher.matrix
        quad = 0.5 * float(delta_star @ f_mat @ delta_star)
        bound_ok = float(np.linalg.norm(delta_star)) <= bound + 1e-12
        kl_err = abs(quad - kl_star)
        ok = bound_ok and kl_err <= 1e-10
        failures += 0 if ok else 1
        steady_rows.append((trial, dim, kl_err, bound_ok, ok))
    write_csv(
        out / "dynamics_steady_state.csv",
        ("instance", "dim", "kl_consistency_err", "norm_bound_ok", "passed"),
        steady_rows,
    )
    if cfg["plots"]:
        from . import plots

        plots.dynamics_figure(grid_rows, out / "dynamics_regimes.png")
    print(f"dynamics checks: {failures} failures")
    return AUDIT_FAILURE if failures else 0


def _estimator_from_name(name: str) -> EstimatorVariant:
    try:
        return EstimatorVariant(name.lower())
    except ValueError:
        raise ConfigError(f"unknown estimator {name!r}") from None


def run_train(cfg: dict[str, object], out: Path) -> int:
    task = trainer_mod.target_token_task(int(cfg["vocab"]), int(cfg["length"]), int(cfg["target"]))
    clip = None
    if float(cfg["s_min"]) >= 0.0 and float(cfg["s_max"]) >= 0.0:
        clip = ClipRange(float(cfg["s_min"]), float(cfg["s_max"]))
    train_cfg = trainer_mod.TrainConfig(
        group_size=int(cfg["group_size"]),
        lr=float(cfg["lr"]),
        beta=float(cfg["beta"]),
        eta=float(cfg["eta"]),
        t_ema=int(cfg["t_ema"]),
        inner_epochs=int(cfg["inner_epochs"]),
        estimator=_estimator_from_name(str(cfg["estimator"])),
        k=int(cfg["k"]),
        clip=clip,
        eps_high=float(cfg["eps_high"]),
        eps_low=float(cfg["eps_low"]),
        optimizer=str(cfg["optimizer"]),
        steps=int(cfg["steps"]),
        seed=int(cfg["seed"]),
    )
    _, metrics = trainer_mod.train(task, train_cfg, markov=bool(cfg["markov"]))
    write_csv(
        out / "train_metrics.csv",
        ("step", "mean_reward", "kl_value", "lag_norm", "adv_std", "clip_rate"),
        list(
            zip(
                metrics.steps,
                metrics.mean_reward,
                metrics.kl_value,
                metrics.lag_norm,
                metrics.adv_std,
                metrics.clip_rate,
            )
        ),
    )
    if cfg["plots"] and metrics.steps:
        from . import plots

        plots.train_figure(metrics, out / "train_metrics.png")
    return 0


RUNNERS = {
    "audit-estimators": run_audit_estimators,
    "audit-fdiv": run_audit_fdiv,
    "bench": run_bench,
    "dynamics": run_dynamics,
    "train": run_train,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchorkl",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", type=Path, default=None, help="key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override the seed")
        p.add_argument("--out", type=Path, default=None, help="override the output directory")
        keys = ", ".join(f"{k} (default {_fmt(s.default)}: {s.help})" for k, s in schema.items())
        p.epilog = f"config keys: {keys}"
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # Split off --key value overrides that argparse does not know about.
    known = {"--config", "--seed", "--out"}
    passthrough: list[str] = []
    overrides: dict[str, str] = {}
    i = 0
    while i < len(argv):
        arg = argv[i]
        if arg.startswith("--") and arg not in known and not arg.startswith("--help"):
            if i + 1 >= len(argv):
                print(f"override {arg} is missing a value", file=sys.stderr)
                return USAGE_ERROR
            overrides[arg[2:]] = argv[i + 1]
            i += 2
        else:
            passthrough.append(arg)
            i += 1
    parser = build_parser()
    try:
        args = parser.parse_args(passthrough)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0

    try:
        raw = parse_config_file(args.config) if args.config else {}
        raw.update(overrides)
        if args.seed is not None:
            raw["seed"] = str(args.seed)
        cfg = resolve_config(args.subcommand, raw)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR

    out = Path(args.out) if args.out is not None else Path(str(cfg["out"]))
    out.mkdir(parents=True, exist_ok=True)
    cfg["out"] = str(out)
    write_manifest(out, args.subcommand, cfg)
    try:
        return RUNNERS[args.subcommand](cfg, out)
    except Exception as exc:  # surfaced with a diagnostic, not a traceback
        print(f"{args.subcommand} failed: {exc}", file=sys.stderr)
        return AUDIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
