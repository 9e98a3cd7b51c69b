"""Operator entry point.

Verbs:
  run       train one preset/config, write metrics + checkpoints
  ablate    run the 8-row component-flag grid across seeds
  eval      per-budget accuracy table for a saved checkpoint
  variance  standalone estimator-variance report (fits a value net first)
  check     quick gradient/invariant self-tests
  bench     benchmark the kernel backends

Configs are flat key=value text (JSON also accepted); unknown keys are
rejected. The output root comes from --out or the BACR_OUT env var
(default ./runs). Exit codes: 0 ok, 1 config error, 2 divergence,
3 partial grid failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import kernels
from .advantage import fit_value_net
from .environment import make_taskset, save_taskset
from .trainer import (
    DivergenceError,
    IterationMetrics,
    RunSink,
    TrainConfig,
    evaluate_anytime,
    load_checkpoint,
    rng_for,
    run_variance_report,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_PARTIAL = 3

# key spelling in config files differs from the attribute for one field
_KEY_TO_FIELD = {"lambda": "lam"}
_FIELD_TO_KEY = {"lam": "lambda"}

ABLATION_COMBOS = [
    (),
    ("bup",),
    ("bup", "cas"),
    ("bup", "tdr"),
    ("bup", "bcae"),
    ("bup", "cas", "tdr"),
    ("bup", "cas", "bcae"),
    ("bup", "cas", "tdr", "bcae"),
]

PRESETS = ("bacr", "grpo", "brpo")


class ConfigError(ValueError):
    pass


def _parse_value(name: str, text: str, pytype) -> object:
    text = text.strip()
    try:
        if pytype is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if pytype is int:
            return int(text)
        if pytype is float:
            return float(text)
        if pytype is str:
            return text
        if pytype is tuple or str(pytype).startswith("tuple"):
            if not text:
                return ()
            return tuple(int(v.strip()) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"config key '{name}': {exc}") from exc
    raise ConfigError(f"config key '{name}': unsupported type")


def parse_config(path) -> TrainConfig:
    """Flat key=value config (or a JSON object) -> validated TrainConfig."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        try:
            raw = json.load(open(path))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON config: {exc}") from exc
        pairs = {str(k): v for k, v in raw.items()}
    else:
        pairs = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            pairs[key.strip()] = value.strip()
    return config_from_pairs(pairs)


def config_from_pairs(pairs: dict) -> TrainConfig:
    by_name = {f.name: f for f in fields(TrainConfig)}
    kwargs = {}
    for key, value in pairs.items():
        name = _KEY_TO_FIELD.get(key, key)
        if name not in by_name:
            raise ConfigError(f"unknown config key '{key}'")
        f = by_name[name]
        if isinstance(value, str):
            kwargs[name] = _parse_value(key, value, type(f.default))
        elif isinstance(value, list):
            kwargs[name] = tuple(int(v) for v in value)
        else:
            kwargs[name] = type(f.default)(value)
    cfg = TrainConfig(**kwargs)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def serialize_config(cfg: TrainConfig) -> str:
    """key=value echo; parsing it back yields an identical config."""
    lines = []
    for f in fields(TrainConfig):
        key = _FIELD_TO_KEY.get(f.name, f.name)
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            rendered = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, float):
            rendered = repr(value)
        else:
            rendered = str(value)
        lines.append(f"{key}={rendered}")
    return "\n".join(lines) + "\n"


def apply_preset(cfg: TrainConfig, name: str) -> TrainConfig:
    """Overlay a named experiment preset onto a config."""
    if name == "bacr":
        return replace(cfg, bup=True, cas=True, tdr=True, bcae=True,
                       estimator="bcae")
    if name == "grpo":
        return replace(cfg, bup=False, cas=False, tdr=False, bcae=False,
                       estimator="grpo")
    if name == "brpo":
        return replace(cfg, bup=False, cas=False, tdr=False, bcae=False,
                       estimator="brpo")
    if name.startswith("ablation:"):
        spec = name.split(":", 1)[1]
        flags = [f.strip().lower() for f in spec.split("+") if f.strip()]
        if spec.strip().lower() in ("none", ""):
            flags = []
        unknown = [f for f in flags if f not in ("bup", "cas", "tdr", "bcae")]
        if unknown:
            raise ConfigError(f"unknown ablation flags: {unknown}")
        on = {f: (f in flags) for f in ("bup", "cas", "tdr", "bcae")}
        return replace(cfg, estimator="bcae" if on["bcae"] else "brpo", **on)
    raise ConfigError(f"unknown preset '{name}' "
                      f"(use bacr, grpo, brpo, or ablation:<flags>)")


def combo_name(flags: tuple[str, ...]) -> str:
    return "+".join(f.upper() for f in flags) if flags else "none"


# --- CSV output ------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class CsvWriter:
    def __init__(self, path, columns: list[str]):
        self.columns = columns
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(columns)

    def write(self, row) -> None:
        if isinstance(row, dict):
            row = [row[c] for c in self.columns]
        self._writer.writerow([_fmt(v) for v in row])

    def close(self) -> None:
        self._fh.close()


class FileSink(RunSink):
    """Streams training output into the run directory's CSV files."""

    EVAL_COLS = ["epoch", "budget", "accuracy", "accuracy_sampled",
                 "mean_tokens", "mean_tokens_greedy"]
    CURR_COLS = ["epoch", "group", "pass_rate", "mu", "weight", "probe_rate"]
    REWARD_COLS = ["epoch", "iteration", "task_id", "rollout",
                   "truncation_budget", "outcome", "progress", "dense"]

    def __init__(self, out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        self.out_dir = out_dir
        self.metrics = CsvWriter(out_dir / "metrics.csv",
                                 IterationMetrics.columns())
        self.curriculum = CsvWriter(out_dir / "curriculum.csv", self.CURR_COLS)
        self.eval = CsvWriter(out_dir / "eval.csv", self.EVAL_COLS)
        self.rewards = CsvWriter(out_dir / "rewards.csv", self.REWARD_COLS)

    def on_iteration(self, metrics: IterationMetrics) -> None:
        self.metrics.write(metrics.row())

    def on_reward_rows(self, rows) -> None:
        for row in rows:
            self.rewards.write(row)

    def on_curriculum(self, rows) -> None:
        for row in rows:
            self.curriculum.write(row)

    def on_eval(self, rows) -> None:
        for row in rows:
            self.eval.write(row)

    def close(self) -> None:
        for w in (self.metrics, self.curriculum, self.eval, self.rewards):
            w.close()


# --- experiment drivers -----------------------------------------------------------


def run_experiment(cfg: TrainConfig, out_dir: Path, workers: int = 1,
                   quiet: bool = False) -> int:
    """Train one configuration; writes config echo, CSVs, checkpoint, and
    a JSON summary into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(serialize_config(cfg))
    sink = FileSink(out_dir)
    try:
        result = train(cfg, workers=workers, sink=sink)
    except DivergenceError as exc:
        sink.close()
        from .numerics import save_named_arrays
        snap_path = out_dir / "diverged_params.json"
        save_named_arrays(snap_path, sorted(exc.snapshot.items()))
        print(f"diverged: {exc} (snapshot: {snap_path})", file=sys.stderr)
        return EXIT_DIVERGED
    sink.close()

    taskset = make_taskset(cfg.K, cfg.tasks_per_group, cfg.step_requirements,
                           rng_for(cfg.seed, 0))
    save_taskset(out_dir / "taskset.json", taskset)
    save_checkpoint(out_dir / "checkpoint.json", result.policy, result.value)

    variance_rows = []
    if cfg.variance_reps > 0:
        value = result.value
        if value is None:
            value, _ = fit_value_net(result.policy, taskset,
                                     [cfg.b_min, (cfg.b_min + cfg.b_max) // 2,
                                      cfg.b_max],
                                     cfg.lam_effective, cfg.m_effective,
                                     seed=cfg.seed)
        variance_rows = run_variance_report(
            result.policy, value, taskset, cfg,
            [cfg.b_min, (cfg.b_min + cfg.b_max) // 2, cfg.b_max],
            reps=cfg.variance_reps, seed=cfg.seed,
            iteration=len(result.metrics))
        writer = CsvWriter(out_dir / "variance.csv",
                           ["iteration", "budget", "mode", "per_sample_var",
                            "grad_var", "grad_mse"])
        for row in variance_rows:
            writer.write(row)
        writer.close()

    summary = dict(result.summary)
    summary["curriculum_history"] = result.curriculum_rows
    summary["variance_report"] = variance_rows
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)

    if not quiet:
        print(f"run complete: flags={cfg.flag_string()} "
              f"estimator={cfg.estimator} seed={cfg.seed} "
              f"backend={kernels.BACKEND}")
        _print_eval_table(result.summary["final_eval"])
    return EXIT_OK


def _print_eval_table(rows) -> None:
    print(f"{'budget':>8} {'greedy':>8} {'sampled':>9} {'avg tok':>9}")
    for row in rows:
        print(f"{row['budget']:>8} {row['accuracy']:>8.3f} "
              f"{row['accuracy_sampled']:>9.3f} {row['mean_tokens']:>9.2f}")


def run_ablation_grid(base_cfg: TrainConfig, seeds: list[int], out_dir: Path,
                      workers: int = 1) -> int:
    """All 8 component-flag combinations x seeds; emits grid.csv and a
    table of anytime-accuracy deltas against the all-off baseline."""
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict[str, list[float]] = {}
    failed: list[str] = []
    for combo in ABLATION_COMBOS:
        name = combo_name(combo)
        accs = []
        for seed in seeds:
            cfg = apply_preset(base_cfg, "ablation:" + "+".join(combo))
            cfg = replace(cfg, seed=seed)
            cell_dir = out_dir / name.replace("+", "_") / f"seed_{seed}"
            code = run_experiment(cfg, cell_dir, workers=workers, quiet=True)
            if code != EXIT_OK:
                failed.append(f"{name}/seed_{seed}")
                continue
            summary = json.load(open(cell_dir / "summary.json"))
            accs.append(summary["anytime_accuracy_sampled"])
        results[name] = accs

    baseline = float(np.mean(results["none"])) if results.get("none") else float("nan")
    grid = CsvWriter(out_dir / "grid.csv",
                     ["flags", "runs", "mean_acc", "std_acc", "delta"])
    print(f"{'flags':>20} {'mean':>8} {'std':>8} {'delta':>8}")
    for combo in ABLATION_COMBOS:
        name = combo_name(combo)
        accs = results[name]
        if accs:
            mean = float(np.mean(accs))
            std = float(np.std(accs))
            delta = mean - baseline
            print(f"{name:>20} {mean:>8.3f} {std:>8.3f} {delta:>+8.3f}")
        else:
            mean = std = delta = float("nan")
            print(f"{name:>20} {'failed':>8}")
        grid.write([name, len(accs), mean, std, delta])
    grid.close()
    if failed:
        print(f"failed cells: {', '.join(failed)}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------------


def _out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("BACR_OUT", "runs"))


def _load_cfg(args) -> TrainConfig:
    cfg = parse_config(args.config) if args.config else TrainConfig()
    if args.preset:
        cfg = apply_preset(cfg, args.preset)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "iters", None):
        cfg = replace(cfg, iters_per_epoch=args.iters)
    if getattr(args, "epochs", None):
        cfg = replace(cfg, epochs=args.epochs)
    cfg.validate()
    return cfg


def _add_common(sub) -> None:
    sub.add_argument("--config", help="key=value or JSON config file")
    sub.add_argument("--preset", help="bacr | grpo | brpo | ablation:<flags>")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--out", help="output directory root (env BACR_OUT)")
    sub.add_argument("--iters", type=int, default=None,
                     help="override iterations per epoch")
    sub.add_argument("--epochs", type=int, default=None,
                     help="override epoch count")
    sub.add_argument("--workers", type=int, default=1,
                     help="rollout worker threads (results are identical "
                          "for any worker count)")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bacr",
        description="budget-adaptive curriculum training on the synthetic "
                    "verifiable-reasoning environment")
    subs = parser.add_subparsers(dest="verb", required=True)

    p_run = subs.add_parser("run", help="train one experiment")
    _add_common(p_run)
    p_run.add_argument("--name", default=None, help="run directory name")

    p_abl = subs.add_parser("ablate", help="run the component-flag grid")
    _add_common(p_abl)
    p_abl.add_argument("--seeds", default="0,1",
                       help="comma-separated seed list")

    p_eval = subs.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--budgets", default=None,
                        help="comma-separated budget grid")

    p_var = subs.add_parser("variance", help="estimator variance report")
    _add_common(p_var)
    p_var.add_argument("--checkpoint", default=None,
                       help="policy checkpoint (default: fresh init)")
    p_var.add_argument("--budgets", default=None)
    p_var.add_argument("--reps", type=int, default=20)

    p_check = subs.add_parser("check", help="gradient/invariant self-tests")
    p_check.add_argument("--seed", type=int, default=0)

    p_bench = subs.add_parser("bench", help="benchmark kernel backends")
    p_bench.add_argument("--steps", type=int, default=64)
    p_bench.add_argument("--repeats", type=int, default=200)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _dispatch(args) -> int:
    if args.verb == "run":
        cfg = _load_cfg(args)
        name = args.name or f"{args.preset or 'custom'}_seed{cfg.seed}"
        return run_experiment(cfg, _out_root(args) / name, workers=args.workers)

    if args.verb == "ablate":
        cfg = _load_cfg(args)
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        return run_ablation_grid(cfg, seeds, _out_root(args) / "ablation",
                                 workers=args.workers)

    if args.verb == "eval":
        cfg = _load_cfg(args)
        policy, _ = load_checkpoint(args.checkpoint)
        taskset = make_taskset(cfg.K, cfg.tasks_per_group,
                               cfg.step_requirements, rng_for(cfg.seed, 0))
        budgets = (tuple(int(b) for b in args.budgets.split(","))
                   if args.budgets else cfg.eval_budgets)
        rows = evaluate_anytime(policy, taskset, budgets,
                                list(range(cfg.eval_samples)),
                                master_seed=cfg.seed,
                                temperature=cfg.temperature,
                                max_think=cfg.max_think_effective,
                                workers=args.workers)
        _print_eval_table(rows)
        return EXIT_OK

    if args.verb == "variance":
        return _variance_verb(args)

    if args.verb == "check":
        from .selfcheck import run_self_checks
        results = run_self_checks(args.seed)
        ok = True
        for name, passed, detail in results:
            print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
            ok = ok and passed
        return EXIT_OK if ok else EXIT_CONFIG

    if args.verb == "bench":
        from .bench import run_benchmark
        run_benchmark(steps=args.steps, repeats=args.repeats)
        return EXIT_OK

    raise ConfigError(f"unknown verb {args.verb!r}")


def _variance_verb(args) -> int:
    from .policy import policy_init

    cfg = _load_cfg(args)
    taskset = make_taskset(cfg.K, cfg.tasks_per_group, cfg.step_requirements,
                           rng_for(cfg.seed, 0))
    if args.checkpoint:
        policy, _ = load_checkpoint(args.checkpoint)
    else:
        policy = policy_init(taskset.tasks[0].feature_vec.size, cfg.embed_dim,
                             cfg.pos_dim, cfg.b_min, cfg.b_max,
                             rng_for(cfg.seed, 1), use_budget_embedding=True)
    if args.budgets:
        budgets = [int(b) for b in args.budgets.split(",")]
    else:
        budgets = [cfg.b_min, (cfg.b_min + cfg.b_max) // 2, cfg.b_max]
    value, fit_loss = fit_value_net(policy, taskset, budgets,
                                    cfg.lam_effective, cfg.m_effective,
                                    seed=cfg.seed)
    rows = run_variance_report(policy, value, taskset, cfg, budgets,
                               reps=args.reps, seed=cfg.seed)
    out_dir = _out_root(args) / "variance"
    out_dir.mkdir(parents=True, exist_ok=True)
    writer = CsvWriter(out_dir / "variance.csv",
                       ["iteration", "budget", "mode", "per_sample_var",
                        "grad_var", "grad_mse"])
    print(f"value net fit loss: {fit_loss:.5f}")
    print(f"{'budget':>8} {'mode':>6} {'per-sample var':>15} {'grad var':>12} "
          f"{'grad mse':>12}")
    for row in rows:
        writer.write(row)
        print(f"{row['budget']:>8} {row['mode']:>6} "
              f"{row['per_sample_var']:>15.6f} {row['grad_var']:>12.6f} "
              f"{row['grad_mse']:>12.6f}")
    writer.close()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
