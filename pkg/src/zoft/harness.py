"""Experiment runner backing the CLI: comparison protocol, sweeps, ablations,
bound campaigns, and CSV emission.

All commands are deterministic under a fixed config: independent runs may be
farmed out to a thread pool, but result rows are merged in a fixed sort order
before writing, and wall-time columns default to 0 so reruns are byte-identical
(pass timing=True to record real times at the cost of that guarantee).
"""

from __future__ import annotations

import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bounds as bounds_mod
from . import meta_trainer, pertnn as pertnn_mod
from .config import ExperimentConfig, build_task_source
from .errors import ConfigError, DivergenceError
from .paramspace import NoiseSeed
from .testbeds import make_rank_family
from .zo_optimizer import ZOConfig, run_finetune

RUN_ROW_HEADER = "experiment,method,task,seed,lr,step,loss,wall_ms,scale_min,scale_med,scale_max"


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def _write_lines(path: Path, lines) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def _map_jobs(fn, jobs, threads: int):
    """Order-preserving map over independent jobs."""
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, jobs))
    return [fn(job) for job in jobs]


# ---------------------------------------------------------------------------
# Shared run machinery


@dataclass
class RunResult:
    method: str
    task: str
    seed: int
    lr: float
    records: list  # empty when diverged
    diverged: bool
    wall_ms: float

    @property
    def initial_loss(self) -> float:
        return self.records[0].loss if self.records else float("nan")

    def final_window_mean(self, window: float = 0.1) -> float:
        if self.diverged or not self.records:
            return float("inf")
        k = max(1, int(round(window * len(self.records))))
        return float(np.mean([r.loss for r in self.records[-k:]]))

    def steps_to_threshold(self, ratio: float = 0.5):
        if not self.records:
            return None
        target = ratio * self.records[0].loss
        for rec in self.records:
            if rec.loss <= target:
                return rec.t
        return None


def _execute_run(model, method, lr, steps, epsilon, batch_size, seed, pertnn,
                 normalize=True, timing=False) -> RunResult:
    config = ZOConfig(
        learning_rate=lr, steps=steps, epsilon=epsilon, batch_size=batch_size,
        mode=method, seed=seed, normalize=normalize,
    )
    start = time.perf_counter()
    diverged = False
    try:
        records = run_finetune(model, config, pertnn if method == "finetuner" else None)
    except DivergenceError:
        records, diverged = [], True
    wall = (time.perf_counter() - start) * 1e3 if timing else 0.0
    return RunResult(method, model.name, seed, lr, records, diverged, wall)


def _run_rows(experiment: str, result: RunResult) -> list[str]:
    rows = []
    per_step_ms = result.wall_ms / max(1, len(result.records))
    for rec in result.records:
        smin, smed, smax = (np.min(rec.scales), np.median(rec.scales), np.max(rec.scales))
        rows.append(",".join([
            experiment, result.method, result.task, str(result.seed),
            _fmt(result.lr), str(rec.t), _fmt(rec.loss), _fmt(per_step_ms),
            _fmt(smin), _fmt(smed), _fmt(smax),
        ]))
    return rows


def _sorted_rows(rows: list[str]) -> list[str]:
    def key(row: str):
        exp, method, task, seed, lr, step, *_ = row.split(",")
        return (exp, method, task, int(seed), float(lr), int(step))
    return sorted(rows, key=key)


def _meta_train(cfg: ExperimentConfig, family, seed: int, normalize=True,
                reset=True):
    """Train a finetuner per [train]; returns (pertnn, MetaLog, tasks)."""
    cfg.require_section("train")
    n_tasks = cfg.get_int("train", "tasks", 1)
    steps = cfg.get_int("train", "steps")
    reset_period = cfg.get_int("train", "reset_period", 50)
    meta_cfg = meta_trainer.MetaConfig(
        eta1=cfg.get_float("train", "eta1"),
        eta2=cfg.get_float("train", "eta2"),
        steps=steps,
        epsilon=cfg.get_float("train", "epsilon", 1e-3),
        reset_period=reset_period if reset else steps + 1,
        batch_size=cfg.get_int("train", "batch_size", 16),
        seed=seed,
        normalize=normalize,
    )
    tasks = family.make_tasks(n_tasks)
    hidden = cfg.get_int("train", "hidden", 64)
    init_params = pertnn_mod.init(tasks[0].partition, hidden, NoiseSeed(seed))
    trained, log = meta_trainer.train(meta_cfg, tasks, init_params)
    return trained, log, tasks


def _load_checkpoint_if_needed(cfg: ExperimentConfig, section, methods, out_dir: Path):
    if not any(m == "finetuner" for m in methods):
        return None
    name = cfg.get_str(section, "checkpoint", "finetuner.ckpt")
    path = Path(name)
    if not path.is_absolute():
        path = out_dir / name
    return pertnn_mod.load(path)


# ---------------------------------------------------------------------------
# Commands


def cmd_train_finetuner(cfg: ExperimentConfig, out_dir: Path, threads: int = 1,
                        timing: bool = False) -> int:
    kind, source = build_task_source(cfg)
    if kind != "quadratic":
        raise ConfigError("train-finetuner currently expects a quadratic task family")
    seed = cfg.get_int("train", "seed", 0)
    trained, log, _tasks = _meta_train(
        cfg, source, seed, normalize=cfg.get_bool("train", "normalize", True)
    )
    ckpt = out_dir / cfg.get_str("train", "checkpoint", "finetuner.ckpt")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    pertnn_mod.save(trained, ckpt)
    lines = ["step,task,l_zo,loss,reset"]
    for rec in log.records:
        lines.append(
            f"{rec.t},{rec.task},{_fmt(rec.l_zo)},{_fmt(rec.loss)},{int(rec.reset)}"
        )
    _write_lines(out_dir / "meta_log.csv", lines)
    return 0


def cmd_finetune(cfg: ExperimentConfig, out_dir: Path, threads: int = 1,
                 timing: bool = False) -> int:
    kind, source = build_task_source(cfg)
    cfg.require_section("finetune")
    method = cfg.get_str("finetune", "mode", "mezo")
    if method not in ("mezo", "finetuner"):
        raise ConfigError(f"[finetune] mode={method!r} must be mezo or finetuner")
    seeds = cfg.get_int_list("finetune", "seeds")
    if not seeds:
        raise ConfigError("[finetune] seeds must be non-empty")
    lr = cfg.get_float("finetune", "lr")
    steps = cfg.get_int("finetune", "steps")
    epsilon = cfg.get_float("finetune", "epsilon", 1e-3)
    batch_size = cfg.get_int("finetune", "batch_size", 16)
    params = _load_checkpoint_if_needed(cfg, "finetune", [method], out_dir)
    if kind == "quadratic":
        model = source.make_task(cfg.get_int("finetune", "task_index", 0))
    else:
        model = source(cfg.get_str("finetune", "granularity", "block"))

    def job(seed):
        return _execute_run(model, method, lr, steps, epsilon, batch_size, seed,
                            params, timing=timing)

    results = _map_jobs(job, seeds, threads)
    experiment = cfg.get_str("finetune", "experiment", "finetune")
    rows = []
    for result in results:
        if result.diverged:
            raise DivergenceError(
                f"{method} diverged on {model.name} seed {result.seed}"
            )
        rows.extend(_run_rows(experiment, result))
    _write_lines(out_dir / "trajectory.csv", [RUN_ROW_HEADER] + _sorted_rows(rows))
    return 0


def cmd_compare(cfg: ExperimentConfig, out_dir: Path, threads: int = 1,
                timing: bool = False) -> int:
    kind, source = build_task_source(cfg)
    if kind != "quadratic":
        raise ConfigError("compare expects a quadratic task family")
    cfg.require_section("compare")
    methods = cfg.get_str_list("compare", "methods", ["mezo", "finetuner"])
    seeds = cfg.get_int_list("compare", "seeds")
    if not seeds:
        raise ConfigError("[compare] seeds must be non-empty")
    lr_grid = cfg.get_float_list("compare", "lr_grid")
    steps = cfg.get_int("compare", "steps")
    epsilon = cfg.get_float("compare", "epsilon", 1e-3)
    batch_size = cfg.get_int("compare", "batch_size", 16)
    n_tasks = cfg.get_int("compare", "tasks", 1)
    task_start = cfg.get_int("compare", "task_start", 0)
    threshold = cfg.get_float("compare", "threshold", 0.5)
    window = cfg.get_float("compare", "final_window", 0.1)
    params = _load_checkpoint_if_needed(cfg, "compare", methods, out_dir)
    tasks = source.make_tasks(n_tasks, start=task_start)

    jobs = [(model, method, lr, seed)
            for model in tasks for method in methods
            for seed in seeds for lr in lr_grid]

    def job(args):
        model, method, lr, seed = args
        return _execute_run(model, method, lr, steps, epsilon, batch_size, seed,
                            params, timing=timing)

    results = _map_jobs(job, jobs, threads)
    by_cell: dict = {}
    for result in results:
        by_cell.setdefault((result.method, result.task, result.seed), []).append(result)

    lines = ["method,task,seed,best_lr,final_mean,steps_to_threshold"]
    best: dict = {}
    for (method, task, seed), runs in sorted(by_cell.items()):
        chosen = min(runs, key=lambda r: (r.final_window_mean(window), r.lr))
        stt = chosen.steps_to_threshold(threshold)
        best[(method, task, seed)] = (chosen, stt)
        lines.append(",".join([
            method, task, str(seed), _fmt(chosen.lr),
            _fmt(chosen.final_window_mean(window)),
            str(stt) if stt is not None else "",
        ]))
    _write_lines(out_dir / "compare.csv", lines)

    summary = _compare_summary(methods, tasks, seeds, best, steps)
    _write_lines(out_dir / "summary.txt", summary)
    return 0


def _compare_summary(methods, tasks, seeds, best, steps):
    """Aligned text table: per-method medians plus pairwise win tally."""
    col = max(len(m) for m in methods) + 2
    lines = [f"{'method':<{col}}{'median_final':>14}{'median_steps':>14}"]
    med_steps = {}
    for method in methods:
        finals, step_counts = [], []
        for task in tasks:
            for seed in seeds:
                chosen, stt = best[(method, task.name, seed)]
                finals.append(chosen.final_window_mean())
                step_counts.append(stt if stt is not None else steps + 1)
        med_steps[method] = statistics.median(step_counts)
        lines.append(
            f"{method:<{col}}{statistics.median(finals):>14.6g}"
            f"{med_steps[method]:>14.6g}"
        )
    if len(methods) == 2:
        a, b = methods
        wins = ties = 0
        total = 0
        for task in tasks:
            for seed in seeds:
                sa = best[(a, task.name, seed)][1]
                sb = best[(b, task.name, seed)][1]
                sa = sa if sa is not None else steps + 1
                sb = sb if sb is not None else steps + 1
                total += 1
                if sa < sb:
                    wins += 1
                elif sa == sb:
                    ties += 1
        lines.append("")
        lines.append(
            f"{a} beats {b} on steps-to-threshold in {wins}/{total} "
            f"task-seed pairs ({ties} ties)"
        )
        lines.append(
            f"median steps ratio ({a}/{b}): "
            f"{med_steps[a] / med_steps[b]:.4f}"
        )
    return lines


def cmd_sweep_lr(cfg: ExperimentConfig, out_dir: Path, threads: int = 1,
                 timing: bool = False) -> int:
    kind, source = build_task_source(cfg)
    cfg.require_section("sweep")
    methods = cfg.get_str_list("sweep", "methods", ["mezo", "finetuner"])
    seeds = cfg.get_int_list("sweep", "seeds")
    if not seeds:
        raise ConfigError("[sweep] seeds must be non-empty")
    lr_grid = sorted(cfg.get_float_list("sweep", "lr_grid"))
    if len(lr_grid) < 3 or lr_grid[-1] < 100.0 * lr_grid[0]:
        raise ConfigError(
            "[sweep] lr_grid needs >= 3 values spanning >= 2 orders of magnitude"
        )
    steps = cfg.get_int("sweep", "steps")
    epsilon = cfg.get_float("sweep", "epsilon", 1e-3)
    batch_size = cfg.get_int("sweep", "batch_size", 16)
    plateau_ratio = cfg.get_float("sweep", "plateau_ratio", 0.9)
    window = cfg.get_float("sweep", "final_window", 0.1)
    params = _load_checkpoint_if_needed(cfg, "sweep", methods, out_dir)
    if kind == "quadratic":
        model = source.make_task(cfg.get_int("sweep", "task_index", 0))
    else:
        model = source(cfg.get_str("sweep", "granularity", "block"))

    jobs = [(method, lr, seed) for method in methods for lr in lr_grid for seed in seeds]

    def job(args):
        method, lr, seed = args
        return _execute_run(model, method, lr, steps, epsilon, batch_size, seed,
                            params, timing=timing)

    results = _map_jobs(job, jobs, threads)
    experiment = cfg.get_str("sweep", "experiment", "sweep")
    curve_rows, flag_lines = [], ["method,lr,seed,flag,final_mean"]
    for result in sorted(results, key=lambda r: (r.method, r.lr, r.seed)):
        curve_rows.extend(_run_rows(experiment, result))
        if result.diverged:
            flag = "diverged"
            final = float("inf")
        else:
            final = result.final_window_mean(window)
            flag = "plateaued" if final > plateau_ratio * result.initial_loss else "converged"
        flag_lines.append(
            f"{result.method},{_fmt(result.lr)},{result.seed},{flag},{_fmt(final)}"
        )
    _write_lines(out_dir / "sweep_curves.csv", [RUN_ROW_HEADER] + _sorted_rows(curve_rows))
    _write_lines(out_dir / "sweep_flags.csv", flag_lines)
    return 0


def cmd_ablate(cfg: ExperimentConfig, out_dir: Path, threads: int = 1,
               timing: bool = False) -> int:
    kind, source = build_task_source(cfg)
    cfg.require_section("ablate")
    axes = cfg.get_str_list("ablate", "axes")
    known = {"reset", "normalization", "partition"}
    unknown = [a for a in axes if a not in known]
    if unknown:
        raise ConfigError(f"[ablate] unknown axes {unknown}; choose from {sorted(known)}")
    seeds = cfg.get_int_list("ablate", "seeds")
    if not seeds:
        raise ConfigError("[ablate] seeds must be non-empty")
    steps = cfg.get_int("ablate", "steps")
    lr = cfg.get_float("ablate", "lr")
    epsilon = cfg.get_float("ablate", "epsilon", 1e-3)
    batch_size = cfg.get_int("ablate", "batch_size", 16)
    window = cfg.get_float("ablate", "final_window", 0.1)
    eval_task_index = cfg.get_int("ablate", "task_index", 0)

    lines = ["cell,seed,final_loss"]

    if "partition" in axes:
        if kind != "mlp":
            raise ConfigError("[ablate] the partition axis needs an mlp task")
        cells = [("partition=block", "block"), ("partition=layer", "layer")]
        for cell_name, granularity in cells:
            model = source(granularity)
            trained = _train_on_mlp(cfg, model)
            def job(seed, model=model, trained=trained):
                return _execute_run(model, "finetuner", lr, steps, epsilon,
                                    batch_size, seed, trained, timing=timing)
            for result in _map_jobs(job, seeds, threads):
                lines.append(f"{cell_name},{result.seed},{_fmt(result.final_window_mean(window))}")
    else:
        if kind != "quadratic":
            raise ConfigError("[ablate] reset/normalization axes need a quadratic family")
        reset_values = [True, False] if "reset" in axes else [True]
        norm_values = [True, False] if "normalization" in axes else [True]
        train_seed = cfg.get_int("train", "seed", 0)
        for reset in reset_values:
            for norm in norm_values:
                cell_name = f"reset={'on' if reset else 'off'}+norm={'on' if norm else 'off'}"
                trained, _, _ = _meta_train(cfg, source, train_seed,
                                            normalize=norm, reset=reset)
                model = source.make_task(eval_task_index)
                def job(seed, model=model, trained=trained, norm=norm):
                    return _execute_run(model, "finetuner", lr, steps, epsilon,
                                        batch_size, seed, trained,
                                        normalize=norm, timing=timing)
                for result in _map_jobs(job, seeds, threads):
                    final = result.final_window_mean(window) if not result.diverged else float("inf")
                    lines.append(f"{cell_name},{result.seed},{_fmt(final)}")
    _write_lines(out_dir / "ablation.csv", lines)
    return 0


def _train_on_mlp(cfg: ExperimentConfig, model):
    """Meta-train a finetuner directly on one MLP task."""
    cfg.require_section("train")
    meta_cfg = meta_trainer.MetaConfig(
        eta1=cfg.get_float("train", "eta1"),
        eta2=cfg.get_float("train", "eta2"),
        steps=cfg.get_int("train", "steps"),
        epsilon=cfg.get_float("train", "epsilon", 1e-3),
        reset_period=cfg.get_int("train", "reset_period", 50),
        batch_size=cfg.get_int("train", "batch_size", 16),
        seed=cfg.get_int("train", "seed", 0),
    )
    init_params = pertnn_mod.init(
        model.partition, cfg.get_int("train", "hidden", 64),
        NoiseSeed(meta_cfg.seed),
    )
    trained, _ = meta_trainer.train(meta_cfg, [model], init_params)
    return trained


def cmd_verify_bounds(cfg: ExperimentConfig, out_dir: Path, threads: int = 1,
                      timing: bool = False) -> int:
    cfg.require_section("bounds")
    cfg.require_section("task")
    block_sizes = cfg.get_int_list("task", "block_sizes")
    opnorms = cfg.get_float_list("task", "opnorms", [1.0] * len(block_sizes))
    profiles_raw = cfg.get_str("bounds", "rank_profiles")
    profiles = []
    for chunk in profiles_raw.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            ranks = [float(v) for v in chunk.split(",")]
        except ValueError as exc:
            raise ConfigError(f"[bounds] malformed rank profile {chunk!r}") from exc
        if len(ranks) != len(block_sizes):
            raise ConfigError(
                f"[bounds] rank profile {chunk!r} has {len(ranks)} entries "
                f"for {len(block_sizes)} blocks"
            )
        profiles.append(ranks)
    etas = cfg.get_float_list("bounds", "etas")
    samples = cfg.get_int("bounds", "samples", 100_000)
    seed = cfg.get_int("bounds", "seed", 0)
    shift_scale = cfg.get_float("task", "shift_scale", 1.0)

    jobs = [(ranks, eta) for ranks in profiles for eta in etas]

    def job(args):
        ranks, eta = args
        task = make_rank_family(block_sizes, ranks, opnorms, init_scale=shift_scale,
                                seed=seed)
        theta = task.init_theta(seed)
        from .paramspace import PerturbScales
        report = bounds_mod.verify_bound(
            task, theta, PerturbScales.unit(task.partition), eta, n=samples, seed=seed
        )
        return ranks, eta, report

    results = _map_jobs(job, jobs, threads)
    lines = ["ranks,eta,mezo_bound,blockwise_unit,blockwise_optimal,"
             "mc_mean,mc_stderr,closed_form,ok"]
    any_violation = False
    for ranks, eta, report in results:
        rank_str = "|".join(_fmt(r) for r in ranks)
        lines.append(",".join([
            rank_str, _fmt(eta), _fmt(report.mezo_bound), _fmt(report.blockwise_unit),
            _fmt(report.blockwise_optimal), _fmt(report.mc_mean),
            _fmt(report.mc_stderr), _fmt(report.closed_form), str(int(report.ok)),
        ]))
        if not report.ok:
            any_violation = True
    _write_lines(out_dir / "bounds.csv", lines)
    return 4 if any_violation else 0
