#!/usr/bin/env python3
"""启动入口 —— 解析子命令、加载配置、初始化日志、执行计算并写出运行目录。

用法:
    python run.py optimize --config config.yaml          # 不动点迭代求最优控制
    python run.py optimize --theta0 sine-stripe --indices 1,3
    python run.py simulate --controls-file runs/optimize_xxx/controls.csv
    python run.py mixnorm --field runs/simulate_xxx/snapshots/t_1.csv
    python run.py mixrate --N 2,3,4 --tf 1
    python run.py feasibility --r 0.3 --tf 1 --eps 0.1667 --c2 2 --theta0 tanh-stripe
    python run.py period --N 1 --I 0.25

退出码: 0 成功/收敛，2 配置或输入无效，3 未收敛，4 运行期失败。
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from config import ConfigError, RunConfig, deterministic_requested, load_config, load_env

logger = logging.getLogger("run")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NOT_CONVERGED = 3
EXIT_RUNTIME = 4

_LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

# 命令行 dest → 配置键
_FLAG_KEYS = {
    "n": "grid.n",
    "tau": "time.tau",
    "tf": "time.t_final",
    "indices": "basis.indices",
    "scaled": "basis.scaled",
    "initial_controls": "basis.initial_controls",
    "theta0": "initial.theta0",
    "r": "optimizer.r",
    "lambda0": "optimizer.lambda0",
    "eps1": "optimizer.eps1",
    "eps2": "optimizer.eps2",
    "alpha0": "optimizer.alpha0",
    "max_iter": "optimizer.max_iter",
    "adjoint_scheme": "optimizer.adjoint_scheme",
    "adjoint_source": "optimizer.adjoint_source",
    "quadrature": "optimizer.quadrature",
    "debug": "optimizer.debug",
    "output_dir": "output.dir",
    "snapshot_times": "output.snapshot_times",
    "controls_file": "output.controls_file",
    "log_level": "logging.level",
    "log_file": "logging.file",
}


@dataclass
class RunReport:
    subcommand: str
    exit_code: int
    status: str
    run_dir: Optional[Path] = None
    summary: dict[str, Any] = field(default_factory=dict)


# ── 命令行 ──


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"应为逗号分隔的整数: {text!r}") from exc


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"应为逗号分隔的数值: {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    logging_opts = argparse.ArgumentParser(add_help=False)
    logging_opts.add_argument("--log-level", dest="log_level", default=None)

    common = argparse.ArgumentParser(add_help=False, parents=[logging_opts])
    common.add_argument("--config", type=Path, default=None, help="YAML 配置文件（默认 config.yaml）")
    common.add_argument("--n", type=int, default=None, help="每边节点数")
    common.add_argument("--tau", type=float, default=None)
    common.add_argument("--tf", type=float, default=None, help="末时刻 t_f")
    common.add_argument("--indices", type=_csv_ints, default=None, help="如 1,2")
    common.add_argument("--scaled", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--theta0", default=None, help="预置名或 x1/x2 表达式")
    common.add_argument("--output-dir", dest="output_dir", default=None)
    common.add_argument("--log-file", dest="log_file", default=None)

    solver = argparse.ArgumentParser(add_help=False)
    solver.add_argument("--initial-controls", dest="initial_controls", type=_csv_floats, default=None)
    solver.add_argument("--r", type=float, default=None)
    solver.add_argument("--snapshot-times", dest="snapshot_times", type=_csv_floats, default=None)

    parser = argparse.ArgumentParser(description="蜂窝流最小能量搅拌控制求解器")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("optimize", parents=[common, solver], help="不动点迭代求最优控制")
    p.add_argument("--lambda0", type=float, default=None)
    p.add_argument("--eps1", type=float, default=None)
    p.add_argument("--eps2", type=float, default=None)
    p.add_argument("--alpha0", type=float, default=None)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    p.add_argument("--adjoint-scheme", dest="adjoint_scheme", default=None)
    p.add_argument("--adjoint-source", dest="adjoint_source", default=None)
    p.add_argument("--quadrature", default=None)
    p.add_argument("--debug", action=argparse.BooleanOptionalAction, default=None)

    p = sub.add_parser("simulate", parents=[common, solver], help="给定控制做前向求解")
    p.add_argument("--controls-file", dest="controls_file", default=None,
                   help="回放的 controls.csv；缺省时使用常数初始控制")

    p = sub.add_parser("mixnorm", parents=[logging_opts], help="计算快照文件的 mix-norm")
    p.add_argument("--field", type=Path, required=True)
    p.add_argument("--spectrum", choices=("continuous", "discrete"), default="continuous")

    p = sub.add_parser("mixrate", parents=[common], help="单一蜂窝流的混合速率研究")
    p.add_argument("--N", dest="N_list", type=_csv_ints, default=[2, 3, 4])
    p.add_argument("--samples", type=_csv_floats, default=None)
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("feasibility", parents=[common], help="可行频率下界")
    p.add_argument("--r", type=float, default=None)
    p.add_argument("--eps", type=float, default=1.0 / 6.0)
    p.add_argument("--c2", type=float, default=None)
    p.add_argument("--calibrate", action="store_true", help="用 mixrate 研究反解 C2")
    p.add_argument("--N", dest="N_list", type=_csv_ints, default=[2, 3, 4],
                   help="--calibrate 使用的频率")

    p = sub.add_parser("period", parents=[logging_opts], help="闭轨周期与渐近参考值")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--I", type=float, required=True)
    p.add_argument("--scaled", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--ode", action="store_true", help="同时用 ODE 积分校验")
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict[str, Any]:
    return {key: getattr(args, dest) for dest, key in _FLAG_KEYS.items()
            if getattr(args, dest, None) is not None}


# ── 日志 ──


def _setup_file_logging(level: str, path: Optional[Path]) -> Optional[logging.Handler]:
    root = logging.getLogger()
    root.setLevel(getattr(logging, level.upper(), logging.INFO))
    if path is None:
        return None
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(logging.Formatter(_LOG_FORMAT))
    root.addHandler(handler)
    return handler


def _banner(subcommand: str, cfg: RunConfig) -> None:
    logger.info("=" * 60)
    logger.info("蜂窝流搅拌求解器: %s", subcommand)
    logger.info("网格 n=%d | τ=%g | t_f=%g | T=%d", cfg.n, cfg.tau, cfg.t_final, cfg.steps)
    logger.info("基函数 indices=%s | scaled=%s | θ₀=%s", list(cfg.indices), cfg.scaled, cfg.theta0)
    if subcommand == "optimize":
        logger.info("r=%g | λ⁰=%g | ε₁=%g | ε₂=%g | α⁰=%g | max_iter=%d",
                    cfg.r, cfg.lambda0, cfg.eps1, cfg.eps2, cfg.alpha0, cfg.max_iter)
        logger.info("伴随格式=%s | 源项=%s", cfg.adjoint_scheme, cfg.adjoint_source)
    logger.info("=" * 60)


# ── 子命令 ──


def _cmd_optimize(cfg: RunConfig, recorder) -> RunReport:
    from field_grid import Grid2D, integrate
    from optimizer import optimize
    from presets import resolve_theta0

    theta0 = resolve_theta0(cfg.theta0, Grid2D(cfg.n))
    result = optimize(cfg.to_optimize_config(), theta0, on_iteration=recorder.log_iteration)

    recorder.write_controls(result.controls, cfg.indices)
    recorder.write_mixnorm(result.record, result.target)
    recorder.write_mixnorm(result.baseline, result.target, "baseline_mixnorm.csv")
    recorder.write_snapshots(result.record)

    mass_drift = abs(integrate(result.record.final, cfg.quadrature) - integrate(theta0, cfg.quadrature))
    summary = {
        "converged": result.converged,
        "iterations": len(result.history),
        "J": result.history[-1].J,
        "mu": result.history[-1].mu,
        "lambda": result.state.lam,
        "final_mixnorm": result.final_mixnorm,
        "target": result.target,
        "baseline_final_mixnorm": math.sqrt(float(result.baseline.mixnorm_series[-1])),
        "mass_drift": mass_drift,
        "solver_wall_time_sec": round(result.wall_time, 3),
    }
    logger.info("[RUN] 迭代 %d 轮 | J=%.6e | ‖θ(t_f)−θ̄₀‖=%.6e (目标 %.6e, 常数控制 %.6e)",
                summary["iterations"], summary["J"], summary["final_mixnorm"],
                summary["target"], summary["baseline_final_mixnorm"])
    if result.converged:
        return RunReport("optimize", EXIT_OK, "converged", recorder.run_dir, summary)
    return RunReport("optimize", EXIT_NOT_CONVERGED, "not_converged", recorder.run_dir, summary)


def _cmd_simulate(cfg: RunConfig, recorder) -> RunReport:
    from field_grid import Grid2D, l2_norm, mean
    from cellular_basis import sample_basis
    from mixnorm import initial_c0sq
    from presets import resolve_theta0
    from run_recorder import load_controls
    from transport_adjoint import ControlTrajectory, solve_state

    grid = Grid2D(cfg.n)
    theta0 = resolve_theta0(cfg.theta0, grid)
    if cfg.controls_file:
        indices, u = load_controls(cfg.controls_file, tau=cfg.tau)
        if u.steps != cfg.steps:
            raise ConfigError(
                f"{cfg.controls_file} 有 {u.steps} 步，与 t_final/τ = {cfg.steps} 不符"
            )
        if indices != cfg.indices:
            logger.info("[RUN] 使用控制文件中的基函数下标 %s", list(indices))
        logger.info("[RUN] 回放控制: %s", cfg.controls_file)
    else:
        indices = cfg.indices
        profile = cfg.initial_controls or tuple(0.0 if i == 0 else 1.0 for i in range(len(indices)))
        u = ControlTrajectory.constant(profile, cfg.tau, cfg.t_final)

    basis = sample_basis(grid, indices, cfg.scaled)
    mean0 = mean(theta0)
    c0sq = initial_c0sq(theta0, mean0)
    record = solve_state(theta0, basis, u, cfg.snapshot_times, mean0)
    target = cfg.r * math.sqrt(c0sq)

    recorder.write_controls(u, indices)
    recorder.write_mixnorm(record, target)
    recorder.write_snapshots(record)
    l2_0 = l2_norm(theta0, cfg.quadrature)
    summary = {
        "J": record.cost,
        "final_mixnorm": math.sqrt(float(record.mixnorm_series[-1])),
        "target": target,
        "l2_relative_drift": abs(l2_norm(record.final, cfg.quadrature) - l2_0) / l2_0,
    }
    logger.info("[RUN] J=%.6e | ‖θ(t_f)−θ̄₀‖=%.6e | L² 相对漂移 %.3e",
                summary["J"], summary["final_mixnorm"], summary["l2_relative_drift"])
    return RunReport("simulate", EXIT_OK, "success", recorder.run_dir, summary)


def _cmd_mixrate(cfg: RunConfig, recorder, args: argparse.Namespace) -> RunReport:
    import pandas as pd

    from field_grid import Grid2D
    from optimizer import mixing_rate_study
    from presets import resolve_theta0

    theta0 = resolve_theta0(cfg.theta0, Grid2D(cfg.n))
    samples = args.samples
    if samples is None:
        samples = [k * cfg.t_final / 5 for k in range(6)]
    workers = 1 if deterministic_requested() else args.workers
    study = mixing_rate_study(args.N_list, theta0, cfg.t_final, cfg.tau, samples,
                              cfg.scaled, workers)

    rows = [{"N": row.N, "time": t, "ratio": q, "ratio_total": q_total}
            for row in study.rows
            for t, q, q_total in zip(row.times, row.ratios, row.total_ratios)]
    recorder.write_table("mixrate.csv", pd.DataFrame(rows))
    summary_df = pd.DataFrame([
        {"N": row.N, "ratio_tf": row.ratios[-1], "exponent": row.exponent, "in_kernel": row.in_kernel}
        for row in study.rows
    ])
    recorder.write_table("mixrate_summary.csv", summary_df)
    print(summary_df.to_string(index=False))
    print(f"monotone_in_N: {study.monotone}")
    summary = {"monotone": study.monotone, "N": [row.N for row in study.rows]}
    return RunReport("mixrate", EXIT_OK, "success", recorder.run_dir, summary)


def _cmd_feasibility(cfg: RunConfig, args: argparse.Namespace) -> RunReport:
    from field_grid import Grid2D, h1_norm, mean
    from mixnorm import mix_norm
    from optimizer import FeasibilityInput, calibrate_c2, feasibility_N, mixing_rate_study
    from presets import resolve_theta0

    theta0 = resolve_theta0(cfg.theta0, Grid2D(cfg.n))
    centered = theta0 - mean(theta0)
    norm_h1 = h1_norm(centered, cfg.quadrature)
    norm_dual = mix_norm(centered)
    if args.calibrate:
        study = mixing_rate_study(args.N_list, theta0, cfg.t_final, cfg.tau, None, cfg.scaled,
                                  1 if deterministic_requested() else None)
        c2 = calibrate_c2(study, args.eps)
        logger.info("[RUN] 由 N=%s 的速率研究标定 C2=%.6g", args.N_list, c2)
    elif args.c2 is not None:
        c2 = args.c2
    else:
        raise ConfigError("feasibility 需要 --c2 或 --calibrate")
    N = feasibility_N(FeasibilityInput(cfg.r, cfg.t_final, args.eps, c2, norm_h1, norm_dual))
    print(f"normH1   = {norm_h1:.10g}")
    print(f"normDual = {norm_dual:.10g}")
    print(f"C2       = {c2:.10g}")
    print(f"N        = {N}")
    return RunReport("feasibility", EXIT_OK, "success", None,
                     {"N": N, "c2": c2, "norm_h1": norm_h1, "norm_dual": norm_dual})


def _cmd_mixnorm(args: argparse.Namespace) -> RunReport:
    from field_grid import l2_norm, read_snapshot
    from mixnorm import get_context, mix_norm_sq

    theta, t, name = read_snapshot(args.field)
    value = mix_norm_sq(theta, get_context(theta.grid, args.spectrum))
    l2 = l2_norm(theta)
    print(f"field={name} t={t:g} n={theta.grid.n}")
    print(f"mixnorm_sq = {value:.12g}")
    print(f"mixnorm    = {math.sqrt(value):.12g}")
    print(f"l2_norm    = {l2:.12g}")
    return RunReport("mixnorm", EXIT_OK, "success", None, {"mixnorm_sq": value, "l2_norm": l2})


def _cmd_period(args: argparse.Namespace) -> RunReport:
    from cellular_basis import orbit_period, orbit_period_asymptotes, orbit_period_ode

    T = orbit_period(args.N, args.I, args.scaled)
    log_ref, center_ref = orbit_period_asymptotes(args.N, args.I, args.scaled)
    print(f"T_N(I)            = {T:.12g}")
    print(f"log asymptote     = {log_ref:.12g}   (I → 0)")
    print(f"center limit      = {center_ref:.12g}   (I → 1/(2N))")
    summary = {"period": T, "log_asymptote": log_ref, "center_limit": center_ref}
    if args.ode:
        summary["period_ode"] = orbit_period_ode(args.N, args.I, args.scaled)
        print(f"ODE return time   = {summary['period_ode']:.12g}")
    return RunReport("period", EXIT_OK, "success", None, summary)


def run(subcommand: str, cfg: RunConfig, args: argparse.Namespace | None = None) -> RunReport:
    """执行一个需要配置的子命令；optimize/simulate/mixrate 写出运行目录。"""
    from run_recorder import RunRecorder, make_run_dir

    args = args or argparse.Namespace(N_list=[2, 3, 4], samples=None, workers=None,
                                      eps=1.0 / 6.0, c2=None, calibrate=False)
    if subcommand == "feasibility":
        return _cmd_feasibility(cfg, args)
    if subcommand not in ("optimize", "simulate", "mixrate"):
        raise ValueError(f"未知子命令: {subcommand}")

    run_dir = make_run_dir(cfg.output_dir, subcommand)
    handler = _setup_file_logging(cfg.log_level, run_dir / cfg.log_file)
    recorder = RunRecorder(run_dir, subcommand)
    recorder.write_manifest(cfg.to_manifest(), deterministic=deterministic_requested())
    _banner(subcommand, cfg)
    report = RunReport(subcommand, EXIT_RUNTIME, "failed", run_dir)
    try:
        if subcommand == "optimize":
            report = _cmd_optimize(cfg, recorder)
        elif subcommand == "simulate":
            report = _cmd_simulate(cfg, recorder)
        else:
            report = _cmd_mixrate(cfg, recorder, args)
        return report
    except (ConfigError, ValueError) as exc:
        report = RunReport(subcommand, EXIT_INVALID, "invalid_input", run_dir, {"error": str(exc)})
        raise
    except Exception as exc:
        report = RunReport(subcommand, EXIT_RUNTIME, "failed", run_dir, {"error": str(exc)})
        raise
    finally:
        recorder.close(report.status, report.exit_code, summary=report.summary)
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


def _pin_threads() -> None:
    for var in _THREAD_VARS:
        os.environ[var] = "1"
    logger.info("[RUN] 确定性模式: BLAS/OpenMP 线程数固定为 1")


def main(argv: Sequence[str] | None = None) -> int:
    # ── 预初始化日志（确保 config 加载阶段也有日志输出）──
    logging.basicConfig(level=logging.INFO, format=_LOG_FORMAT, handlers=[logging.StreamHandler()])

    args = build_parser().parse_args(argv)
    load_env()
    # 必须在数值库导入前设置
    if deterministic_requested():
        _pin_threads()

    from mixnorm import DegenerateStateError
    from transport_adjoint import SolverError

    try:
        if args.subcommand in ("mixnorm", "period"):
            _setup_file_logging(args.log_level or os.environ.get("MIXING_LOG_LEVEL", "INFO"), None)
            report = _cmd_mixnorm(args) if args.subcommand == "mixnorm" else _cmd_period(args)
        else:
            cfg = load_config(args.config, overrides_from_args(args))
            report = run(args.subcommand, cfg, args)
    except (ConfigError, DegenerateStateError) as exc:
        logger.error("输入无效: %s", exc)
        return EXIT_INVALID
    except SolverError as exc:
        logger.error("求解失败: %s", exc)
        return EXIT_RUNTIME
    except ValueError as exc:
        logger.error("输入无效: %s", exc)
        return EXIT_INVALID
    except Exception:
        logger.exception("运行期异常")
        return EXIT_RUNTIME

    if report.run_dir is not None:
        logger.info("[RUN] 输出目录: %s", report.run_dir)
    logger.info("[RUN] %s 结束: status=%s exit=%d", report.subcommand, report.status, report.exit_code)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
