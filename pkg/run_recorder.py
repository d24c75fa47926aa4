"""运行记录持久化 —— 每次运行一个目录：manifest.json + CSV 数值表 + 快照。"""

from __future__ import annotations

import json
import logging
import platform
import threading
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd
import scipy

from field_grid import write_snapshot
from transport_adjoint import ControlTrajectory, TrajectoryRecord

logger = logging.getLogger(__name__)

CODE_VERSION = "0.3.0"
_FLOAT_FORMAT = "%.17g"


def make_run_dir(base: str | Path, subcommand: str) -> Path:
    """<base>/<subcommand>_<UTC 时间戳>，重名时追加序号。"""
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    run_dir = Path(base) / f"{subcommand}_{stamp}"
    suffix = 1
    while run_dir.exists():
        run_dir = Path(base) / f"{subcommand}_{stamp}_{suffix}"
        suffix += 1
    run_dir.mkdir(parents=True)
    return run_dir


class RunRecorder:
    def __init__(self, run_dir: str | Path, subcommand: str) -> None:
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.subcommand = subcommand
        self._lock = threading.Lock()
        self._iterations: list[dict[str, float]] = []
        self._manifest: dict[str, Any] = {}
        self._started = time.monotonic()
        logger.info("RunRecorder 初始化完成: %s (subcommand=%s)", self.run_dir, subcommand)

    # ── 写入 ──

    def write_manifest(self, config: dict[str, Any], **extra: Any) -> Path:
        """写入全部已解析参数与版本信息；close() 时补充状态与耗时。"""
        with self._lock:
            self._manifest = {
                "subcommand": self.subcommand,
                "code_version": CODE_VERSION,
                "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "config": config,
                **extra,
            }
            return self._dump_manifest()

    def _dump_manifest(self) -> Path:
        path = self.run_dir / "manifest.json"
        path.write_text(json.dumps(self._manifest, indent=2, ensure_ascii=False, default=_jsonable),
                        encoding="utf-8")
        return path

    def log_iteration(self, row) -> None:
        """追加一行迭代记录并重写 iterations.csv，中途中断也保留已完成的迭代。"""
        with self._lock:
            self._iterations.append({
                "k": row.k, "J": row.J, "mu": row.mu, "lambda": row.lam,
                "alpha": row.alpha, "beta": row.beta, "rel_dJ": row.rel_dJ,
            })
            pd.DataFrame(self._iterations).to_csv(
                self.run_dir / "iterations.csv", index=False, float_format=_FLOAT_FORMAT,
            )

    def write_controls(self, u: ControlTrajectory, indices: Sequence[int]) -> Path:
        """controls.csv：time, u<i>…，time 为每步左端点。"""
        df = pd.DataFrame({"time": u.times()})
        for row, idx in zip(u.values, indices):
            df[f"u{idx}"] = row
        return self._write_table("controls.csv", df)

    def write_mixnorm(self, record: TrajectoryRecord, target: float,
                      filename: str = "mixnorm.csv") -> Path:
        series = np.asarray(record.mixnorm_series)
        df = pd.DataFrame({
            "step": np.arange(series.size),
            "time": record.times,
            "mixnorm_sq": series,
            "mixnorm": np.sqrt(series),
            "cost_cum": record.cost_cumulative,
            "target": target,
        })
        return self._write_table(filename, df)

    def write_snapshots(self, record: TrajectoryRecord, name: str = "theta") -> list[Path]:
        paths = []
        for t, field in record.snapshots.items():
            paths.append(write_snapshot(self.run_dir / "snapshots" / f"t_{t:g}.csv", field, t, name))
        return paths

    def write_table(self, filename: str, df: pd.DataFrame) -> Path:
        return self._write_table(filename, df)

    def _write_table(self, filename: str, df: pd.DataFrame) -> Path:
        path = self.run_dir / filename
        with self._lock:
            df.to_csv(path, index=False, float_format=_FLOAT_FORMAT)
        return path

    # ── 查询 ──

    def get_iterations(self) -> list[dict[str, float]]:
        with self._lock:
            return list(self._iterations)

    def close(self, status: str, exit_code: int, **extra: Any) -> None:
        with self._lock:
            self._manifest.update({
                "status": status,
                "exit_code": exit_code,
                "wall_time_sec": round(time.monotonic() - self._started, 3),
                **extra,
            })
            self._dump_manifest()
        logger.info("RunRecorder 已关闭: status=%s", status)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"无法序列化 {type(obj).__name__}")


def load_controls(path: str | Path, tau: Optional[float] = None) -> tuple[tuple[int, ...], ControlTrajectory]:
    """读取 controls.csv，返回 (基函数下标, ControlTrajectory)。"""
    df = pd.read_csv(path, float_precision="round_trip")
    if "time" not in df.columns:
        raise ValueError(f"{path} 缺少 time 列")
    cols = [c for c in df.columns if c != "time"]
    if not cols or not all(c.startswith("u") and c[1:].isdigit() for c in cols):
        raise ValueError(f"{path} 的控制列应为 u<i>，收到 {cols}")
    indices = tuple(int(c[1:]) for c in cols)
    times = df["time"].to_numpy(dtype=float)
    if tau is None:
        if times.size < 2:
            raise ValueError(f"{path} 只有一行，无法推断 τ")
        tau = float(times[1] - times[0])
    values = df[cols].to_numpy(dtype=float).T
    return indices, ControlTrajectory(tau, values.shape[1], values)


def load_mixnorm(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")
