"""配置加载：从 .env 读运行环境变量，从 config.yaml 读数值参数，命令行覆盖优先。

优先级：内置默认 < config.yaml < 环境变量 (MIXING_*) < 命令行。
本模块不导入 numpy，run.py 需要在数值库加载前读取 MIXING_DETERMINISTIC。
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml
from dotenv import load_dotenv

_PROJECT_DIR = Path(__file__).resolve().parent

ADJOINT_SCHEMES = ("implicit", "explicit")
ADJOINT_SOURCES = ("square-of-sum", "sum-of-squares")
QUADRATURES = ("trapezoid", "simpson")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")

# 段 → 键 → 默认值
DEFAULTS: dict[str, dict[str, Any]] = {
    "grid": {"n": 129},
    "time": {"tau": 0.005, "t_final": 1.0},
    "basis": {"indices": [1, 2], "scaled": True, "initial_controls": None},
    "initial": {"theta0": "tanh-stripe"},
    "optimizer": {
        "r": 0.3,
        "lambda0": 1.0,
        "eps1": 5e-4,
        "eps2": 1e-3,
        "alpha0": 0.5,
        "max_iter": 200,
        "adjoint_scheme": "implicit",
        "adjoint_source": "square-of-sum",
        "quadrature": "trapezoid",
        "debug": False,
    },
    "output": {
        "dir": "runs",
        "snapshot_times": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        "controls_file": None,
    },
    "logging": {"level": "INFO", "file": "mixing.log"},
}

_ENV_KEYS = {
    "MIXING_OUTPUT_DIR": "output.dir",
    "MIXING_LOG_LEVEL": "logging.level",
}


class ConfigError(Exception):
    """配置加载失败。"""


@dataclass(frozen=True)
class RunConfig:
    n: int = 129
    tau: float = 0.005
    t_final: float = 1.0
    indices: tuple[int, ...] = (1, 2)
    scaled: bool = True
    initial_controls: Optional[tuple[float, ...]] = None
    theta0: str = "tanh-stripe"         # 预置名或 x1/x2 闭式表达式
    r: float = 0.3
    lambda0: float = 1.0
    eps1: float = 5e-4
    eps2: float = 1e-3
    alpha0: float = 0.5
    max_iter: int = 200
    adjoint_scheme: str = "implicit"
    adjoint_source: str = "square-of-sum"
    quadrature: str = "trapezoid"       # 仅影响报告中的积分
    debug: bool = False
    output_dir: str = "runs"
    snapshot_times: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    controls_file: Optional[str] = None
    log_level: str = "INFO"
    log_file: str = "mixing.log"

    @property
    def steps(self) -> int:
        return int(round(self.t_final / self.tau))

    def to_optimize_config(self):
        from optimizer import OptimizeConfig
        return OptimizeConfig(
            r=self.r,
            t_final=self.t_final,
            tau=self.tau,
            lambda0=self.lambda0,
            eps1=self.eps1,
            eps2=self.eps2,
            max_iter=self.max_iter,
            indices=self.indices,
            scaled=self.scaled,
            initial_controls=self.initial_controls,
            alpha0=self.alpha0,
            adjoint_scheme=self.adjoint_scheme,
            adjoint_source=self.adjoint_source,
            snapshot_times=self.snapshot_times,
            debug=self.debug,
        )

    def to_manifest(self) -> dict[str, Any]:
        """按 YAML 分段输出全部已解析参数。"""
        flat = asdict(self)
        out: dict[str, dict[str, Any]] = {}
        for section, keys in DEFAULTS.items():
            out[section] = {}
            for key in keys:
                value = flat[_FIELD_OF[(section, key)]]
                out[section][key] = list(value) if isinstance(value, tuple) else value
        return out


# (段, 键) → RunConfig 字段名
_FIELD_OF: dict[tuple[str, str], str] = {
    ("output", "dir"): "output_dir",
    ("logging", "level"): "log_level",
    ("logging", "file"): "log_file",
}
for _section, _keys in DEFAULTS.items():
    for _key in _keys:
        _FIELD_OF.setdefault((_section, _key), _key)


def load_env(env_path: Path | None = None) -> None:
    env_file = env_path or _PROJECT_DIR / ".env"
    if env_file.exists():
        load_dotenv(env_file)


def _read_yaml(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"第 {mark.line + 1} 行第 {mark.column + 1} 列" if mark else "未知位置"
        problem = getattr(e, "problem", None) or str(e)
        raise ConfigError(f"{path.name} 解析失败（{where}）: {problem}") from e
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path.name} 格式不正确，应为字典结构")
    return raw


def _merge_file(raw: dict, merged: dict[str, dict[str, Any]], errors: list[str]) -> None:
    for section, body in raw.items():
        if section not in DEFAULTS:
            errors.append(f"未知配置段: {section}（可用: {', '.join(DEFAULTS)}）")
            continue
        if body is None:
            continue
        if not isinstance(body, dict):
            errors.append(f"配置段 {section} 应为字典结构")
            continue
        for key, value in body.items():
            if key not in DEFAULTS[section]:
                errors.append(
                    f"未知配置项: {section}.{key}（可用: {', '.join(DEFAULTS[section])}）"
                )
                continue
            merged[section][key] = value


def _apply_overrides(overrides: Mapping[str, Any], merged: dict, errors: list[str]) -> None:
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            errors.append(f"未知配置项: {dotted}")
            continue
        merged[section][key] = value


# ── 类型转换 ──


def _as_int(v: Any, name: str, errors: list[str]) -> int | None:
    if isinstance(v, bool):
        errors.append(f"{name} 应为整数，收到 {v!r}")
        return None
    try:
        f = float(v)
    except (TypeError, ValueError):
        errors.append(f"{name} 应为整数，收到 {v!r}")
        return None
    if not f.is_integer():
        errors.append(f"{name} 应为整数，收到 {v!r}")
        return None
    return int(f)


def _as_float(v: Any, name: str, errors: list[str]) -> float | None:
    if isinstance(v, bool):
        errors.append(f"{name} 应为数值，收到 {v!r}")
        return None
    try:
        return float(v)
    except (TypeError, ValueError):
        errors.append(f"{name} 应为数值，收到 {v!r}")
        return None


def _as_bool(v: Any, name: str, errors: list[str]) -> bool | None:
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("true", "false", "1", "0", "yes", "no"):
        return v.lower() in ("true", "1", "yes")
    errors.append(f"{name} 应为布尔值，收到 {v!r}")
    return None


def _as_list(v: Any, name: str, errors: list[str], conv) -> tuple | None:
    if isinstance(v, str):
        v = [s for s in v.replace(" ", "").split(",") if s]
    if not isinstance(v, (list, tuple)):
        errors.append(f"{name} 应为列表，收到 {v!r}")
        return None
    out = []
    for item in v:
        c = conv(item, name, errors)
        if c is None:
            return None
        out.append(c)
    return tuple(out)


def _as_choice(v: Any, name: str, choices: tuple[str, ...], errors: list[str]) -> str | None:
    s = str(v)
    if s not in choices:
        errors.append(f"{name} 必须是 {'/'.join(choices)} 之一，收到 {v!r}")
        return None
    return s


def _build(m: dict[str, dict[str, Any]], errors: list[str]) -> dict[str, Any]:
    g, t, b, i, o, out, lg = (m["grid"], m["time"], m["basis"], m["initial"],
                              m["optimizer"], m["output"], m["logging"])
    ic = b["initial_controls"]
    return {
        "n": _as_int(g["n"], "grid.n", errors),
        "tau": _as_float(t["tau"], "time.tau", errors),
        "t_final": _as_float(t["t_final"], "time.t_final", errors),
        "indices": _as_list(b["indices"], "basis.indices", errors, _as_int),
        "scaled": _as_bool(b["scaled"], "basis.scaled", errors),
        "initial_controls": None if ic is None else _as_list(
            ic, "basis.initial_controls", errors, _as_float),
        "theta0": str(i["theta0"]),
        "r": _as_float(o["r"], "optimizer.r", errors),
        "lambda0": _as_float(o["lambda0"], "optimizer.lambda0", errors),
        "eps1": _as_float(o["eps1"], "optimizer.eps1", errors),
        "eps2": _as_float(o["eps2"], "optimizer.eps2", errors),
        "alpha0": _as_float(o["alpha0"], "optimizer.alpha0", errors),
        "max_iter": _as_int(o["max_iter"], "optimizer.max_iter", errors),
        "adjoint_scheme": _as_choice(o["adjoint_scheme"], "optimizer.adjoint_scheme",
                                     ADJOINT_SCHEMES, errors),
        "adjoint_source": _as_choice(o["adjoint_source"], "optimizer.adjoint_source",
                                     ADJOINT_SOURCES, errors),
        "quadrature": _as_choice(o["quadrature"], "optimizer.quadrature", QUADRATURES, errors),
        "debug": _as_bool(o["debug"], "optimizer.debug", errors),
        "output_dir": str(out["dir"]),
        "snapshot_times": _as_list(out["snapshot_times"], "output.snapshot_times",
                                   errors, _as_float),
        "controls_file": None if out["controls_file"] is None else str(out["controls_file"]),
        "log_level": _as_choice(str(lg["level"]).upper(), "logging.level", LOG_LEVELS, errors),
        "log_file": str(lg["file"]),
    }


def _check_invariants(v: dict[str, Any], errors: list[str]) -> None:
    n, tau, tf = v["n"], v["tau"], v["t_final"]
    if n is not None and n < 8:
        errors.append(f"grid.n 必须 >= 8，收到 {n}")
    if tau is not None and tau <= 0:
        errors.append(f"time.tau 必须为正，收到 {tau}")
    if tf is not None and tf <= 0:
        errors.append(f"time.t_final 必须为正，收到 {tf}")
    if tau and tf and tau > 0 and tf > 0:
        steps = round(tf / tau)
        if steps < 1 or abs(steps * tau - tf) > 1e-9 * tf:
            errors.append(f"time.tau={tau} 必须整除 time.t_final={tf}")
    r = v["r"]
    if r is not None and not (0.0 < r < 1.0):
        errors.append(f"optimizer.r 必须在 (0, 1) 内，收到 {r}")
    if v["lambda0"] is not None and v["lambda0"] < 0:
        errors.append(f"optimizer.lambda0 必须 >= 0，收到 {v['lambda0']}")
    for key in ("eps1", "eps2"):
        if v[key] is not None and v[key] <= 0:
            errors.append(f"optimizer.{key} 必须为正，收到 {v[key]}")
    a0 = v["alpha0"]
    if a0 is not None and not (0.05 <= a0 <= 1.0):
        errors.append(f"optimizer.alpha0 必须在 [0.05, 1] 内，收到 {a0}")
    if v["max_iter"] is not None and v["max_iter"] < 1:
        errors.append(f"optimizer.max_iter 必须 >= 1，收到 {v['max_iter']}")
    idx = v["indices"]
    if idx is not None:
        if not idx:
            errors.append("basis.indices 不能为空")
        if any(i <= 0 for i in idx):
            errors.append(f"basis.indices 必须为正整数，收到 {list(idx)}")
        if len(set(idx)) != len(idx):
            errors.append(f"basis.indices 必须互不相同，收到 {list(idx)}")
        ic = v["initial_controls"]
        if ic is not None and len(ic) != len(idx):
            errors.append(
                f"basis.initial_controls 长度 {len(ic)} 与 basis.indices 长度 {len(idx)} 不符"
            )
    snaps = v["snapshot_times"]
    if snaps is not None and tf is not None:
        bad = [s for s in snaps if s < 0 or s > tf * (1 + 1e-12)]
        if bad:
            errors.append(f"output.snapshot_times 超出 [0, t_final]: {bad}")
        elif tau and tau > 0:
            off = [s for s in snaps if abs(round(s / tau) * tau - s) > 1e-9 * max(1.0, s)]
            if off:
                errors.append(f"output.snapshot_times 不在时间步网格上: {off}")


def load_config(
    yaml_path: Path | str | None = None,
    overrides: Mapping[str, Any] | None = None,
    env_path: Path | None = None,
) -> RunConfig:
    """加载并校验配置，返回 RunConfig。

    Args:
        yaml_path: 配置文件路径，默认为项目目录下的 config.yaml；文件不存在时报错
        overrides: 命令行覆盖，键为 "段.键"（如 "optimizer.r"），值为 None 的项忽略
        env_path: .env 文件路径
    """
    load_env(env_path)

    yaml_file = Path(yaml_path) if yaml_path else _PROJECT_DIR / "config.yaml"
    if not yaml_file.exists():
        raise ConfigError(f"找不到配置文件 {yaml_file}")

    errors: list[str] = []
    merged = {section: dict(keys) for section, keys in DEFAULTS.items()}
    _merge_file(_read_yaml(yaml_file), merged, errors)

    env_overrides = {key: os.environ[env] for env, key in _ENV_KEYS.items() if os.environ.get(env)}
    _apply_overrides(env_overrides, merged, errors)
    _apply_overrides(overrides or {}, merged, errors)
    if errors:
        raise ConfigError("; ".join(errors))

    values = _build(merged, errors)
    if errors:
        raise ConfigError("; ".join(errors))
    _check_invariants(values, errors)
    if errors:
        raise ConfigError("; ".join(errors))
    return RunConfig(**values)


def deterministic_requested() -> bool:
    return os.environ.get("MIXING_DETERMINISTIC", "").strip() in ("1", "true", "yes")
