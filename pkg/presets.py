"""预置初始分布 θ₀，以及 x1/x2 闭式表达式的解析。"""

from __future__ import annotations

import logging

import numpy as np
import sympy

from field_grid import Grid2D, ScalarField, sample

logger = logging.getLogger(__name__)

_X1, _X2 = sympy.symbols("x1 x2", real=True)

# 名称 → 闭式表达式（x1、x2 为坐标）
PRESETS: dict[str, str] = {
    "tanh-stripe": "tanh((2*x2 - 1)/0.2) + 1",
    "sine-stripe": "sin(2*pi*x2) + 1",
    "cosine-x": "cos(pi*x1)",
    "cosine-y": "cos(pi*x2)",
}


def _available() -> str:
    return ", ".join(PRESETS)


def parse_expression(expr: str) -> sympy.Expr:
    """把 x1/x2 的表达式字符串解析成 sympy 表达式；只允许这两个自由变量。"""
    try:
        parsed = sympy.sympify(expr, locals={"x1": _X1, "x2": _X2})
    except (sympy.SympifyError, SyntaxError, TypeError) as exc:
        raise ValueError(f"无法解析 θ₀ 表达式 {expr!r}: {exc}") from exc
    if not isinstance(parsed, sympy.Expr):
        raise ValueError(f"θ₀ 表达式 {expr!r} 不是标量表达式")
    extra = parsed.free_symbols - {_X1, _X2}
    if extra:
        names = ", ".join(sorted(str(s) for s in extra))
        raise ValueError(
            f"未知初值 {expr!r}：表达式含未定义变量 {names}。可用预置: {_available()}"
        )
    return parsed


def expression_field(expr: str, grid: Grid2D) -> ScalarField:
    func = sympy.lambdify((_X1, _X2), parse_expression(expr), modules="numpy")
    return sample(grid, lambda x1, x2: np.asarray(func(x1, x2), dtype=float))


def preset_theta0(name: str, grid: Grid2D) -> ScalarField:
    """tanh-stripe = tanh((2x₂−1)/0.2)+1；sine-stripe = sin(2πx₂)+1；cosine-x = cos(πx₁)。"""
    if name not in PRESETS:
        raise ValueError(f"未知预置初值 {name!r}，可用预置: {_available()}")
    return expression_field(PRESETS[name], grid)


def resolve_theta0(spec: str, grid: Grid2D) -> ScalarField:
    """预置名优先，否则按闭式表达式解析。"""
    if spec in PRESETS:
        return preset_theta0(spec, grid)
    logger.info("[RUN] θ₀ 使用自定义表达式: %s", spec)
    return expression_field(spec, grid)
