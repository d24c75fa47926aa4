"""单位正方形 Ω = (0,1)² 上的均匀网格、标量场存储、求积、差分算子与余弦变换。

所有求解器共用本模块。节点 (j, k) 位于 (j·h, k·h)，数组第 0 轴对应 x₁，第 1 轴对应 x₂。
离散内积统一使用梯形权重 W = H⊗H，H = h·diag(½, 1, …, 1, ½)。
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.fft import dctn, idctn

logger = logging.getLogger(__name__)

MIN_NODES = 8

_SNAPSHOT_HEADER = re.compile(r"#\s*n=(\d+)\s+t=(\S+)\s+field=(\S+)")


@dataclass(frozen=True)
class Grid2D:
    """均匀正方形网格，每边 n 个节点（含边界）。"""
    n: int

    def __post_init__(self) -> None:
        if int(self.n) != self.n or self.n < MIN_NODES:
            raise ValueError(f"网格节点数必须为 >= {MIN_NODES} 的整数，收到 n={self.n}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n - 1)

    @cached_property
    def coords(self) -> np.ndarray:
        # j·h 而不是 linspace：保证 h·(n−1) 与节点坐标一致
        c = np.arange(self.n, dtype=float) * self.h
        c[-1] = 1.0
        c.setflags(write=False)
        return c

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        x1, x2 = np.meshgrid(self.coords, self.coords, indexing="ij")
        x1.setflags(write=False)
        x2.setflags(write=False)
        return x1, x2

    @cached_property
    def line_weights(self) -> np.ndarray:
        w = np.full(self.n, self.h)
        w[0] = w[-1] = 0.5 * self.h
        w.setflags(write=False)
        return w

    @cached_property
    def weights(self) -> np.ndarray:
        """二维梯形权重 W（n×n）。"""
        w = np.outer(self.line_weights, self.line_weights)
        w.setflags(write=False)
        return w

    @cached_property
    def simpson_weights(self) -> np.ndarray:
        if self.n % 2 == 0:
            raise ValueError(f"Simpson 求积需要奇数节点数，当前 n={self.n}")
        w = np.full(self.n, 2.0)
        w[1::2] = 4.0
        w[0] = w[-1] = 1.0
        w *= self.h / 3.0
        ww = np.outer(w, w)
        ww.setflags(write=False)
        return ww

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros((self.n, self.n), dtype=bool)
        mask[0, :] = mask[-1, :] = True
        mask[:, 0] = mask[:, -1] = True
        return mask


@dataclass(frozen=True, eq=False)
class ScalarField:
    """网格上的标量场（θ、η 或 ρ 的节点值），构造后只读。"""
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.array(self.values, dtype=float)
        if vals.shape != (self.grid.n, self.grid.n):
            raise ValueError(
                f"标量场形状 {vals.shape} 与网格 ({self.grid.n}, {self.grid.n}) 不符"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("标量场包含非有限值")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def with_values(self, values: np.ndarray) -> ScalarField:
        return ScalarField(self.grid, values)

    def __add__(self, other: ScalarField | float) -> ScalarField:
        return self.with_values(self.values + _raw(other))

    def __sub__(self, other: ScalarField | float) -> ScalarField:
        return self.with_values(self.values - _raw(other))

    def __mul__(self, other: ScalarField | float) -> ScalarField:
        return self.with_values(self.values * _raw(other))

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class VectorField:
    """网格上的速度场 (vx, vy)。"""
    grid: Grid2D
    vx: np.ndarray
    vy: np.ndarray

    def __post_init__(self) -> None:
        shape = (self.grid.n, self.grid.n)
        for name in ("vx", "vy"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"速度分量 {name} 形状 {arr.shape} 与网格 {shape} 不符")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def speed_sq(self) -> np.ndarray:
        return self.vx ** 2 + self.vy ** 2

    def max_speed(self) -> float:
        return float(np.sqrt(self.speed_sq().max()))

    def normal_component_on_boundary(self) -> np.ndarray:
        """边界节点上的法向分量（四条边拼接）。"""
        return np.concatenate([
            self.vx[0, :], self.vx[-1, :], self.vy[:, 0], self.vy[:, -1],
        ])


def _raw(x: ScalarField | float) -> np.ndarray | float:
    return x.values if isinstance(x, ScalarField) else x


def sample(grid: Grid2D, func: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> ScalarField:
    """按节点坐标对闭式函数 f(x₁, x₂) 采样。"""
    x1, x2 = grid.mesh
    vals = np.broadcast_to(np.asarray(func(x1, x2), dtype=float), x1.shape)
    return ScalarField(grid, vals)


# ── 求积 ─────────────────────────────────────────────────────


def quadrature_weights(grid: Grid2D, rule: str = "trapezoid") -> np.ndarray:
    if rule == "trapezoid":
        return grid.weights
    if rule == "simpson":
        return grid.simpson_weights
    raise ValueError(f"未知求积规则: {rule}（仅支持 trapezoid/simpson）")


def integrate(f: ScalarField, rule: str = "trapezoid") -> float:
    """∫_Ω f dx，默认梯形张量积公式（对双线性函数精确）。"""
    return float(np.sum(quadrature_weights(f.grid, rule) * f.values))


def mean(f: ScalarField, rule: str = "trapezoid") -> float:
    # |Ω| = 1
    return integrate(f, rule)


def cell_means(f: ScalarField, N: int) -> ScalarField:
    """N×N 等分胞格上的 W 加权平均，展开为分片常数场。

    落在胞格分界线上的节点归入右/上侧胞格（x = 1 归入最后一格）。
    """
    grid = f.grid
    if int(N) != N or N < 1 or N > grid.n - 1:
        raise ValueError(f"胞格数 N 必须为 1..{grid.n - 1} 的整数，收到 N={N}")
    cell = np.minimum(np.floor(grid.coords * N + 1e-12).astype(int), N - 1)
    labels = (cell[:, None] * N + cell[None, :]).ravel()
    w = grid.weights.ravel()
    sums = np.bincount(labels, weights=w * f.values.ravel(), minlength=N * N)
    mass = np.bincount(labels, weights=w, minlength=N * N)
    return f.with_values((sums / mass)[labels].reshape(grid.n, grid.n))


def inner(f: np.ndarray, g: np.ndarray, grid: Grid2D) -> float:
    """数组层面的离散 L² 内积 (f, g)_W。"""
    return float(np.sum(grid.weights * f * g))


def l2_norm(f: ScalarField, rule: str = "trapezoid") -> float:
    return float(np.sqrt(np.sum(quadrature_weights(f.grid, rule) * f.values ** 2)))


def h1_norm(f: ScalarField, rule: str = "trapezoid") -> float:
    """(‖f‖²_{L²} + ‖∇f‖²_{L²})^{1/2}。

    梯度：内部中心差分，边界二阶单侧差分。
    """
    g1, g2 = np.gradient(f.values, f.grid.h, edge_order=2)
    w = quadrature_weights(f.grid, rule)
    return float(np.sqrt(np.sum(w * (f.values ** 2 + g1 ** 2 + g2 ** 2))))


# ── 差分算子 ─────────────────────────────────────────────────


def sbp_diff(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    """沿 axis 的分部求和（SBP）一阶导数：内部中心差分，边界一阶单侧差分。

    与梯形权重 H 满足 H·D + (H·D)ᵀ = diag(−1, 0, …, 0, 1)。
    """
    f = np.moveaxis(f, axis, 0)
    d = np.empty_like(f)
    d[1:-1] = (f[2:] - f[:-2]) / (2.0 * h)
    d[0] = (f[1] - f[0]) / h
    d[-1] = (f[-1] - f[-2]) / h
    return np.moveaxis(d, 0, axis)


def centered_divergence(v: VectorField) -> np.ndarray:
    """内部节点上的中心差分散度（(n−2)×(n−2)）。"""
    h = v.grid.h
    d1 = (v.vx[2:, 1:-1] - v.vx[:-2, 1:-1]) / (2.0 * h)
    d2 = (v.vy[1:-1, 2:] - v.vy[1:-1, :-2]) / (2.0 * h)
    return d1 + d2


def divergence(v: VectorField) -> np.ndarray:
    """全网格二阶散度（边界二阶单侧差分）。"""
    h = v.grid.h
    return (np.gradient(v.vx, h, axis=0, edge_order=2)
            + np.gradient(v.vy, h, axis=1, edge_order=2))


# ── 余弦变换 ─────────────────────────────────────────────────


def _dct_scale(n: int) -> np.ndarray:
    s = np.full(n, 1.0 / (n - 1))
    s[0] = s[-1] = 0.5 / (n - 1)
    return s


def cosine_transform(f: ScalarField) -> np.ndarray:
    """f 在 φ_{jk} = cos(jπx₁)cos(kπx₂) 下的系数 c_{jk}（DCT-I，节点上精确插值）。"""
    s = _dct_scale(f.grid.n)
    return dctn(f.values, type=1) * np.outer(s, s)


def inverse_cosine_transform(coeffs: np.ndarray, grid: Grid2D) -> ScalarField:
    s = _dct_scale(grid.n)
    return ScalarField(grid, idctn(coeffs / np.outer(s, s), type=1))


def mode_norms(n: int) -> np.ndarray:
    """DCT-I 模态在梯形内积下的精确范数平方 ν_j ν_k（ν₀ = ν_{n−1} = 1，其余 ½）。"""
    nu = np.full(n, 0.5)
    nu[0] = nu[-1] = 1.0
    return np.outer(nu, nu)


# ── 快照读写 ─────────────────────────────────────────────────


def write_snapshot(path: str | Path, f: ScalarField, time: float, name: str) -> Path:
    """写出逗号分隔快照，首行 `# n=<n> t=<time> field=<name>`，按行主序。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(
        path, f.values, delimiter=",", fmt="%.17g",
        header=f"n={f.grid.n} t={time:.12g} field={name}", comments="# ",
    )
    return path


def read_snapshot(path: str | Path) -> tuple[ScalarField, float, str]:
    """读取快照文件，返回 (field, time, name)。"""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
    m = _SNAPSHOT_HEADER.match(header)
    if not m:
        raise ValueError(f"快照文件 {path} 首行格式不正确: {header!r}")
    n, time, name = int(m.group(1)), float(m.group(2)), m.group(3)
    values = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    return ScalarField(Grid2D(n), values), time, name
