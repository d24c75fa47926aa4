"""Mix-norm：用余弦谱解 Neumann 问题 (−Δ + I)η = θ，计算 ‖θ‖²_{(H¹)′} 与末时刻约束违反量 μ。"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from field_grid import (
    Grid2D,
    ScalarField,
    cosine_transform,
    inverse_cosine_transform,
    mode_norms,
)

logger = logging.getLogger(__name__)

SPECTRA = ("continuous", "discrete")


class DegenerateStateError(ValueError):
    """初始场已经均匀（C0sq ≤ 0），约束无意义。"""


@dataclass(frozen=True)
class MixNormContext:
    """𝒜 = −Δ + I 在余弦模态上的对角化。

    spectrum="continuous" 取精确本征值 1 + π²(j² + k²)；
    spectrum="discrete" 取 5 点 Neumann 差分格式的本征值，可精确反演 −Δₕ + I。
    """
    grid: Grid2D
    spectrum: str = "continuous"

    def __post_init__(self) -> None:
        if self.spectrum not in SPECTRA:
            raise ValueError(f"未知谱类型: {self.spectrum}（可选 {', '.join(SPECTRA)}）")

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        j = np.arange(self.grid.n, dtype=float)
        if self.spectrum == "continuous":
            lam1 = (np.pi * j) ** 2
        else:
            h = self.grid.h
            lam1 = (2.0 - 2.0 * np.cos(np.pi * j * h)) / h ** 2
        lam = 1.0 + lam1[:, None] + lam1[None, :]
        lam.setflags(write=False)
        return lam

    @cached_property
    def weights(self) -> np.ndarray:
        """ν_j ν_k / λ_{jk}，mix_norm_sq 的谱权重。"""
        w = mode_norms(self.grid.n) / self.eigenvalues
        w.setflags(write=False)
        return w


@lru_cache(maxsize=16)
def get_context(grid: Grid2D, spectrum: str = "continuous") -> MixNormContext:
    return MixNormContext(grid, spectrum)


def _ctx(theta: ScalarField, ctx: MixNormContext | None) -> MixNormContext:
    if ctx is None:
        return get_context(theta.grid)
    if ctx.grid != theta.grid:
        raise ValueError(f"MixNormContext 网格 n={ctx.grid.n} 与场网格 n={theta.grid.n} 不符")
    return ctx


def solve_helmholtz(theta: ScalarField, ctx: MixNormContext | None = None) -> ScalarField:
    """η = 𝒜⁻¹θ：η̂_{jk} = θ̂_{jk}/λ_{jk}。"""
    ctx = _ctx(theta, ctx)
    coeffs = cosine_transform(theta)
    return inverse_cosine_transform(coeffs / ctx.eigenvalues, theta.grid)


def mix_norm_sq(theta: ScalarField, ctx: MixNormContext | None = None) -> float:
    """‖θ‖²_{(H¹)′} = Σ ν_jν_k θ̂²_{jk}/λ_{jk}，与 (𝒜⁻¹θ, θ)_W 在舍入误差内相等。"""
    ctx = _ctx(theta, ctx)
    coeffs = cosine_transform(theta)
    return float(max(np.sum(ctx.weights * coeffs ** 2), 0.0))


def mix_norm(theta: ScalarField, ctx: MixNormContext | None = None) -> float:
    return float(np.sqrt(mix_norm_sq(theta, ctx)))


def violation(
    theta_tf: ScalarField,
    mean0: float,
    r: float,
    c0sq: float,
    ctx: MixNormContext | None = None,
) -> float:
    """μ = ‖θ(t_f) − θ̄₀‖²_{(H¹)′} − r²·C0sq；μ ≤ 0 表示满足末时刻约束。"""
    if c0sq <= 0.0:
        raise DegenerateStateError(
            f"初始场的 mix-norm 平方 C0sq={c0sq:.3e} <= 0，初始状态已均匀，无需搅拌"
        )
    if not (0.0 < r < 1.0):
        raise ValueError(f"r 必须在 (0, 1) 内，收到 r={r}")
    return mix_norm_sq(theta_tf - mean0, ctx) - r * r * c0sq


def initial_c0sq(theta0: ScalarField, mean0: float, ctx: MixNormContext | None = None) -> float:
    """C0sq = ‖θ₀ − θ̄₀‖²_{(H¹)′}，均匀初值直接拒绝。"""
    c0sq = mix_norm_sq(theta0 - mean0, ctx)
    # 常数场的 DCT 只剩舍入噪声
    scale = max(float(np.max(np.abs(theta0.values))), 1.0)
    if c0sq <= 1e-24 * scale * scale:
        raise DegenerateStateError(
            f"初始场近似常数（C0sq={c0sq:.3e}），初始状态已均匀，无需搅拌"
        )
    return c0sq


# ── 有限差分残差校验 ─────────────────────────────────────────


def neumann_laplacian(f: np.ndarray, h: float) -> np.ndarray:
    """5 点格式 Δₕ，边界用镜像虚点（f₋₁ = f₁）施加齐次 Neumann 条件。"""
    g = np.pad(f, 1, mode="reflect")
    return (g[2:, 1:-1] + g[:-2, 1:-1] + g[1:-1, 2:] + g[1:-1, :-2] - 4.0 * f) / (h * h)


def laplacian_residual(eta: ScalarField, theta: ScalarField) -> float:
    """‖(−Δₕ + I)η − θ‖_∞。"""
    if eta.grid != theta.grid:
        raise ValueError("η 与 θ 的网格不一致")
    res = -neumann_laplacian(eta.values, eta.grid.h) + eta.values - theta.values
    return float(np.max(np.abs(res)))
