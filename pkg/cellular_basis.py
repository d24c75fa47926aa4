"""蜂窝流基：Hamiltonian H_i、速度场 b_i = ∇⊥H_i、速度合成，以及轨道周期与椭圆积分工具。

H_i 有两种归一化：
    scaled=True   H_i = sin(iπx₁)sin(iπx₂)/(iπ)   —— 单位幅值速度
    scaled=False  H_i = sin(iπx₁)sin(iπx₂)
速度场 b_i 在两种约定下相同（单位幅值），scaled 只影响周期/速率公式。
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp

from field_grid import Grid2D, ScalarField, VectorField, sbp_diff

logger = logging.getLogger(__name__)

_AGM_RTOL = 1e-15
_AGM_MAX_ITER = 64


def _check_index(i: int) -> int:
    if int(i) != i or i <= 0:
        raise ValueError(f"基函数下标必须为正整数，收到 {i}")
    return int(i)


def eval_hamiltonian(i: int, x: Sequence[float], scaled: bool = True) -> float:
    i = _check_index(i)
    x1, x2 = x
    h = math.sin(i * math.pi * x1) * math.sin(i * math.pi * x2)
    return h / (i * math.pi) if scaled else h


def eval_basis(i: int, x: Sequence[float], scaled: bool = True) -> np.ndarray:
    """b_i(x) = (−sin(iπx₁)cos(iπx₂), cos(iπx₁)sin(iπx₂))。

    scaled 参数仅为接口对称保留，不改变返回值。
    """
    i = _check_index(i)
    x1, x2 = x
    if not (0.0 <= x1 <= 1.0 and 0.0 <= x2 <= 1.0):
        raise ValueError(f"点 {tuple(x)} 不在 [0,1]² 内")
    a1, a2 = i * math.pi * x1, i * math.pi * x2
    return np.array([-math.sin(a1) * math.cos(a2), math.cos(a1) * math.sin(a2)])


def _sample_velocity(grid: Grid2D, i: int) -> VectorField:
    x1, x2 = grid.mesh
    a1, a2 = i * np.pi * x1, i * np.pi * x2
    vx = -np.sin(a1) * np.cos(a2)
    vy = np.cos(a1) * np.sin(a2)
    # sin(iπ·1) 在浮点下不是 0；边界法向分量直接置零
    vx[0, :] = vx[-1, :] = 0.0
    vy[:, 0] = vy[:, -1] = 0.0
    return VectorField(grid, vx, vy)


def _sample_hamiltonian(grid: Grid2D, i: int) -> np.ndarray:
    x1, x2 = grid.mesh
    h = np.sin(i * np.pi * x1) * np.sin(i * np.pi * x2) / (i * np.pi)
    h[0, :] = h[-1, :] = 0.0
    h[:, 0] = h[:, -1] = 0.0
    return h


def _discrete_curl(grid: Grid2D, ham: np.ndarray) -> VectorField:
    """(−D₂H, D₁H)：SBP 差分下离散散度严格为零，边界法向分量为零。"""
    vx = -sbp_diff(ham, grid.h, axis=1)
    vy = sbp_diff(ham, grid.h, axis=0)
    return VectorField(grid, vx, vy)


@dataclass(frozen=True, eq=False)
class BasisSet:
    """选定的蜂窝流下标及其在工作网格上的采样。

    samples    —— 解析速度 b_i 的节点值（代价、M 矩阵、速度合成使用）
    transport  —— 采样 Hamiltonian 的离散旋度（输运算子使用）
    """
    grid: Grid2D
    indices: tuple[int, ...]
    scaled: bool
    samples: tuple[VectorField, ...]
    transport: tuple[VectorField, ...]
    hamiltonians: tuple[ScalarField, ...]

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def sample_array(self) -> np.ndarray:
        """(N, 2, n, n) 解析速度。"""
        return np.stack([np.stack([b.vx, b.vy]) for b in self.samples])

    @property
    def transport_array(self) -> np.ndarray:
        return np.stack([np.stack([b.vx, b.vy]) for b in self.transport])

    def gram_fields(self) -> np.ndarray:
        """逐点内积 b_i·b_j，形状 (N, N, n, n)。"""
        b = self.sample_array
        return np.einsum("iaxy,jaxy->ijxy", b, b)


def sample_basis(grid: Grid2D, indices: Sequence[int], scaled: bool = True) -> BasisSet:
    idx = tuple(_check_index(i) for i in indices)
    if not idx:
        raise ValueError("基函数下标列表不能为空")
    if len(set(idx)) != len(idx):
        raise ValueError(f"基函数下标必须互不相同: {idx}")
    hams = tuple(_sample_hamiltonian(grid, i) for i in idx)
    basis = BasisSet(
        grid=grid,
        indices=idx,
        scaled=bool(scaled),
        samples=tuple(_sample_velocity(grid, i) for i in idx),
        transport=tuple(_discrete_curl(grid, h) for h in hams),
        hamiltonians=tuple(ScalarField(grid, h) for h in hams),
    )
    logger.debug("蜂窝流基已采样: indices=%s n=%d scaled=%s", idx, grid.n, scaled)
    return basis


def _combine(fields: Sequence[VectorField], u: Sequence[float], grid: Grid2D) -> VectorField:
    u = np.asarray(u, dtype=float)
    if u.shape != (len(fields),):
        raise ValueError(f"控制系数长度 {u.shape} 与基函数个数 {len(fields)} 不符")
    vx = np.zeros((grid.n, grid.n))
    vy = np.zeros((grid.n, grid.n))
    for ui, b in zip(u, fields):
        if ui != 0.0:
            vx += ui * b.vx
            vy += ui * b.vy
    return VectorField(grid, vx, vy)


def assemble_velocity(basis: BasisSet, u: Sequence[float]) -> VectorField:
    """v = Σᵢ uᵢ bᵢ（逐节点）。"""
    return _combine(basis.samples, u, basis.grid)


def assemble_transport_velocity(basis: BasisSet, u: Sequence[float]) -> VectorField:
    """输运算子使用的速度 Σᵢ uᵢ b̃ᵢ（离散无散）。"""
    return _combine(basis.transport, u, basis.grid)


# ── 完全椭圆积分与轨道周期 ─────────────────────────────────────


def _agm_k_from_complement(kp: float) -> float:
    """K = π / (2·AGM(1, k'))，k' = √(1−k²)。"""
    a, b = 1.0, float(kp)
    for _ in range(_AGM_MAX_ITER):
        if abs(a - b) <= _AGM_RTOL * a:
            break
        a, b = 0.5 * (a + b), math.sqrt(a * b)
    return math.pi / (2.0 * a)


def elliptic_K(k: float) -> float:
    """第一类完全椭圆积分 K(k)（模数 k），AGM 迭代。"""
    if not (0.0 <= k < 1.0):
        raise ValueError(f"elliptic_K 要求 0 <= k < 1，收到 k={k}")
    return _agm_k_from_complement(math.sqrt((1.0 - k) * (1.0 + k)))


def _check_action(N: int, I: float) -> None:
    _check_index(N)
    if not (0.0 < I < 1.0 / (2 * N)):
        raise ValueError(f"I 必须在开区间 (0, 1/(2N)) = (0, {1.0 / (2 * N):.6g}) 内，收到 I={I}")


def _period_prefactor(N: int, scaled: bool) -> float:
    return 4.0 / (N * math.pi) if scaled else 4.0 / (N * N * math.pi ** 2)


def orbit_period(N: int, I: float, scaled: bool = False) -> float:
    """过点 (1/(2N), I) 的闭轨周期 T̃_N(I) = c_N·K(cos(NπI))。"""
    _check_action(N, I)
    # K(cos a) 用互补模数 sin a 计算，I→0 时不丢精度
    return _period_prefactor(N, scaled) * _agm_k_from_complement(math.sin(N * math.pi * I))


def orbit_period_asymptotes(N: int, I: float, scaled: bool = False) -> tuple[float, float]:
    """返回 (I→0 的对数渐近值, 中心点极限值)。"""
    _check_action(N, I)
    c = _period_prefactor(N, scaled)
    return c * math.log(4.0 / (N * math.pi * I)), c * math.pi / 2.0


def orbit_period_ode(N: int, I: float, scaled: bool = False, rtol: float = 1e-12) -> float:
    """直接积分 ẋ = ∇⊥H_N 求回归时间，作为闭式周期的校验。"""
    _check_action(N, I)
    amp = 1.0 if scaled else N * math.pi
    x_start = 1.0 / (2 * N)

    def rhs(_t, x):
        a1, a2 = N * math.pi * x[0], N * math.pi * x[1]
        return [-amp * math.sin(a1) * math.cos(a2), amp * math.cos(a1) * math.sin(a2)]

    def crossing(_t, x):
        return x[0] - x_start
    crossing.direction = -1.0

    guess = orbit_period(N, I, scaled)
    sol = solve_ivp(
        rhs, (0.0, 1.5 * guess), [x_start, I], method="DOP853",
        events=crossing, rtol=rtol, atol=1e-14,
    )
    times = [t for t in sol.t_events[0] if t > 0.25 * guess]
    if not times:
        raise RuntimeError(f"ODE 积分未检测到回归: N={N} I={I}")
    return float(times[0])
