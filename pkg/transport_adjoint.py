"""状态方程（隐式 Euler）与伴随方程（显式/隐式逆向 Euler）的时间推进，以及动能代价。

离散约定：
  - A_h(v)f = ½[v·∇ₕf + ∇ₕ·(v f)]，∇ₕ 为 SBP 一阶差分；v·n = 0 时 W·A_h 反对称。
  - 输运速度取 BasisSet.transport（离散无散），因此质量与 L² 同时守恒。
  - 控制在 [kτ, (k+1)τ) 上为常数，values[:, k] 作用于第 k 步。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, gmres

from cellular_basis import BasisSet, assemble_transport_velocity
from field_grid import Grid2D, ScalarField, VectorField, sbp_diff
from mixnorm import MixNormContext, mix_norm_sq, solve_helmholtz

logger = logging.getLogger(__name__)

DEFAULT_RTOL = 1e-10
_GMRES_RESTART = 40
_GMRES_MAXITER = 50

ADJOINT_SCHEMES = ("implicit", "explicit")
SOURCE_MODES = ("square-of-sum", "sum-of-squares", "none")


class SolverError(RuntimeError):
    """线性求解不收敛或显式伴随步违反 CFL 条件。"""


# ── 数据类型 ─────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class ControlTrajectory:
    """分段常数控制 u_i(t)，values 形状 (N_basis, T)。"""
    tau: float
    steps: int
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError(f"时间步长 τ 必须为正，收到 {self.tau}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"步数必须为正整数，收到 {self.steps}")
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape[1] != self.steps:
            raise ValueError(f"控制数组形状 {vals.shape} 与步数 {self.steps} 不符（应为 (N, T)）")
        if not np.all(np.isfinite(vals)):
            raise ValueError("控制数组包含非有限值")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "steps", int(self.steps))

    @classmethod
    def constant(cls, profile: Sequence[float], tau: float, t_final: float) -> ControlTrajectory:
        steps = steps_for(tau, t_final)
        prof = np.asarray(profile, dtype=float)
        return cls(tau, steps, np.repeat(prof[:, None], steps, axis=1))

    @property
    def n_basis(self) -> int:
        return self.values.shape[0]

    @property
    def t_final(self) -> float:
        return self.tau * self.steps

    def times(self) -> np.ndarray:
        """每步左端点 kτ。"""
        return np.arange(self.steps) * self.tau

    def at(self, k: int) -> np.ndarray:
        return self.values[:, k]

    def with_values(self, values: np.ndarray) -> ControlTrajectory:
        return ControlTrajectory(self.tau, self.steps, values)

    def __mul__(self, a: float) -> ControlTrajectory:
        return self.with_values(a * self.values)

    __rmul__ = __mul__


def steps_for(tau: float, t_final: float) -> int:
    """T = t_f/τ，要求整除（相对误差 1e-9）。"""
    if tau <= 0 or t_final <= 0:
        raise ValueError(f"τ 与 t_f 必须为正，收到 τ={tau}, t_f={t_final}")
    steps = int(round(t_final / tau))
    if steps < 1 or abs(steps * tau - t_final) > 1e-9 * t_final:
        raise ValueError(f"τ={tau} 不能整除 t_f={t_final}")
    return steps


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    """一次前向求解的全部结果。states 形状 (T+1, n, n)，序列长度均为 T+1。"""
    grid: Grid2D
    tau: float
    states: np.ndarray
    mixnorm_series: np.ndarray
    cost_cumulative: np.ndarray
    snapshots: dict[float, ScalarField] = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.tau

    @property
    def cost(self) -> float:
        return float(self.cost_cumulative[-1])

    def state(self, k: int) -> ScalarField:
        return ScalarField(self.grid, self.states[k])

    @property
    def final(self) -> ScalarField:
        return self.state(self.steps)


@dataclass(frozen=True, eq=False)
class AdjointTrajectory:
    """values[k] = ρ_k（k = 0..T）；carried[k] = ρ̂_k，即加源项之前的传播结果（k = 0..T−1）。"""
    grid: Grid2D
    values: np.ndarray
    carried: np.ndarray

    def at(self, k: int) -> ScalarField:
        return ScalarField(self.grid, self.values[k])


# ── 平流算子 ─────────────────────────────────────────────────


def apply_advection(f: np.ndarray, v: VectorField) -> np.ndarray:
    """A_h(v)f = ½[vx·D₁f + D₁(vx f) + vy·D₂f + D₂(vy f)]。"""
    h = v.grid.h
    return 0.5 * (
        v.vx * sbp_diff(f, h, 0) + sbp_diff(v.vx * f, h, 0)
        + v.vy * sbp_diff(f, h, 1) + sbp_diff(v.vy * f, h, 1)
    )


def _sbp_matrix(n: int, h: float) -> sp.csr_matrix:
    d = sp.lil_matrix((n, n))
    for j in range(1, n - 1):
        d[j, j - 1] = -0.5 / h
        d[j, j + 1] = 0.5 / h
    d[0, 0], d[0, 1] = -1.0 / h, 1.0 / h
    d[n - 1, n - 2], d[n - 1, n - 1] = -1.0 / h, 1.0 / h
    return d.tocsr()


def advection_operator(v: VectorField) -> sp.csr_matrix:
    """A_h(v) 的稀疏矩阵（按行主序展平），与 apply_advection 等价。"""
    n, h = v.grid.n, v.grid.h
    d1 = _sbp_matrix(n, h)
    eye = sp.identity(n, format="csr")
    dx = sp.kron(d1, eye, format="csr")
    dy = sp.kron(eye, d1, format="csr")
    vx = sp.diags(v.vx.ravel())
    vy = sp.diags(v.vy.ravel())
    return (0.5 * (vx @ dx + dx @ vx + vy @ dy + dy @ vy)).tocsr()


def _solve_shifted(rhs: np.ndarray, v: VectorField, sign: float, tau: float,
                   rtol: float, what: str) -> np.ndarray:
    """解 (I + sign·τ·A_h(v)) x = rhs，GMRES 以 rhs 为初值。"""
    shape = rhs.shape
    size = rhs.size

    def matvec(x: np.ndarray) -> np.ndarray:
        f = x.reshape(shape)
        return (f + sign * tau * apply_advection(f, v)).ravel()

    op = LinearOperator((size, size), matvec=matvec, dtype=float)
    b = rhs.ravel()
    x, info = gmres(op, b, x0=b.copy(), rtol=rtol, atol=0.0,
                    restart=_GMRES_RESTART, maxiter=_GMRES_MAXITER)
    if info != 0:
        cfl = tau * v.max_speed() / v.grid.h
        logger.error("[%s] GMRES 未收敛: info=%d τ·max|v|/h=%.3f", what, info, cfl)
        raise SolverError(
            f"{what} 线性求解未收敛 (info={info})，τ·max|v|/h = {cfl:.3f} 可能过大"
        )
    return x.reshape(shape)


# ── 状态方程 ─────────────────────────────────────────────────


def step_state_implicit(theta: ScalarField, v: VectorField, tau: float,
                        rtol: float = DEFAULT_RTOL) -> ScalarField:
    """(I + τA_h(v)) θ_{k+1} = θ_k。"""
    if tau <= 0:
        raise ValueError(f"τ 必须为正，收到 {tau}")
    if not (np.any(v.vx) or np.any(v.vy)):
        return theta
    return theta.with_values(_solve_shifted(theta.values, v, 1.0, tau, rtol, "STATE"))


def _snapshot_steps(times: Sequence[float], tau: float, steps: int) -> dict[int, float]:
    out: dict[int, float] = {}
    for t in times:
        k = int(round(t / tau))
        if k < 0 or k > steps or abs(k * tau - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"快照时间 t={t} 不在时间网格 kτ (τ={tau}, T={steps}) 上")
        out[k] = float(t)
    return out


def gram_matrices(states: np.ndarray, basis: BasisSet) -> np.ndarray:
    """逐步 M_raw(θ_k)_{ij} = (θ_k, b_i·b_j)_W，形状 (K, N, N)，不做截断。"""
    w = basis.grid.weights
    return np.einsum("kxy,ijxy->kij", states * w, basis.gram_fields())


def _step_costs(states: np.ndarray, basis: BasisSet, u: ControlTrajectory) -> np.ndarray:
    m = gram_matrices(states[: u.steps], basis)
    uk = u.values.T
    return 0.5 * u.tau * np.einsum("ki,kij,kj->k", uk, m, uk)


def cost_of(states: np.ndarray, basis: BasisSet, u: ControlTrajectory) -> float:
    """J = ½ Σ_k τ ∫θ_k |Σᵢuᵢ(k)bᵢ|² dx（左端点规则）。"""
    states = np.asarray(states, dtype=float)
    if states.ndim == 2:
        states = np.broadcast_to(states, (u.steps + 1,) + states.shape)
    if states.shape[0] < u.steps:
        raise ValueError(f"状态轨迹长度 {states.shape[0]} 小于控制步数 {u.steps}")
    return float(np.sum(_step_costs(states, basis, u)))


def solve_state(
    theta0: ScalarField,
    basis: BasisSet,
    u: ControlTrajectory,
    snapshot_times: Sequence[float] = (),
    mean0: float | None = None,
    ctx: MixNormContext | None = None,
    rtol: float = DEFAULT_RTOL,
) -> TrajectoryRecord:
    """对 T 步依次调用 step_state_implicit，记录 mix-norm 序列与累计代价。

    mixnorm_series[k] = ‖θ_k − θ̄₀‖²_{(H¹)′}；θ̄₀ 默认取 θ₀ 的均值。
    """
    if theta0.grid != basis.grid:
        raise ValueError("θ₀ 与 BasisSet 的网格不一致")
    if u.n_basis != len(basis):
        raise ValueError(f"控制分量数 {u.n_basis} 与基函数个数 {len(basis)} 不符")
    grid = theta0.grid
    if mean0 is None:
        mean0 = float(np.sum(grid.weights * theta0.values))
    snap_at = _snapshot_steps(snapshot_times, u.tau, u.steps)

    states = np.empty((u.steps + 1, grid.n, grid.n))
    states[0] = theta0.values
    theta = theta0
    for k in range(u.steps):
        v = assemble_transport_velocity(basis, u.at(k))
        theta = step_state_implicit(theta, v, u.tau, rtol)
        states[k + 1] = theta.values

    series = np.array([mix_norm_sq(ScalarField(grid, s - mean0), ctx) for s in states])
    cum = np.concatenate([[0.0], np.cumsum(_step_costs(states, basis, u))])
    snaps = {t: ScalarField(grid, states[k]) for k, t in sorted(snap_at.items())}
    logger.debug("[STATE] 前向求解完成: T=%d J=%.6e mixnorm_sq(t_f)=%.6e",
                 u.steps, cum[-1], series[-1])
    return TrajectoryRecord(grid, u.tau, states, series, cum, snaps)


# ── 伴随方程 ─────────────────────────────────────────────────


def running_source(basis: BasisSet, uk: Sequence[float], mode: str = "square-of-sum") -> np.ndarray:
    """s = ½|Σᵢuᵢbᵢ|²（默认）或 ½Σᵢuᵢ²|bᵢ|²；mode="none" 返回零场。"""
    uk = np.asarray(uk, dtype=float)
    n = basis.grid.n
    if mode == "none":
        return np.zeros((n, n))
    if mode == "square-of-sum":
        vx = np.tensordot(uk, np.stack([b.vx for b in basis.samples]), axes=1)
        vy = np.tensordot(uk, np.stack([b.vy for b in basis.samples]), axes=1)
        return 0.5 * (vx ** 2 + vy ** 2)
    if mode == "sum-of-squares":
        return 0.5 * sum(ui * ui * b.speed_sq() for ui, b in zip(uk, basis.samples))
    raise ValueError(f"未知伴随源项: {mode}（可选 {', '.join(SOURCE_MODES)}）")


def check_cfl(v: VectorField, tau: float) -> float:
    cfl = tau * v.max_speed() / v.grid.h
    if cfl > 1.0:
        raise SolverError(f"显式伴随步违反 CFL 条件: τ·max|v|/h = {cfl:.3f} > 1")
    return cfl


def step_adjoint_explicit(rho_next: ScalarField, v: VectorField, source: ScalarField,
                          tau: float) -> ScalarField:
    """ρ_k = ρ_{k+1} + τ(A_h(v)ρ_{k+1} + source)。

    中心差分加显式 Euler 对任意 τ 都按 1 + O(τ²) 放大 L² 范数，CFL 检查只拦截明显过大的步长。
    """
    check_cfl(v, tau)
    return rho_next.with_values(
        rho_next.values + tau * (apply_advection(rho_next.values, v) + source.values)
    )


def step_adjoint_implicit(rho_next: ScalarField, v: VectorField, source: ScalarField,
                          tau: float, rtol: float = DEFAULT_RTOL) -> ScalarField:
    """ρ_k = (I − τA_h(v))⁻¹ρ_{k+1} + τ·source，隐式状态步的离散伴随。"""
    if np.any(v.vx) or np.any(v.vy):
        carried = _solve_shifted(rho_next.values, v, -1.0, tau, rtol, "ADJOINT")
    else:
        carried = rho_next.values
    return rho_next.with_values(carried + tau * source.values)


def terminal_adjoint(theta_tf: ScalarField, lam: float, mean0: float,
                     ctx: MixNormContext | None = None) -> ScalarField:
    """ρ(t_f) = −2λ𝒜⁻¹(θ(t_f) − θ̄₀)。"""
    return solve_helmholtz(theta_tf - mean0, ctx) * (-2.0 * lam)


def solve_adjoint(
    theta_tf: ScalarField,
    lam: float,
    basis: BasisSet,
    u: ControlTrajectory,
    mean0: float,
    scheme: str = "implicit",
    source_mode: str = "square-of-sum",
    ctx: MixNormContext | None = None,
    terminal: ScalarField | None = None,
    rtol: float = DEFAULT_RTOL,
) -> AdjointTrajectory:
    """从 ρ(t_f) 逆向扫描到 t = 0，源项取 −s_k。

    terminal 可覆盖默认终值（对偶性检查用）。
    """
    if lam < 0:
        raise ValueError(f"λ 必须非负，收到 {lam}")
    if scheme not in ADJOINT_SCHEMES:
        raise ValueError(f"未知伴随格式: {scheme}（可选 {', '.join(ADJOINT_SCHEMES)}）")
    grid = basis.grid
    rho = terminal if terminal is not None else terminal_adjoint(theta_tf, lam, mean0, ctx)

    values = np.empty((u.steps + 1, grid.n, grid.n))
    carried = np.empty((u.steps, grid.n, grid.n))
    values[-1] = rho.values
    zero = ScalarField(grid, np.zeros((grid.n, grid.n)))
    for k in range(u.steps - 1, -1, -1):
        v = assemble_transport_velocity(basis, u.at(k))
        if scheme == "explicit":
            hat = step_adjoint_explicit(rho, v, zero, u.tau)
        else:
            hat = step_adjoint_implicit(rho, v, zero, u.tau, rtol)
        carried[k] = hat.values
        rho = hat.with_values(hat.values - u.tau * running_source(basis, u.at(k), source_mode))
        values[k] = rho.values
    logger.debug("[ADJOINT] 伴随扫描完成: scheme=%s λ=%.4g", scheme, lam)
    return AdjointTrajectory(grid, values, carried)
