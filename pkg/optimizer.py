"""不动点迭代：组装 M(t) 与 p(t)、松弛更新 u、投影更新 λ、自适应 α/β，以及可行频率下界与混合速率研究。"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from cellular_basis import BasisSet, sample_basis
from field_grid import ScalarField, cell_means, h1_norm, mean
from mixnorm import MixNormContext, get_context, initial_c0sq, mix_norm, violation
from transport_adjoint import (
    ADJOINT_SCHEMES,
    SOURCE_MODES,
    AdjointTrajectory,
    ControlTrajectory,
    SolverError,
    TrajectoryRecord,
    apply_advection,
    gram_matrices,
    solve_adjoint,
    solve_state,
)

logger = logging.getLogger(__name__)

ALPHA_MIN = 0.05
BETA_SMALL_COST = 100.0
BETA_FEASIBLE = 250.0
M_SHIFT = 1e-10
KERNEL_RATIO = 0.999
RATE_WINDOW = (0.2, 1.0)


# ── 数据类型 ─────────────────────────────────────────────────


@dataclass
class OptimizerState:
    k: int = 0
    lam: float = 1.0                # KKT 乘子 λ ≥ 0
    alpha: float = 0.5              # 松弛因子 α ∈ [α_min, 1]
    beta: float = float("nan")      # λ 步长，首次迭代后才有值
    J_hist: list[float] = field(default_factory=list)
    mu_hist: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class IterationRecord:
    k: int
    J: float
    mu: float
    lam: float
    alpha: float
    beta: float
    rel_dJ: float


@dataclass(frozen=True)
class OptimizeConfig:
    r: float = 0.3                  # 目标比例 ‖θ(t_f)−θ̄₀‖ ≤ r·C₀
    t_final: float = 1.0
    tau: float = 0.005
    lambda0: float = 1.0
    eps1: float = 5e-4              # μ 容差
    eps2: float = 1e-3              # 相对代价变化容差
    max_iter: int = 200
    indices: tuple[int, ...] = (1, 2)
    scaled: bool = True
    initial_controls: Optional[tuple[float, ...]] = None   # None ⇒ u₁ = 0，其余为 1
    alpha0: float = 0.5
    adjoint_scheme: str = "implicit"
    adjoint_source: str = "square-of-sum"
    snapshot_times: tuple[float, ...] = ()
    debug: bool = False

    def __post_init__(self) -> None:
        errors = []
        if not (0.0 < self.r < 1.0):
            errors.append(f"r 必须在 (0, 1) 内，收到 {self.r}")
        if self.tau <= 0 or self.t_final <= 0:
            errors.append(f"τ 与 t_f 必须为正，收到 τ={self.tau}, t_f={self.t_final}")
        else:
            steps = round(self.t_final / self.tau)
            if steps < 1 or abs(steps * self.tau - self.t_final) > 1e-9 * self.t_final:
                errors.append(f"τ={self.tau} 不能整除 t_f={self.t_final}")
        if self.lambda0 < 0:
            errors.append(f"λ⁰ 必须非负，收到 {self.lambda0}")
        if self.eps1 <= 0 or self.eps2 <= 0:
            errors.append(f"ε₁, ε₂ 必须为正，收到 ε₁={self.eps1}, ε₂={self.eps2}")
        if self.max_iter < 1:
            errors.append(f"max_iter 必须 >= 1，收到 {self.max_iter}")
        if not (ALPHA_MIN <= self.alpha0 <= 1.0):
            errors.append(f"α⁰ 必须在 [{ALPHA_MIN}, 1] 内，收到 {self.alpha0}")
        if self.initial_controls is not None and len(self.initial_controls) != len(self.indices):
            errors.append(
                f"initial_controls 长度 {len(self.initial_controls)} 与基函数个数 {len(self.indices)} 不符"
            )
        if self.adjoint_scheme not in ADJOINT_SCHEMES:
            errors.append(f"未知伴随格式: {self.adjoint_scheme}")
        if self.adjoint_source not in SOURCE_MODES[:2]:
            errors.append(f"未知伴随源项: {self.adjoint_source}")
        if errors:
            raise ValueError("; ".join(errors))

    def control_profile(self) -> tuple[float, ...]:
        if self.initial_controls is not None:
            return tuple(float(c) for c in self.initial_controls)
        return tuple(0.0 if i == 0 else 1.0 for i in range(len(self.indices)))


@dataclass(frozen=True)
class FeasibilityInput:
    r: float
    t_final: float
    eps: float
    c2: float
    norm_h1: float                  # ‖θ₀−θ̄‖_{H¹}
    norm_dual: float                # ‖θ₀−θ̄‖_{(H¹)′}

    def __post_init__(self) -> None:
        if not (0.0 < self.eps < 1.0 / 3.0):
            raise ValueError(f"ε 必须在 (0, 1/3) 内，收到 ε={self.eps}（ε >= 1/3 时指数发散）")
        for name in ("r", "t_final", "c2", "norm_h1", "norm_dual"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} 必须为正，收到 {getattr(self, name)}")


@dataclass(frozen=True, eq=False)
class OptimizeResult:
    converged: bool
    controls: ControlTrajectory
    record: TrajectoryRecord
    baseline: TrajectoryRecord
    state: OptimizerState
    history: list[IterationRecord]
    mean0: float
    c0sq: float
    r: float
    wall_time: float

    @property
    def target(self) -> float:
        """r·C₀。"""
        return self.r * math.sqrt(self.c0sq)

    @property
    def final_mixnorm(self) -> float:
        return math.sqrt(float(self.record.mixnorm_series[-1]))


# ── M、p 组装 ────────────────────────────────────────────────


def _shift(m: np.ndarray) -> np.ndarray:
    n = m.shape[-1]
    tr = np.trace(m, axis1=-2, axis2=-1)
    # θ ≡ 0 时 trace 为 0，用绝对量级保证可逆
    sigma = np.where(tr > 0, M_SHIFT * tr / n, M_SHIFT)
    return m + sigma[..., None, None] * np.eye(n)


def assemble_M(theta: ScalarField, basis: BasisSet) -> np.ndarray:
    """M_ij = ∫ max(θ,0) b_i·b_j dx，加 σI 正则，σ = 1e-10·trace/N。"""
    m = gram_matrices(np.maximum(theta.values, 0.0)[None], basis)[0]
    return _shift(0.5 * (m + m.T))


def assemble_M_series(states: np.ndarray, basis: BasisSet) -> np.ndarray:
    """对每步 θ_k（k = 0..T−1）批量组装 M，形状 (T, N, N)。"""
    m = gram_matrices(np.maximum(states, 0.0), basis)
    return _shift(0.5 * (m + np.swapaxes(m, -1, -2)))


def assemble_p(states: np.ndarray, adjoint: AdjointTrajectory, basis: BasisSet) -> np.ndarray:
    """p_i(k) = (θ_{k+1}, A_h(b̃_i)ρ̂_k)_W ≈ ∫θ (b_i·∇ρ) dx，形状 (T, N)。"""
    steps = adjoint.carried.shape[0]
    if states.shape[0] != steps + 1:
        raise ValueError(f"状态步数 {states.shape[0] - 1} 与伴随步数 {steps} 不符")
    w = basis.grid.weights
    p = np.empty((steps, len(basis)))
    for k in range(steps):
        wt = w * states[k + 1]
        rho = adjoint.carried[k]
        for i, b in enumerate(basis.transport):
            p[k, i] = np.sum(wt * apply_advection(rho, b))
    return p


def reduced_gradient(u: ControlTrajectory, m_raw: np.ndarray, p: np.ndarray) -> np.ndarray:
    """∂F/∂u_i(k) = τ[(M_k u_k)_i − p_i(k)]，F = J + λ·mix_norm_sq(θ_T − θ̄₀)，返回 (N, T)。"""
    uk = u.values.T
    return (u.tau * (np.einsum("kij,kj->ki", m_raw, uk) - p)).T


# ── 更新与调度 ───────────────────────────────────────────────


def update_u(u: ControlTrajectory, M: np.ndarray, p: np.ndarray, alpha: float) -> ControlTrajectory:
    """u_{k+1}(t) = (1−α)u_k(t) + α·M(t)⁻¹p(t)。"""
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"α 必须在 (0, 1] 内，收到 {alpha}")
    try:
        target = np.linalg.solve(M, p[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"M(t) 线性求解失败: {exc}") from exc
    return u.with_values((1.0 - alpha) * u.values + alpha * target.T)


def update_lambda(lam: float, beta: float, mu: float) -> float:
    """λ_{k+1} = max(λ_k + β_k·μ_{k+1}, 0)。"""
    return max(lam + beta * mu, 0.0)


def schedule_alpha(alpha: float, mu: float, eps1: float) -> float:
    if mu < eps1:
        return max(0.5 * alpha, ALPHA_MIN)
    return alpha


def schedule_beta(J: float, mu: float, eps1: float) -> float:
    if mu < eps1:
        return BETA_FEASIBLE
    if J >= 1.0:
        return 2.0 * J / mu
    return BETA_SMALL_COST


def slackness_satisfied(lam: float, mu: float, eps1: float) -> bool:
    """λ = 0，或约束在 ε₁ 内恰好激活（|μ| ≤ ε₁）。"""
    return lam == 0.0 or abs(mu) <= eps1


def relative_change(J: float, J_prev: float | None) -> float:
    if J_prev is None:
        return math.inf
    if J_prev == 0.0:
        return 0.0 if J == 0.0 else math.inf
    return abs(J - J_prev) / abs(J_prev)


# ── Algorithm 主循环 ─────────────────────────────────────────


def optimize(
    config: OptimizeConfig,
    theta0: ScalarField,
    ctx: MixNormContext | None = None,
    on_iteration: Callable[[IterationRecord], None] | None = None,
) -> OptimizeResult:
    """不动点迭代求最小能量搅拌控制。

    每轮先用 u^k 求状态，得 J^k、μ^k；满足 μ^k ≤ ε₁ 且相对代价变化 ≤ ε₂ 时停止并返回 u^k。
    否则依次更新 β、λ，解伴随，更新 α，最后 u^{k+1} = (1−α)u^k + αM⁻¹p。
    """
    started = time.monotonic()
    grid = theta0.grid
    ctx = ctx or get_context(grid)
    mean0 = mean(theta0)
    c0sq = initial_c0sq(theta0, mean0, ctx)
    basis = sample_basis(grid, config.indices, config.scaled)
    u = ControlTrajectory.constant(config.control_profile(), config.tau, config.t_final)

    state = OptimizerState(lam=config.lambda0, alpha=config.alpha0)
    history: list[IterationRecord] = []
    baseline: TrajectoryRecord | None = None
    record: TrajectoryRecord | None = None
    converged = False
    J_prev: float | None = None

    logger.info("[ITER] 开始迭代: indices=%s T=%d C0=%.6e 目标 r·C0=%.6e",
                config.indices, u.steps, math.sqrt(c0sq), config.r * math.sqrt(c0sq))
    if config.adjoint_scheme == "explicit":
        logger.warning("[ADJOINT] 显式伴随格式不稳定（L² 随步数增长），梯度不是离散问题的精确梯度；"
                       "仅用于对照，默认请用 implicit")

    for k in range(config.max_iter):
        state.k = k
        record = solve_state(theta0, basis, u, config.snapshot_times, mean0, ctx)
        if baseline is None:
            baseline = record
        J = record.cost
        mu = violation(record.final, mean0, config.r, c0sq, ctx)
        rel = relative_change(J, J_prev)
        state.J_hist.append(J)
        state.mu_hist.append(mu)

        if mu <= config.eps1 and rel <= config.eps2:
            if not slackness_satisfied(state.lam, mu, config.eps1):
                # 约束过度满足但 λ 仍为正：继续迭代让 λ 回落
                logger.info("[ITER] k=%d mu=%.3e lambda=%.4g 互补松弛未满足，继续迭代",
                            k, mu, state.lam)
            else:
                converged = True
        if converged:
            row = IterationRecord(k, J, mu, state.lam, state.alpha, state.beta, rel)
            history.append(row)
            if on_iteration:
                on_iteration(row)
            logger.info("[ITER] k=%d J=%.6e mu=%.3e lambda=%.4g rel_dJ=%.3e 收敛",
                        k, J, mu, state.lam, rel)
            break

        state.beta = schedule_beta(J, mu, config.eps1)
        state.lam = update_lambda(state.lam, state.beta, mu)
        adjoint = solve_adjoint(
            record.final, state.lam, basis, u, mean0,
            scheme=config.adjoint_scheme, source_mode=config.adjoint_source, ctx=ctx,
        )
        state.alpha = schedule_alpha(state.alpha, mu, config.eps1)
        M = assemble_M_series(record.states[:-1], basis)
        if config.debug:
            _check_positive_definite(M, k)
        p = assemble_p(record.states, adjoint, basis)

        row = IterationRecord(k, J, mu, state.lam, state.alpha, state.beta, rel)
        history.append(row)
        if on_iteration:
            on_iteration(row)
        logger.info("[ITER] k=%d J=%.6e mu=%.3e lambda=%.4g alpha=%.3g beta=%.4g rel_dJ=%.3e",
                    k, J, mu, state.lam, state.alpha, state.beta, rel)

        if k == config.max_iter - 1:
            break
        u = update_u(u, M, p, state.alpha)
        J_prev = J

    assert record is not None and baseline is not None
    if converged:
        _log_slackness(state, config.eps1)
    else:
        logger.warning("[ITER] 达到 max_iter=%d 仍未收敛: mu=%.3e lambda=%.4g",
                       config.max_iter, state.mu_hist[-1], state.lam)
    return OptimizeResult(
        converged=converged,
        controls=u,
        record=record,
        baseline=baseline,
        state=state,
        history=history,
        mean0=mean0,
        c0sq=c0sq,
        r=config.r,
        wall_time=time.monotonic() - started,
    )


def _check_positive_definite(M: np.ndarray, k: int) -> None:
    low = float(np.min(np.linalg.eigvalsh(M)))
    if low <= 0.0:
        raise SolverError(f"第 {k} 轮 M(t) 非正定: 最小特征值 {low:.3e}")
    logger.debug("[ITER] k=%d min eig(M)=%.3e", k, low)


def _log_slackness(state: OptimizerState, eps1: float) -> None:
    mu = state.mu_hist[-1]
    if state.lam > 0:
        logger.info("[ITER] 约束激活: lambda=%.4g |mu|=%.3e <= eps1", state.lam, abs(mu))
    else:
        logger.info("[ITER] 约束未激活: lambda=0 mu=%.3e", mu)


# ── 可行频率与混合速率 ───────────────────────────────────────


def feasibility_N(inp: FeasibilityInput) -> int:
    """N = ⌈(C₂‖θ₀−θ̄‖_{H¹}/(r‖θ₀−θ̄‖_{(H¹)′}))^{2/(1−3ε)} / t_f^{2/3}⌉，至少为 1。"""
    ratio = inp.c2 * inp.norm_h1 / (inp.r * inp.norm_dual)
    value = ratio ** (2.0 / (1.0 - 3.0 * inp.eps)) / inp.t_final ** (2.0 / 3.0)
    return max(1, math.ceil(value))


@dataclass(frozen=True, eq=False)
class RateRow:
    N: int
    times: np.ndarray
    ratios: np.ndarray              # ‖θ(t)−P_Nθ(t)‖_{(H¹)′}/‖θ₀−θ̄‖_{H¹}，扣除胞格平均
    exponent: float                 # −d log ratio / d log t，窗口内拟合
    in_kernel: bool
    total_ratios: np.ndarray        # ‖θ(t)−θ̄‖_{(H¹)′}/‖θ₀−θ̄‖_{H¹}，含不变的胞格平均


@dataclass(frozen=True, eq=False)
class RateStudy:
    rows: list[RateRow]
    scaled: bool
    t_final: float

    @property
    def final_ratios(self) -> list[float]:
        return [float(row.ratios[-1]) for row in self.rows]

    @property
    def monotone(self) -> bool:
        """末时刻比值随 N 严格递减。"""
        r = self.final_ratios
        return all(b < a for a, b in zip(r, r[1:]))


def _fit_exponent(times: np.ndarray, ratios: np.ndarray, window: tuple[float, float]) -> float:
    mask = (times >= window[0]) & (times <= window[1]) & (ratios > 0)
    if mask.sum() < 2:
        return float("nan")
    slope = np.polyfit(np.log(times[mask]), np.log(ratios[mask]), 1)[0]
    return float(-slope)


def mixable_mixnorm(theta: ScalarField, N: int, ctx: MixNormContext | None = None) -> float:
    """‖θ − P_N θ‖_{(H¹)′}，P_N 为 N×N 胞格平均；胞格平均在 b_N 下不变，不计入混合。"""
    return mix_norm(theta - cell_means(theta, N), ctx)


def _rate_one(N: int, theta0: ScalarField, tau: float, t_final: float, scaled: bool,
              samples: Sequence[float] | None) -> RateRow:
    grid = theta0.grid
    ctx = get_context(grid)
    basis = sample_basis(grid, (N,), scaled)
    amp = 1.0 if scaled else N * math.pi
    u = ControlTrajectory.constant([amp], tau, t_final)
    mean0 = mean(theta0)
    denom = h1_norm(theta0 - mean0)
    rec = solve_state(theta0, basis, u, mean0=mean0, ctx=ctx)
    ratios_all = np.array([
        mixable_mixnorm(rec.state(k), N, ctx) for k in range(rec.steps + 1)
    ]) / denom
    totals_all = np.sqrt(rec.mixnorm_series) / denom
    times_all = rec.times
    exponent = _fit_exponent(times_all, ratios_all, RATE_WINDOW)
    in_kernel = bool(ratios_all[0] == 0.0 or ratios_all[-1] / ratios_all[0] > KERNEL_RATIO)
    if in_kernel:
        logger.warning("[RATE] N=%d: 初值位于 b_N·∇ 的核内，混合不发生", N)
    idx = slice(None) if samples is None else [int(round(t / tau)) for t in samples]
    logger.info("[RATE] N=%d ratio(t_f)=%.6e total(t_f)=%.6e exponent=%.4f",
                N, ratios_all[-1], totals_all[-1], exponent)
    return RateRow(N, times_all[idx], ratios_all[idx], exponent, in_kernel, totals_all[idx])


def mixing_rate_study(
    N_list: Sequence[int],
    theta0: ScalarField,
    t_final: float = 1.0,
    tau: float = 0.005,
    samples: Sequence[float] | None = None,
    scaled: bool = True,
    workers: int | None = None,
) -> RateStudy:
    """对每个 N 以定常单位控制驱动 b_N，记录归一化 mix-norm 衰减并拟合指数。

    各 N 并发求解，结果按 N 排序。
    """
    initial_c0sq(theta0, mean(theta0))
    if samples is not None:
        bad = [t for t in samples if not (0.0 <= t <= t_final)
               or abs(round(t / tau) * tau - t) > 1e-9 * max(1.0, t)]
        if bad:
            raise ValueError(f"采样时间 {bad} 不在时间网格 kτ ⊂ [0, {t_final}] 上")
    Ns = sorted({int(n) for n in N_list})
    if not Ns or Ns[0] <= 0:
        raise ValueError(f"N 列表必须为正整数，收到 {list(N_list)}")
    with ThreadPoolExecutor(max_workers=workers or min(len(Ns), 4)) as pool:
        rows = list(pool.map(
            lambda n: _rate_one(n, theta0, tau, t_final, scaled, samples), Ns,
        ))
    study = RateStudy(rows, scaled, t_final)
    logger.info("[RATE] N=%s 末时刻比值随 N 单调递减: %s", Ns, study.monotone)
    return study


def calibrate_c2(study: RateStudy, eps: float) -> float:
    """由一次速率研究反解 C₂(ε) = max ratio·(N^{3/2}t)^{1/3−ε}（非缩放约定用 N²t）。"""
    if not (0.0 < eps < 1.0 / 3.0):
        raise ValueError(f"ε 必须在 (0, 1/3) 内，收到 ε={eps}")
    power = 1.5 if study.scaled else 2.0
    best = 0.0
    for row in study.rows:
        mask = row.times > 0
        scaled_t = (row.N ** power) * row.times[mask]
        if mask.any():
            best = max(best, float(np.max(row.ratios[mask] * scaled_t ** (1.0 / 3.0 - eps))))
    if best <= 0.0:
        raise ValueError("速率研究没有 t > 0 的样本，无法标定 C2")
    return best
