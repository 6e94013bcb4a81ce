"""理论界计算器与经验敏感度探针"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from .config import OptimizerConfig
from .errors import BoundDomainError
from .models import ClientShard, Dataset, ModelSpec, OptimizerKind
from .network import init_params, loss_and_grad
from .optimizer import run_local_round

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SmoothnessEstimate:
    """L (光滑常数)、σ_l (局部梯度方差界)、B (梯度范数界)"""
    L: float
    sigma_l: float = 0.0
    B: float = 0.0

    def __post_init__(self):
        if not self.L > 0:
            raise BoundDomainError(f"L 必须 > 0，实际为 {self.L}")
        if self.sigma_l < 0 or self.B < 0:
            raise BoundDomainError("σ_l 与 B 必须 >= 0")


@dataclass(frozen=True)
class GenBoundInputs:
    """单轮 DP 保证与泛化界的输入"""
    N: int
    m: int
    rho: float
    sigma: float
    C: float
    d: int
    T: int
    delta_tilde: float

    def __post_init__(self):
        if self.N < 1 or self.m < 1 or self.d < 1 or self.T < 1:
            raise BoundDomainError("N、m、d、T 必须为正整数")
        if self.m > self.N:
            raise BoundDomainError(f"m ({self.m}) 不能大于 N ({self.N})")
        if self.rho < 0:
            raise BoundDomainError(f"ρ 必须 >= 0，实际为 {self.rho}")
        if self.sigma <= 0 or self.C <= 0:
            raise BoundDomainError("σ 与 C 必须 > 0")
        if not 0 < self.delta_tilde <= 1:
            raise BoundDomainError(f"δ̃ 必须位于 (0, 1]，实际为 {self.delta_tilde}")


# ---------------------------------------------------------------------------
# 敏感度上界
# ---------------------------------------------------------------------------

def sensitivity_bound_sam(eta: float, rho: float, K: int, L: float) -> float:
    """SAM 本地更新的期望平方敏感度上界

    6η²ρ²KL²(12K²L²η² + 10) / (1 - 2η²L²K)
    """
    if eta < 0 or rho < 0 or K < 1 or L <= 0:
        raise BoundDomainError("需要 η >= 0, ρ >= 0, K >= 1, L > 0")
    denominator = 1.0 - 2.0 * eta**2 * L**2 * K
    if denominator <= 0:
        raise BoundDomainError("step size too large for bound validity: 1 - 2η²L²K <= 0")
    return 6.0 * eta**2 * rho**2 * K * L**2 * (12.0 * K**2 * L**2 * eta**2 + 10.0) / denominator


def sensitivity_bound_sgd(eta: float, sigma_l: float, K: int, L: float) -> float:
    """SGD 本地更新的期望平方敏感度上界 6η²σ_l²K / (1 - 3η²KL²)"""
    if eta < 0 or sigma_l < 0 or K < 1 or L <= 0:
        raise BoundDomainError("需要 η >= 0, σ_l >= 0, K >= 1, L > 0")
    denominator = 1.0 - 3.0 * eta**2 * K * L**2
    if denominator <= 0:
        raise BoundDomainError("step size too large for bound validity: 1 - 3η²KL² <= 0")
    return 6.0 * eta**2 * sigma_l**2 * K / denominator


def scaled_bounds(
    T: int, K: int, L: float, sigma_l: float, eta_scale: float = 1.0, rho_scale: float = 1.0
) -> tuple[float, float]:
    """η = c_η/(L√(KT))、ρ = c_ρ/√T 时的 (SAM 界, SGD 界)"""
    eta = eta_scale / (L * math.sqrt(K * T))
    rho = rho_scale / math.sqrt(T)
    return sensitivity_bound_sam(eta, rho, K, L), sensitivity_bound_sgd(eta, sigma_l, K, L)


def sam_sgd_crossover(
    K: int,
    L: float,
    sigma_l: float,
    t_grid: Sequence[int] = (10, 100, 1_000, 10_000),
    eta_scale: float = 1.0,
    rho_scale: float = 1.0,
) -> Optional[int]:
    """T 网格上 SAM 界从此处开始一直小于 SGD 界的最小 T；不存在时返回 None"""
    crossover = None
    for T in sorted(t_grid):
        try:
            sam, sgd = scaled_bounds(T, K, L, sigma_l, eta_scale, rho_scale)
        except BoundDomainError:
            crossover = None
            continue
        if sam < sgd:
            crossover = T if crossover is None else crossover
        else:
            crossover = None
    return crossover


# ---------------------------------------------------------------------------
# 单轮 DP 保证与泛化界
# ---------------------------------------------------------------------------

def _noise_ratio(inp: GenBoundInputs, L: float) -> float:
    return L * inp.rho / (inp.sigma * inp.C * inp.d)


def gen_epsilon_tilde(inp: GenBoundInputs, L: float) -> float:
    """ε̃ = log((N-m)/N + (m/N)·exp(x√(2 log(1/δ̃)) + (√2 x)²))，x = Lρ/(σCd)"""
    if L <= 0:
        raise BoundDomainError(f"L 必须 > 0，实际为 {L}")
    x = _noise_ratio(inp, L)
    exponent = x * math.sqrt(2.0 * math.log(1.0 / inp.delta_tilde)) + (math.sqrt(2.0) * x) ** 2
    return math.log1p(inp.m / inp.N * math.expm1(exponent))


@dataclass(frozen=True)
class RoundDelta:
    """单轮 DP 保证中 δ 的化简结果"""
    delta: float
    t_star: float
    v_norm: float
    a: float
    b: float


def gen_delta(inp: GenBoundInputs, L: float) -> RoundDelta:
    """δ = min_t exp(-a t + b t²)，||v|| = 2Lρ/m，噪声逐坐标方差 σ²C²/m

    a = √2 ||v|| σCd √(log 1/δ̃) / m，b = ||v||² σ²C² / (2m)；
    解析最优 t* = a/(2b)，截断到 [1, T]。
    """
    if L <= 0:
        raise BoundDomainError(f"L 必须 > 0，实际为 {L}")
    v_norm = 2.0 * L * inp.rho / inp.m
    if v_norm == 0.0:
        return RoundDelta(0.0, 1.0, 0.0, 0.0, 0.0)
    scale = inp.sigma * inp.C
    a = math.sqrt(2.0) * v_norm * scale * inp.d * math.sqrt(math.log(1.0 / inp.delta_tilde)) / inp.m
    b = v_norm**2 * scale**2 / (2.0 * inp.m)
    t_star = min(max(a / (2.0 * b), 1.0), float(inp.T))
    return RoundDelta(math.exp(-a * t_star + b * t_star**2), t_star, v_norm, a, b)


def gen_composition(
    eps_tilde: float, round_delta: float, T: int, delta_tilde: float
) -> tuple[float, float]:
    """把单轮 (ε̃, δ) 组合到 T 轮，得到 (ε′, δ′)

    Args:
        eps_tilde: 单轮 ε̃
        round_delta: 单轮 δ (即 mδ/N)
        T: 轮数
        delta_tilde: δ̃
    """
    if T < 1:
        raise BoundDomainError(f"T 必须 >= 1，实际为 {T}")
    if eps_tilde < 0:
        raise BoundDomainError(f"ε̃ 必须 >= 0，实际为 {eps_tilde}")
    if not 0 < delta_tilde <= 1:
        raise BoundDomainError(f"δ̃ 必须位于 (0, 1]，实际为 {delta_tilde}")

    eps_prime = math.sqrt(2.0 * T * math.log(1.0 / delta_tilde) * eps_tilde**2) + T * eps_tilde * math.tanh(
        eps_tilde / 2.0
    )

    u = round_delta / (1.0 + math.exp(eps_tilde))
    if eps_tilde == 0.0:
        # ε̃=0 时 ⌈ε′/ε̃⌉ 取 0，首项不存在
        return 0.0, 2.0 - 2.0 * (1.0 - u) ** T

    total = T * eps_tilde
    if total > eps_prime:
        log_first = (
            -(eps_prime + total) / 2.0
            + T * (-math.log1p(math.exp(eps_tilde)) + math.log(2.0 * total) - math.log(total - eps_prime))
            - (eps_prime + total) / (2.0 * eps_tilde) * (math.log(total + eps_prime) - math.log(total - eps_prime))
        )
        first = math.exp(log_first)
    else:
        logger.warning(f"Tε̃={total:.4g} <= ε′={eps_prime:.4g}，δ′ 的首项无定义，按 0 处理")
        first = 0.0

    steps = math.ceil(eps_prime / eps_tilde)
    delta_prime = (
        first
        + 2.0
        - (1.0 - math.exp(eps_tilde) * u) ** steps * (1.0 - u) ** (T - steps)
        - (1.0 - u) ** T
    )
    return eps_prime, delta_prime


def generalization_gap_bound(eps_prime: float, delta_prime: float) -> tuple[float, float]:
    """P[|R̂_S - R_D| < 4ε′] > 1 - (2e^{-1.7ε′}δ′/ε′)·ln(2/ε′)

    Returns:
        (gap = 4ε′, 置信度)
    """
    if not eps_prime > 0:
        raise BoundDomainError(f"ε′ 必须 > 0，实际为 {eps_prime}")
    gap = 4.0 * eps_prime
    if eps_prime >= 2.0:
        logger.warning(f"ε′={eps_prime:.4g} >= 2 时 ln(2/ε′) <= 0，置信度按 1 处理")
        return gap, 1.0
    confidence = 1.0 - 2.0 * math.exp(-1.7 * eps_prime) * delta_prime / eps_prime * math.log(2.0 / eps_prime)
    return gap, min(1.0, max(0.0, confidence))


def sample_size_requirement(eps_prime: float, delta_prime: float) -> float:
    """泛化界要求的 N >= (2/ε′²) ln(16/(e^{-ε′}δ′))"""
    if eps_prime <= 0 or delta_prime <= 0:
        return math.inf if eps_prime <= 0 else 0.0
    return 2.0 / eps_prime**2 * (math.log(16.0 / delta_prime) + eps_prime)


@dataclass
class GeneralizationReport:
    """单轮 DP 保证、T 轮组合与泛化界的汇总"""
    inputs: GenBoundInputs
    L: float
    eps_tilde: float
    round_delta: RoundDelta
    eps_prime: float
    delta_prime: float
    gap: Optional[float]
    confidence: Optional[float]
    required_n: float
    valid_sample_size: bool


def generalization_report(inp: GenBoundInputs, L: float) -> GeneralizationReport:
    eps_tilde = gen_epsilon_tilde(inp, L)
    delta = gen_delta(inp, L)
    eps_prime, delta_prime = gen_composition(eps_tilde, inp.m / inp.N * delta.delta, inp.T, inp.delta_tilde)
    gap = confidence = None
    if eps_prime > 0:
        gap, confidence = generalization_gap_bound(eps_prime, delta_prime)
    required = sample_size_requirement(eps_prime, delta_prime)
    return GeneralizationReport(
        inputs=inp,
        L=L,
        eps_tilde=eps_tilde,
        round_delta=delta,
        eps_prime=eps_prime,
        delta_prime=delta_prime,
        gap=gap,
        confidence=confidence,
        required_n=required,
        valid_sample_size=inp.N >= required,
    )


# ---------------------------------------------------------------------------
# 经验估计
# ---------------------------------------------------------------------------

def estimate_smoothness(
    spec: ModelSpec,
    dataset: Dataset,
    probes: int = 16,
    radius: float = 0.1,
    batch_size: int = 32,
    seed: int = 0,
) -> SmoothnessEstimate:
    """启发式估计 L、σ_l、B

    L 取随机探针对上 ||∇f(w)-∇f(w′)|| / ||w-w′|| 的最大值；σ_l 取小批量梯度
    相对全量梯度的均方根偏差的最大值；B 取全量梯度范数的最大值。
    """
    rng = np.random.default_rng(seed)
    full = dataset.batch()
    L = sigma_l = B = 0.0
    for probe in range(probes):
        w = init_params(spec, int(rng.integers(0, 2**31)))
        direction = rng.normal(size=w.shape)
        w2 = w + radius * direction / np.linalg.norm(direction)
        _, g1 = loss_and_grad(w, full, spec)
        _, g2 = loss_and_grad(w2, full, spec)
        L = max(L, float(np.linalg.norm(g1 - g2) / np.linalg.norm(w - w2)))
        B = max(B, float(np.linalg.norm(g1)))

        deviations = []
        for _ in range(8):
            picks = rng.integers(0, len(dataset), size=batch_size)
            _, g = loss_and_grad(w, dataset.batch(picks), spec)
            deviations.append(float(np.sum((g - g1) ** 2)))
        sigma_l = max(sigma_l, math.sqrt(float(np.mean(deviations))))
        logger.debug(f"探针 {probe}: L≈{L:.4g} σ_l≈{sigma_l:.4g} B≈{B:.4g}")
    return SmoothnessEstimate(L=max(L, np.finfo(float).tiny), sigma_l=sigma_l, B=B)


@dataclass
class SensitivityTask:
    """经验敏感度探针所用的任务"""
    dataset: Dataset
    spec: ModelSpec
    shard_size: int = 64
    # False 时相邻分片完全相同 (零差异对照)
    differ: bool = True


@dataclass
class SensitivityReport:
    mean_sq_sam: float
    mean_sq_sgd: float
    samples_sam: NDArray[np.float64] = field(repr=False)
    samples_sgd: NDArray[np.float64] = field(repr=False)

    @property
    def ratio(self) -> Optional[float]:
        """SAM 与 SGD 平均平方敏感度之比；SGD 为 0 时返回 None"""
        if self.mean_sq_sgd == 0.0:
            return None
        return self.mean_sq_sam / self.mean_sq_sgd

    def sam_not_larger(self, confidence: float = 0.95) -> bool:
        """配对单侧检验: 不能在给定置信度下断言 SAM 的均值大于 SGD"""
        diffs = self.samples_sam - self.samples_sgd
        if len(diffs) < 2 or np.all(diffs == diffs[0]):
            return bool(np.mean(diffs) <= 0)
        result = stats.ttest_rel(self.samples_sam, self.samples_sgd, alternative="greater")
        return bool(result.pvalue > 1.0 - confidence)


def empirical_sensitivity(
    task: SensitivityTask,
    cfg: OptimizerConfig,
    trials: int,
    seed: int = 0,
) -> SensitivityReport:
    """相邻分片 (只差一个样本) 上 SAM 与 SGD 本地更新差的平均平方范数

    每次试验中两种优化器共用同一个初始模型和同一个随机种子。
    """
    if trials < 1:
        raise ValueError(f"trials 必须 >= 1，实际为 {trials}")
    n = len(task.dataset)
    if task.shard_size + 1 > n:
        raise ValueError("数据集太小，无法构造相邻分片")

    rng = np.random.default_rng(seed)
    sam_cfg = cfg.model_copy(update={"kind": OptimizerKind.SAM})
    sgd_cfg = cfg.model_copy(update={"kind": OptimizerKind.SGD})
    samples = {OptimizerKind.SAM: [], OptimizerKind.SGD: []}

    for trial in range(trials):
        chosen = rng.choice(n, size=task.shard_size + 1, replace=False)
        x_indices = chosen[:-1].copy()
        y_indices = x_indices.copy()
        if task.differ:
            y_indices[int(rng.integers(0, task.shard_size))] = chosen[-1]
        shard_x = ClientShard(0, x_indices)
        shard_y = ClientShard(0, y_indices)
        w0 = init_params(task.spec, int(rng.integers(0, 2**31)))
        run_seed = int(rng.integers(0, 2**31))

        for kind, local_cfg in ((OptimizerKind.SAM, sam_cfg), (OptimizerKind.SGD, sgd_cfg)):
            dx, _ = run_local_round(w0, shard_x, task.dataset, local_cfg, task.spec, run_seed)
            dy, _ = run_local_round(w0, shard_y, task.dataset, local_cfg, task.spec, run_seed)
            samples[kind].append(float(np.sum((dx - dy) ** 2)))
        logger.debug(
            f"试验 {trial}: SAM={samples[OptimizerKind.SAM][-1]:.4g} SGD={samples[OptimizerKind.SGD][-1]:.4g}"
        )

    sam = np.asarray(samples[OptimizerKind.SAM])
    sgd = np.asarray(samples[OptimizerKind.SGD])
    return SensitivityReport(float(sam.mean()), float(sgd.mean()), sam, sgd)
