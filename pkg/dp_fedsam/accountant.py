"""子采样高斯机制的 Rényi DP 核算与 (ε, δ) 转换"""

import dataclasses
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.polynomial.hermite import hermgauss
from numpy.typing import NDArray
from scipy import integrate, special

from .errors import PrivacyAccountingError

logger = logging.getLogger(__name__)

DEFAULT_ORDERS: tuple[float, ...] = tuple(
    sorted([1.25, 1.5, 1.75] + [float(a) for a in range(2, 65)] + [128.0, 256.0])
)

# 表格中的隐私预算档位
BUDGET_LEVELS: tuple[float, ...] = (4.0, 6.0, 8.0, 10.0)

_GH_NODES = (64, 128)
_GH_RTOL = 1e-12


@dataclass(frozen=True)
class RdpOrderGrid:
    """Rényi 阶 α 的网格"""
    orders: tuple[float, ...] = DEFAULT_ORDERS

    def __post_init__(self):
        orders = tuple(float(a) for a in self.orders)
        if any(a <= 1.0 for a in orders):
            raise ValueError("所有 Rényi 阶必须 > 1")
        if list(orders) != sorted(orders):
            raise ValueError("Rényi 阶必须升序排列")
        object.__setattr__(self, "orders", orders)

    def __len__(self) -> int:
        return len(self.orders)

    def as_array(self) -> NDArray[np.float64]:
        return np.asarray(self.orders, dtype=np.float64)


def _validate(q: float, sigma: float, alpha: float) -> None:
    if sigma <= 0:
        raise PrivacyAccountingError(
            "non-private mechanism: 噪声乘子 σ 必须 > 0", {"q": q, "sigma": sigma}
        )
    if not 0 < q <= 1:
        raise PrivacyAccountingError(f"采样率 q 必须位于 (0, 1]，实际为 {q}")
    if alpha <= 1:
        raise PrivacyAccountingError(f"Rényi 阶 α 必须 > 1，实际为 {alpha}")


def _log_moment_binomial(q: float, sigma: float, alpha: int) -> float:
    """整数 α: log E[(1-q+q μ₁/μ₀)^α] 的二项展开"""
    if q == 1.0:
        return alpha * (alpha - 1) / (2 * sigma**2)
    i = np.arange(alpha + 1, dtype=np.float64)
    log_terms = (
        special.gammaln(alpha + 1)
        - special.gammaln(i + 1)
        - special.gammaln(alpha - i + 1)
        + i * math.log(q)
        + (alpha - i) * math.log1p(-q)
        + (i * i - i) / (2 * sigma**2)
    )
    return float(special.logsumexp(log_terms))


def _log_integrand(z: NDArray, q: float, sigma: float, alpha: float) -> NDArray:
    """log[(1-q+q·μ₁(z)/μ₀(z))^α · μ₀(z)]，μ₀ = N(0,σ²)，μ₁ = N(1,σ²)"""
    log_ratio = (2.0 * z - 1.0) / (2.0 * sigma**2)
    with np.errstate(divide="ignore"):
        log1mq = np.log1p(-q)
    mixture = np.logaddexp(log1mq, math.log(q) + log_ratio)
    return alpha * mixture - z * z / (2.0 * sigma**2) - math.log(sigma * math.sqrt(2.0 * math.pi))


def _gauss_hermite(q: float, sigma: float, alpha: float, center: float, nodes: int) -> float:
    x, w = hermgauss(nodes)
    z = center + math.sqrt(2.0) * sigma * x
    values = np.log(w) + _log_integrand(z, q, sigma, alpha) + x * x
    return math.log(math.sqrt(2.0) * sigma) + float(special.logsumexp(values))


def _adaptive(q: float, sigma: float, alpha: float, grid: NDArray, log_peak: float, center: float) -> float:
    lo, hi = float(grid[0]), float(grid[-1])
    breakpoints = sorted({p for p in (0.0, center, alpha) if lo < p < hi})

    def scaled(z: float) -> float:
        return math.exp(float(_log_integrand(np.asarray(z), q, sigma, alpha)) - log_peak)

    value, abserr = integrate.quad(
        scaled, lo, hi, points=breakpoints or None, epsabs=0.0, epsrel=1e-13, limit=1000
    )
    if not math.isfinite(value) or value <= 0 or abserr > 1e-8 * value:
        raise PrivacyAccountingError(
            "RDP 积分不收敛",
            {"q": q, "sigma": sigma, "alpha": alpha, "value": value, "abserr": abserr,
             "interval": (lo, hi), "breakpoints": breakpoints},
        )
    return log_peak + math.log(value)


def _log_moment_quadrature(q: float, sigma: float, alpha: float) -> float:
    """任意实数 α 的数值积分: 先用以主峰为中心的 Gauss–Hermite，不收敛时退回自适应积分"""
    # 被积函数的峰位于 [0, α] 之间，窗口向右扩展到 α + 20σ
    grid = np.linspace(-20.0 * sigma, alpha + 20.0 * sigma, 4001)
    log_values = _log_integrand(grid, q, sigma, alpha)
    peak_index = int(np.argmax(log_values))
    center = float(grid[peak_index])
    log_peak = float(log_values[peak_index])

    coarse, fine = (_gauss_hermite(q, sigma, alpha, center, n) for n in _GH_NODES)
    if abs(coarse - fine) <= _GH_RTOL * max(1.0, abs(fine)):
        return fine
    logger.debug(
        f"Gauss–Hermite 未收敛 (q={q}, σ={sigma}, α={alpha}, 差={abs(coarse - fine):.3g})，改用自适应积分"
    )
    return _adaptive(q, sigma, alpha, grid, log_peak, center)


def rdp_one_round(q: float, sigma: float, alpha: float, method: str = "auto") -> float:
    """单轮子采样高斯机制在阶 α 下的 RDP

    Args:
        q: 客户端采样率
        sigma: 噪声乘子
        alpha: Rényi 阶 (> 1)
        method: "auto" (整数阶用二项展开，其余用积分)、"binomial" 或 "quadrature"

    Returns:
        (1/(α-1)) · log E_{z~μ₀}[(1-q+q μ₁(z)/μ₀(z))^α]
    """
    _validate(q, sigma, alpha)
    integer_order = float(alpha).is_integer()
    if method == "binomial" or (method == "auto" and integer_order):
        if not integer_order:
            raise PrivacyAccountingError(f"二项展开只适用于整数阶，实际为 {alpha}")
        log_moment = _log_moment_binomial(q, sigma, int(alpha))
    elif method in ("auto", "quadrature"):
        log_moment = _log_moment_quadrature(q, sigma, float(alpha))
    else:
        raise ValueError(f"未知的计算方法: {method}")
    return max(0.0, log_moment / (alpha - 1.0))


def compute_rdp(q: float, sigma: float, grid: Optional[RdpOrderGrid] = None) -> NDArray[np.float64]:
    grid = grid or RdpOrderGrid()
    return np.array([rdp_one_round(q, sigma, a) for a in grid.orders], dtype=np.float64)


@dataclass(frozen=True)
class PrivacyLedger:
    """按阶记录的每轮 RDP 成本与已执行轮数"""
    q: float
    sigma: float
    delta: float
    grid: RdpOrderGrid = field(default_factory=RdpOrderGrid)
    per_round_rdp: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))
    rounds_elapsed: int = 0

    @classmethod
    def create(
        cls, q: float, sigma: float, delta: float, grid: Optional[RdpOrderGrid] = None
    ) -> "PrivacyLedger":
        grid = grid or RdpOrderGrid()
        return cls(q, sigma, delta, grid, compute_rdp(q, sigma, grid), 0)

    @classmethod
    def non_private(cls, q: float, delta: float, grid: Optional[RdpOrderGrid] = None) -> "PrivacyLedger":
        """无噪声训练: 每个阶的成本均为无穷大，只用于计数"""
        grid = grid or RdpOrderGrid()
        return cls(q, 0.0, delta, grid, np.full(len(grid), np.inf), 0)

    @property
    def private(self) -> bool:
        return bool(np.all(np.isfinite(self.per_round_rdp)))

    @property
    def total_rdp(self) -> NDArray[np.float64]:
        """ε̄_T(α) = T · ε̄_1(α)"""
        if self.rounds_elapsed == 0:
            return np.zeros_like(self.per_round_rdp)
        return self.rounds_elapsed * self.per_round_rdp

    def step(self) -> "PrivacyLedger":
        return accumulate(self, 1)

    def spent(self, delta: Optional[float] = None) -> tuple[float, float]:
        return rdp_to_dp(self, self.delta if delta is None else delta)


def accumulate(ledger: PrivacyLedger, rounds: int) -> PrivacyLedger:
    """RDP 随轮数线性累加"""
    if rounds < 0:
        raise ValueError(f"轮数必须 >= 0，实际为 {rounds}")
    return dataclasses.replace(ledger, rounds_elapsed=ledger.rounds_elapsed + rounds)


def compute_epsilon(
    orders: Sequence[float], rdp: Sequence[float], delta: float
) -> tuple[float, float]:
    """ε = min_α { ε̄(α) + [(α-1)log(1-1/α) - log α - log δ]/(α-1) }

    Returns:
        (ε, 取得最小值的 α)
    """
    if not 0 < delta < 1:
        raise PrivacyAccountingError(f"δ 必须位于 (0, 1)，实际为 {delta}")
    if len(orders) == 0:
        raise PrivacyAccountingError("Rényi 阶网格为空")
    if len(orders) != len(rdp):
        raise PrivacyAccountingError("orders 与 rdp 长度不一致")

    alphas = np.asarray(orders, dtype=np.float64)
    values = np.asarray(rdp, dtype=np.float64)
    eps = values + np.log1p(-1.0 / alphas) - (np.log(alphas) + math.log(delta)) / (alphas - 1.0)
    best = int(np.argmin(eps))
    if np.isinf(eps[best]):
        return math.inf, float(alphas[best])
    if best == len(alphas) - 1 and len(alphas) > 1:
        logger.debug(f"最优阶位于网格上端 α={alphas[best]}，扩大网格可能得到更小的 ε")
    return max(0.0, float(eps[best])), float(alphas[best])


def rdp_to_dp(ledger: PrivacyLedger, delta: float) -> tuple[float, float]:
    """把账本中累计的 RDP 转换为 (ε, δ)-DP 的 ε；尚未执行任何轮次时 ε = 0"""
    if ledger.rounds_elapsed == 0:
        return 0.0, float(ledger.grid.orders[0])
    return compute_epsilon(ledger.grid.orders, ledger.total_rdp, delta)


def epsilon_curve(
    q: float,
    sigma: float,
    delta: float,
    rounds: Sequence[int],
    grid: Optional[RdpOrderGrid] = None,
) -> list[tuple[int, float, float]]:
    """(T, ε, 最优 α) 序列"""
    base = PrivacyLedger.create(q, sigma, delta, grid)
    return [(int(t), *rdp_to_dp(accumulate(base, int(t)), delta)) for t in rounds]


def rounds_for_epsilon(
    q: float,
    sigma: float,
    delta: float,
    target_epsilon: float,
    max_rounds: int = 100_000,
    grid: Optional[RdpOrderGrid] = None,
) -> Optional[int]:
    """满足 ε(T) <= target 的最大 T；T=1 即超出时返回 None，max_rounds 仍未超出时返回 max_rounds"""
    base = PrivacyLedger.create(q, sigma, delta, grid)

    def eps_at(t: int) -> float:
        return rdp_to_dp(accumulate(base, t), delta)[0]

    if eps_at(1) > target_epsilon:
        return None
    if eps_at(max_rounds) <= target_epsilon:
        return max_rounds
    lo, hi = 1, max_rounds
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if eps_at(mid) <= target_epsilon:
            lo = mid
        else:
            hi = mid
    return lo


def log_spaced_rounds(total: int, points: int = 10) -> list[int]:
    """[1, total] 上对数间隔的轮数前缀，总是包含 total"""
    if total <= 0:
        return []
    values = np.unique(np.round(np.logspace(0, math.log10(total), points)).astype(int))
    result = sorted({int(v) for v in values if 1 <= v <= total} | {total})
    return result
