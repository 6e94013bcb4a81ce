"""事后诊断: 更新范数分布、裁剪因子序列、损失地形切片与扰动鲁棒性"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Union

import numpy as np
from numpy.typing import NDArray

from .models import Batch, Dataset, ModelSpec, ParamVector, RoundRecord
from .network import evaluate

logger = logging.getLogger(__name__)

LossFn = Callable[[ParamVector], float]
EvalSet = Union[Dataset, Batch]


@dataclass
class NormHistogram:
    counts: NDArray[np.int64]
    edges: NDArray[np.float64]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _require_records(records: Sequence[RoundRecord]) -> None:
    if not records:
        raise ValueError("没有可分析的轮次记录")


def norm_histogram(records: Sequence[RoundRecord], bins: int = 20) -> NormHistogram:
    """所有 (轮次, 客户端) 对上裁剪前 ||Δ_i^t|| 的直方图"""
    _require_records(records)
    if bins < 1:
        raise ValueError(f"bins 必须 >= 1，实际为 {bins}")
    norms = np.concatenate([np.asarray(r.update_norms, dtype=np.float64) for r in records])
    counts, edges = np.histogram(norms, bins=bins)
    return NormHistogram(counts.astype(np.int64), edges)


def average_norm_series(records: Sequence[RoundRecord]) -> list[tuple[int, float]]:
    """每轮裁剪前范数的均值 Δ̄^t"""
    _require_records(records)
    return [(r.round, r.mean_update_norm) for r in records]


def time_averaged_norm(records: Sequence[RoundRecord]) -> float:
    return float(np.mean([value for _, value in average_norm_series(records)]))


def clip_factor_series(records: Sequence[RoundRecord]) -> list[tuple[int, float, float]]:
    """(t, ᾱ^t, α̃^t)"""
    _require_records(records)
    return [(r.round, r.mean_clip_factor, r.clip_factor_deviation) for r in records]


@dataclass
class LandscapeGrid:
    """二维损失地形切片: losses[i, j] 对应 center + a_i·u + b_j·v"""
    center: ParamVector
    direction_u: ParamVector
    direction_v: ParamVector
    coords: NDArray[np.float64]
    losses: NDArray[np.float64]

    @property
    def center_index(self) -> int:
        return len(self.coords) // 2

    @property
    def center_loss(self) -> float:
        i = self.center_index
        return float(self.losses[i, i])

    def rows(self) -> list[tuple[float, float, float]]:
        """(a, b, loss) 行"""
        return [
            (float(a), float(b), float(self.losses[i, j]))
            for i, a in enumerate(self.coords)
            for j, b in enumerate(self.coords)
        ]


def filter_normalized_direction(
    params: ParamVector, blocks: Sequence[slice], rng: np.random.Generator
) -> ParamVector:
    """随机高斯方向，按块缩放到与参数块相同的范数 (MLP 的逐层归一化)"""
    direction = rng.normal(size=params.shape)
    for block in blocks:
        norm = float(np.linalg.norm(direction[block]))
        if norm > 0:
            direction[block] *= float(np.linalg.norm(params[block])) / norm
    return direction


def _grid_coords(grid_half_width: float, resolution: int) -> NDArray[np.float64]:
    if resolution < 3 or resolution % 2 == 0:
        raise ValueError(f"resolution 必须是 >= 3 的奇数，实际为 {resolution}")
    if grid_half_width < 0:
        raise ValueError(f"grid_half_width 必须 >= 0，实际为 {grid_half_width}")
    coords = np.linspace(-grid_half_width, grid_half_width, resolution)
    coords[resolution // 2] = 0.0
    return coords


def landscape_slice_fn(
    loss_fn: LossFn,
    params: ParamVector,
    blocks: Sequence[slice],
    grid_half_width: float,
    resolution: int,
    seed: int,
) -> LandscapeGrid:
    """对任意损失函数求二维切片"""
    coords = _grid_coords(grid_half_width, resolution)
    rng = np.random.default_rng(seed)
    u = filter_normalized_direction(params, blocks, rng)
    v = filter_normalized_direction(params, blocks, rng)

    losses = np.empty((resolution, resolution))
    for i, a in enumerate(coords):
        for j, b in enumerate(coords):
            losses[i, j] = loss_fn(params + a * u + b * v)
    logger.debug(f"地形切片: 半宽 {grid_half_width}, 分辨率 {resolution}, 中心损失 {losses[resolution // 2, resolution // 2]:.6g}")
    return LandscapeGrid(params.copy(), u, v, coords, losses)


def _as_batch(eval_set: EvalSet) -> Batch:
    return eval_set.batch() if isinstance(eval_set, Dataset) else eval_set


def _model_loss(spec: ModelSpec, eval_set: EvalSet) -> LossFn:
    batch = _as_batch(eval_set)
    return lambda w: evaluate(w, batch, spec)[1]


def _spec_blocks(spec: ModelSpec) -> list[slice]:
    return [s for pair in spec.blocks() for s in pair]


def landscape_slice(
    params: ParamVector,
    spec: ModelSpec,
    eval_set: EvalSet,
    grid_half_width: float = 1.0,
    resolution: int = 21,
    seed: int = 0,
) -> LandscapeGrid:
    """模型在评估集上的损失地形切片，权重与偏置分块归一化"""
    return landscape_slice_fn(
        _model_loss(spec, eval_set), params, _spec_blocks(spec), grid_half_width, resolution, seed
    )


def perturbation_robustness_fn(
    loss_fn: LossFn,
    params: ParamVector,
    radii: Sequence[float],
    trials: int,
    seed: int,
) -> list[tuple[float, float]]:
    """各半径 r 下随机单位方向扰动带来的平均损失增量

    每次试验在 ±u 两个对称方向上取平均，所有半径共用同一组方向。
    """
    if trials < 1:
        raise ValueError(f"trials 必须 >= 1，实际为 {trials}")
    if any(r < 0 for r in radii):
        raise ValueError("扰动半径必须 >= 0")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(trials, params.shape[0]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    base = loss_fn(params)
    result = []
    for r in radii:
        if r == 0:
            result.append((float(r), 0.0))
            continue
        increases = [
            0.5 * (loss_fn(params + r * u) + loss_fn(params - r * u)) - base for u in directions
        ]
        result.append((float(r), float(np.mean(increases))))
    return result


def perturbation_robustness(
    params: ParamVector,
    spec: ModelSpec,
    eval_set: EvalSet,
    radii: Sequence[float],
    trials: int,
    seed: int = 0,
) -> list[tuple[float, float]]:
    return perturbation_robustness_fn(_model_loss(spec, eval_set), params, radii, trials, seed)
