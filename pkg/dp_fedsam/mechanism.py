"""本地更新的裁剪、高斯加噪与稀疏化"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .models import ParamVector, Sparsifier

logger = logging.getLogger(__name__)


def clip_factor(delta: ParamVector, clip_threshold: float) -> float:
    """α = min(1, C / ||Δ||₂)；||Δ|| = 0 时为 1"""
    if clip_threshold <= 0:
        raise ValueError(f"裁剪阈值必须 > 0，实际为 {clip_threshold}")
    norm = float(np.linalg.norm(delta))
    if norm == 0.0:
        return 1.0
    return min(1.0, clip_threshold / norm)


def clip_update(delta: ParamVector, clip_threshold: float) -> ParamVector:
    """按 L2 范数裁剪到 C 以内，方向不变"""
    return delta * clip_factor(delta, clip_threshold)


def add_noise(
    delta: ParamVector,
    clip_threshold: float,
    noise_multiplier: float,
    sampled_count: int,
    rng: np.random.Generator,
) -> ParamVector:
    """加入 N(0, σ²C²/m · I_d) 噪声；σ=0 时原样返回"""
    if sampled_count < 1:
        raise ValueError(f"m 必须 >= 1，实际为 {sampled_count}")
    if noise_multiplier < 0:
        raise ValueError(f"噪声乘子必须 >= 0，实际为 {noise_multiplier}")
    if noise_multiplier == 0.0:
        return delta.copy()
    std = noise_multiplier * clip_threshold / np.sqrt(sampled_count)
    return delta + rng.normal(0.0, std, size=delta.shape)


def _check_k(k: int, dimension: int) -> None:
    if not 1 <= k <= dimension:
        raise ValueError(f"k 必须位于 [1, {dimension}]，实际为 {k}")


def topk_sparsify(delta: ParamVector, k: int) -> tuple[ParamVector, NDArray[np.bool_]]:
    """保留绝对值最大的 k 个坐标，并列时取下标较小者"""
    _check_k(k, delta.shape[0])
    # 稳定排序保证并列时下标小的在前
    order = np.argsort(-np.abs(delta), kind="stable")
    mask = np.zeros(delta.shape[0], dtype=bool)
    mask[order[:k]] = True
    return np.where(mask, delta, 0.0), mask


def randk_sparsify(delta: ParamVector, k: int, rng: np.random.Generator) -> ParamVector:
    """无放回均匀随机保留 k 个坐标"""
    _check_k(k, delta.shape[0])
    keep = rng.choice(delta.shape[0], size=k, replace=False)
    mask = np.zeros(delta.shape[0], dtype=bool)
    mask[keep] = True
    return np.where(mask, delta, 0.0)


@dataclass
class PrivatizedUpdate:
    """一个客户端上传前的处理结果"""
    pre_clip_norm: float
    clip_factor: float
    clipped: ParamVector
    transmitted: ParamVector
    mask: Optional[NDArray[np.bool_]] = None


def privatize(
    delta: ParamVector,
    clip_threshold: float,
    noise_multiplier: float,
    sampled_count: int,
    rng: np.random.Generator,
    sparsifier: Sparsifier = Sparsifier.NONE,
    k: Optional[int] = None,
    clip_enabled: bool = True,
) -> PrivatizedUpdate:
    """按顺序执行 裁剪 -> 加噪 -> 稀疏化 (Option I 或 II)"""
    norm = float(np.linalg.norm(delta))
    factor = clip_factor(delta, clip_threshold) if clip_enabled else 1.0
    clipped = delta * factor if clip_enabled else delta.copy()
    noised = add_noise(clipped, clip_threshold, noise_multiplier, sampled_count, rng)

    mask = None
    if sparsifier is Sparsifier.TOPK:
        transmitted, mask = topk_sparsify(noised, k if k is not None else noised.shape[0])
    elif sparsifier is Sparsifier.RANDK:
        transmitted = randk_sparsify(noised, k if k is not None else noised.shape[0], rng)
    else:
        transmitted = noised
    return PrivatizedUpdate(norm, factor, clipped, transmitted, mask)


def aggregate(updates: Sequence[ParamVector], sampled_count: int) -> ParamVector:
    """服务器端聚合 (1/m) Σ Δ̂_i，按给定顺序依次累加"""
    if sampled_count < 1:
        raise ValueError(f"m 必须 >= 1，实际为 {sampled_count}")
    if not updates:
        raise ValueError("没有可聚合的更新")
    total = np.zeros_like(updates[0])
    for update in updates:
        total = total + update
    return total / sampled_count
