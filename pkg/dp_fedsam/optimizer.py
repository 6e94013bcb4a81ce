"""本地训练: K 步 SGD 或 SAM，返回本地更新 Δ_i^t"""

import logging
from collections.abc import Callable
from typing import Optional, Union

import numpy as np

from .config import OptimizerConfig
from .errors import NumericalError
from .models import Batch, ClientShard, Dataset, ModelSpec, OptimizerKind, ParamVector
from .network import loss_and_grad

logger = logging.getLogger(__name__)

# (params) -> (loss, grad)
Objective = Callable[[ParamVector], tuple[float, ParamVector]]

SeedLike = Union[int, np.random.SeedSequence]


def sam_perturbation(grad: ParamVector, rho: float) -> ParamVector:
    """δ(w) = ρ g / ||g||₂；梯度为零或 ρ=0 时返回零向量"""
    if rho < 0:
        raise ValueError(f"rho 必须 >= 0，实际为 {rho}")
    norm = float(np.linalg.norm(grad))
    if rho == 0.0 or norm == 0.0:
        return np.zeros_like(grad)
    return grad * (rho / norm)


def perturbed_gradient(objective: Objective, params: ParamVector, rho: float) -> tuple[float, ParamVector]:
    """在 params + δ(params) 处求梯度，返回 (扰动点损失, 梯度)"""
    value, grad = objective(params)
    if rho == 0.0:
        return value, grad
    epsilon = sam_perturbation(grad, rho)
    return objective(params + epsilon)


def sam_gradient(params: ParamVector, batch: Batch, rho: float, spec: ModelSpec) -> ParamVector:
    """SAM 梯度 g̃ = ∇F(w + δ(w); ξ)"""
    _, grad = perturbed_gradient(lambda w: loss_and_grad(w, batch, spec), params, rho)
    return grad


def run_local_round(
    global_params: ParamVector,
    shard: ClientShard,
    dataset: Dataset,
    cfg: OptimizerConfig,
    spec: ModelSpec,
    rng_seed: SeedLike,
    learning_rate: Optional[float] = None,
) -> tuple[ParamVector, list[float]]:
    """执行一个客户端一轮的本地训练

    Args:
        global_params: 本轮全局模型 w^t
        shard: 客户端分片
        dataset: 分片索引所指向的父数据集
        cfg: 本地优化器配置
        spec: 模型结构
        rng_seed: 本轮本客户端的随机种子 (或 SeedSequence)
        learning_rate: 覆盖 cfg.learning_rate (学习率衰减时由调用方传入)

    Returns:
        (Δ = w^{t,K} - w^t, 每步的损失)
    """
    if len(shard) == 0:
        raise ValueError(f"客户端 {shard.client_id} 的分片为空")

    eta = cfg.learning_rate if learning_rate is None else learning_rate
    rng = np.random.default_rng(rng_seed)
    rho = cfg.rho if cfg.kind is OptimizerKind.SAM else 0.0

    w = global_params.copy()
    velocity = np.zeros_like(w) if cfg.momentum > 0 else None
    trace: list[float] = []
    max_grad_norm = 0.0

    for _ in range(cfg.local_steps):
        if cfg.full_batch:
            batch = dataset.batch(shard.indices)
        else:
            # 分片内有放回均匀采样
            picks = rng.integers(0, len(shard), size=cfg.batch_size)
            batch = dataset.batch(shard.indices[picks])

        value, grad = perturbed_gradient(lambda p: loss_and_grad(p, batch, spec), w, rho)
        trace.append(value)
        max_grad_norm = max(max_grad_norm, float(np.linalg.norm(grad)))

        if velocity is not None:
            velocity = cfg.momentum * velocity + grad
            w = w - eta * velocity
        else:
            w = w - eta * grad

    delta = w - global_params
    if not np.all(np.isfinite(delta)):
        raise NumericalError(f"客户端 {shard.client_id} 的本地更新出现非有限值")

    # 三角不等式: ||Δ|| <= η K max||g|| / (1 - momentum)
    limit = eta * cfg.local_steps * max_grad_norm / (1.0 - cfg.momentum)
    delta_norm = float(np.linalg.norm(delta))
    if delta_norm > limit * (1.0 + 1e-9) + 1e-12:
        raise NumericalError(
            f"客户端 {shard.client_id} 的更新范数 {delta_norm:.6g} 超过步长上界 {limit:.6g}"
        )

    logger.debug(
        f"客户端 {shard.client_id}: {cfg.kind.value} K={cfg.local_steps} "
        f"||Δ||={delta_norm:.4g} 末步损失={trace[-1]:.4g}"
    )
    return delta, trace
