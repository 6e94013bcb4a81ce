"""可微分 MLP 分类器 (扁平参数向量 + 解析梯度)"""

import logging
from collections.abc import Sequence
from typing import Union

import numpy as np
from numpy.typing import NDArray

from .errors import ModelError
from .models import Activation, Batch, ModelSpec, ParamVector

logger = logging.getLogger(__name__)


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """初始化全局模型 w^0

    每层权重与偏置均从 U(-1/sqrt(fan_in), 1/sqrt(fan_in)) 采样。
    """
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in spec.layer_shapes:
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return np.concatenate(chunks)


def unflatten(params: ParamVector, spec: ModelSpec) -> list[tuple[NDArray, NDArray]]:
    """把扁平向量切分成每层的 (W, b) 视图"""
    if params.shape != (spec.parameter_count,):
        raise ValueError(
            f"参数长度 {params.shape} 与模型参数量 {spec.parameter_count} 不一致"
        )
    layers = []
    for (fan_in, fan_out), (w, b) in zip(spec.layer_shapes, spec.blocks()):
        layers.append((params[w].reshape(fan_in, fan_out), params[b]))
    return layers


def _activate(z: NDArray, activation: Activation) -> NDArray:
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z: NDArray, a: NDArray, activation: Activation) -> NDArray:
    if activation is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def _check_finite(values: NDArray, layer: int, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise ModelError(f"{what} 出现非有限值，可能发生数值溢出", layer=layer)


def _forward(params: ParamVector, features: NDArray, spec: ModelSpec):
    """前向传播，返回 logits 以及反向传播需要的中间量"""
    layers = unflatten(params, spec)
    memory = []
    a = features
    last = len(layers) - 1
    for i, (weight, bias) in enumerate(layers):
        z = a @ weight + bias
        _check_finite(z, i, "前向传播")
        memory.append((a, z))
        a = z if i == last else _activate(z, spec.activation)
    return a, memory


def _cross_entropy(logits: NDArray, labels: NDArray) -> tuple[NDArray, NDArray]:
    """逐样本交叉熵与 softmax 概率 (减去最大值保证数值稳定)"""
    shift = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - shift)
    total = exp.sum(axis=1, keepdims=True)
    log_norm = shift[:, 0] + np.log(total[:, 0])
    losses = log_norm - logits[np.arange(labels.shape[0]), labels]
    return losses, exp / total


def forward(params: ParamVector, features: NDArray, spec: ModelSpec) -> NDArray:
    """计算 logits"""
    logits, _ = _forward(params, np.asarray(features, dtype=np.float64), spec)
    return logits


def loss(params: ParamVector, batch: Batch, spec: ModelSpec) -> float:
    """batch 上的平均交叉熵 (不计算梯度)"""
    logits, _ = _forward(params, batch.features, spec)
    losses, _ = _cross_entropy(logits, batch.labels)
    return float(losses.mean())


def loss_and_grad(params: ParamVector, batch: Batch, spec: ModelSpec) -> tuple[float, ParamVector]:
    """平均交叉熵及其对扁平参数的解析梯度"""
    if batch.features.shape[1] != spec.input_dim:
        raise ValueError(
            f"特征维度 {batch.features.shape[1]} 与模型输入维度 {spec.input_dim} 不一致"
        )
    logits, memory = _forward(params, batch.features, spec)
    losses, probs = _cross_entropy(logits, batch.labels)
    n = batch.labels.shape[0]

    dz = probs
    dz[np.arange(n), batch.labels] -= 1.0
    dz /= n

    layers = unflatten(params, spec)
    grad = np.empty_like(params)
    blocks = spec.blocks()
    for i in range(len(layers) - 1, -1, -1):
        a_prev, _ = memory[i]
        weight, _ = layers[i]
        w_slice, b_slice = blocks[i]
        grad[w_slice] = (a_prev.T @ dz).ravel()
        grad[b_slice] = dz.sum(axis=0)
        if i > 0:
            _, z_prev = memory[i - 1]
            dz = (dz @ weight.T) * _activate_grad(z_prev, a_prev, spec.activation)
        _check_finite(grad[w_slice], i, "反向传播")

    value = float(losses.mean())
    if not np.isfinite(value):
        raise ModelError("损失出现非有限值", layer=len(layers) - 1)
    return value, grad


def evaluate(
    params: ParamVector,
    dataset: Union[Batch, Sequence[Batch]],
    spec: ModelSpec,
) -> tuple[float, float]:
    """计算 (准确率, 平均损失)

    预测取 argmax，并列时取编号最小的类别。
    """
    batches = [dataset] if isinstance(dataset, Batch) else list(dataset)
    if not batches:
        raise ValueError("评估数据集不能为空")

    correct = 0
    total = 0
    loss_sum = 0.0
    for batch in batches:
        logits, _ = _forward(params, batch.features, spec)
        losses, _ = _cross_entropy(logits, batch.labels)
        correct += int(np.sum(np.argmax(logits, axis=1) == batch.labels))
        total += len(batch)
        loss_sum += float(losses.sum())
    return correct / total, loss_sum / total
