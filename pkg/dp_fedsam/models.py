"""数据模型定义"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from numpy.typing import NDArray

# 扁平参数向量 (长度 d, float64)，模块之间传递的通用载体
ParamVector = NDArray[np.float64]


class Activation(Enum):
    """隐藏层激活函数"""
    RELU = "relu"
    TANH = "tanh"


class OptimizerKind(Enum):
    """本地优化器类型"""
    SGD = "sgd"
    SAM = "sam"


class Sparsifier(Enum):
    """上传前的稀疏化方式"""
    NONE = "none"
    TOPK = "topk"
    RANDK = "randk"


class Variant(Enum):
    """联邦算法变体"""
    DP_FEDAVG = "dp_fedavg"
    DP_FEDSAM = "dp_fedsam"
    DP_FEDSAM_TOPK = "dp_fedsam_topk"
    DP_FEDSAM_RANDK = "dp_fedsam_randk"
    FED_SMP_TOPK = "fed_smp_topk"
    FED_SMP_RANDK = "fed_smp_randk"
    FEDAVG_NOISELESS = "fedavg_noiseless"

    @property
    def private(self) -> bool:
        return self is not Variant.FEDAVG_NOISELESS

    @property
    def optimizer_kind(self) -> Optional[OptimizerKind]:
        """变体决定的优化器；None 表示沿用配置中的 optimizer.kind"""
        return {
            Variant.DP_FEDAVG: OptimizerKind.SGD,
            Variant.DP_FEDSAM: OptimizerKind.SAM,
            Variant.DP_FEDSAM_TOPK: OptimizerKind.SAM,
            Variant.DP_FEDSAM_RANDK: OptimizerKind.SAM,
            Variant.FED_SMP_TOPK: OptimizerKind.SGD,
            Variant.FED_SMP_RANDK: OptimizerKind.SGD,
        }.get(self)

    @property
    def sparsifier(self) -> Sparsifier:
        if self in (Variant.DP_FEDSAM_TOPK, Variant.FED_SMP_TOPK):
            return Sparsifier.TOPK
        if self in (Variant.DP_FEDSAM_RANDK, Variant.FED_SMP_RANDK):
            return Sparsifier.RANDK
        return Sparsifier.NONE


@dataclass(frozen=True)
class ModelSpec:
    """MLP 结构: (输入维度, 隐藏层..., 类别数)"""
    layer_sizes: tuple[int, ...]
    activation: Activation = Activation.RELU

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError(f"layer_sizes 至少需要 2 项，实际为 {list(sizes)}")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer_sizes 中的每一项都必须 >= 1: {list(sizes)}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """每层的 (fan_in, fan_out)"""
        return list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def parameter_count(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_shapes)

    def blocks(self) -> list[tuple[slice, slice]]:
        """每层 (权重切片, 偏置切片)，布局为 W_0, b_0, W_1, b_1, ..."""
        result = []
        offset = 0
        for fan_in, fan_out in self.layer_shapes:
            w = slice(offset, offset + fan_in * fan_out)
            offset = w.stop
            b = slice(offset, offset + fan_out)
            offset = b.stop
            result.append((w, b))
        return result


@dataclass
class Batch:
    """一批样本"""
    features: NDArray[np.float64]
    labels: NDArray[np.int64]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features 必须是二维矩阵，实际维度 {self.features.ndim}")
        if self.features.shape[0] < 1:
            raise ValueError("batch 至少需要 1 个样本")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"features 行数 ({self.features.shape[0]}) 与 labels 数量 ({self.labels.shape[0]}) 不一致"
            )
        if self.labels.min() < 0:
            raise ValueError(f"标签必须 >= 0，实际最小值为 {int(self.labels.min())}")

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class Dataset:
    """带标签的数据集"""
    features: NDArray[np.float64]
    labels: NDArray[np.int64]
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("数据集至少需要 1 个样本且 features 为二维矩阵")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features 行数与 labels 数量不一致")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"标签必须位于 [0, {self.class_count}) 区间内")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dims(self) -> int:
        return int(self.features.shape[1])

    def batch(self, indices: Optional[NDArray[np.int64]] = None) -> Batch:
        """按索引取出一个 Batch；不传索引时返回全部样本"""
        if indices is None:
            return Batch(self.features, self.labels)
        return Batch(self.features[indices], self.labels[indices])

    def subset(self, indices: NDArray[np.int64]) -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices], self.class_count)

    def label_histogram(self, indices: Optional[NDArray[np.int64]] = None) -> NDArray[np.int64]:
        labels = self.labels if indices is None else self.labels[indices]
        return np.bincount(labels, minlength=self.class_count)


@dataclass
class ClientShard:
    """单个客户端持有的样本 (父数据集中的索引)"""
    client_id: int
    indices: NDArray[np.int64]

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.indices.shape[0])


@dataclass
class RoundRecord:
    """单轮通信的指标"""
    round: int
    sampled_client_ids: list[int] = field(default_factory=list)
    update_norms: list[float] = field(default_factory=list)  # 裁剪前 ||Δ_i^t||
    clip_factors: list[float] = field(default_factory=list)  # α_i^t
    mean_clip_factor: float = 1.0  # ᾱ^t
    clip_factor_deviation: float = 0.0  # α̃^t
    epsilon: float = 0.0
    train_accuracy: Optional[float] = None
    train_loss: Optional[float] = None
    test_accuracy: Optional[float] = None
    test_loss: Optional[float] = None

    @property
    def mean_update_norm(self) -> float:
        return float(np.mean(self.update_norms)) if self.update_norms else 0.0

    @property
    def evaluated(self) -> bool:
        return self.test_accuracy is not None
