"""合成数据生成、CSV 读写与 Dirichlet Non-IID 划分"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .config import DataConfig, PartitionConfig
from .errors import DataFormatError, PartitionError
from .models import ClientShard, Dataset

logger = logging.getLogger(__name__)


def synth_dataset(classes: int, dims: int, n: int, separation: float, seed: int) -> Dataset:
    """高斯混合数据: 类别 c 的中心为 separation·u_c (u_c 为单位向量)，协方差为单位阵，类别均衡"""
    if classes < 2:
        raise ValueError(f"classes 必须 >= 2，实际为 {classes}")
    if n < classes:
        raise ValueError(f"n ({n}) 不能小于 classes ({classes})")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(classes, dims))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    labels = np.arange(n, dtype=np.int64) % classes
    rng.shuffle(labels)
    features = separation * directions[labels] + rng.normal(size=(n, dims))
    return Dataset(features, labels, classes)


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """按种子固定的随机划分"""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction 必须位于 (0, 1)，实际为 {test_fraction}")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_test = min(len(ds) - 1, max(1, int(round(test_fraction * len(ds)))))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


def _largest_remainder(count: int, weights: NDArray[np.float64], offset: int) -> NDArray[np.int64]:
    """按权重把 count 个名额分给各客户端 (最大余数法)

    余数相同时从 offset 开始轮转，避免总是偏向编号小的客户端。
    """
    quotas = count * weights
    base = np.floor(quotas).astype(np.int64)
    remainder = count - int(base.sum())
    if remainder > 0:
        fractions = quotas - base
        rotation = (np.arange(len(weights)) - offset) % len(weights)
        order = np.lexsort((rotation, -fractions))
        base[order[:remainder]] += 1
    return base


def dirichlet_partition(ds: Dataset, cfg: PartitionConfig) -> list[ClientShard]:
    """按 Dir(α) 标签比例把样本无放回地分给 M 个客户端

    每个客户端先从 Dir(α) 抽取类别比例向量，再对每个类别按这些比例做最大余数分配。
    iid 时所有客户端的比例相同。空分片从最大的分片借一个样本。
    """
    M = cfg.num_clients
    n = len(ds)
    if M > n:
        raise PartitionError(f"客户端数 M={M} 大于样本数 N={n}")

    rng = np.random.default_rng(cfg.seed)
    classes = ds.class_count
    if cfg.iid:
        proportions = np.full((M, classes), 1.0 / classes)
    else:
        proportions = rng.dirichlet([float(cfg.dirichlet_alpha)] * classes, size=M)

    assigned: list[list[int]] = [[] for _ in range(M)]
    for c in range(classes):
        members = np.flatnonzero(ds.labels == c)
        if members.size == 0:
            continue
        rng.shuffle(members)
        column = proportions[:, c]
        total = column.sum()
        weights = column / total if total > 0 else np.full(M, 1.0 / M)
        counts = _largest_remainder(members.size, weights, offset=c)
        start = 0
        for client, take in enumerate(counts):
            assigned[client].extend(members[start:start + take].tolist())
            start += take

    # 修复空分片
    for client in range(M):
        if assigned[client]:
            continue
        donor = max(range(M), key=lambda i: (len(assigned[i]), -i))
        assigned[client].append(assigned[donor].pop())
        logger.debug(f"客户端 {client} 分片为空，从客户端 {donor} 借用一个样本")

    shards = [ClientShard(i, np.sort(np.asarray(idx, dtype=np.int64))) for i, idx in enumerate(assigned)]
    logger.debug(
        f"划分完成: M={M}, α={cfg.dirichlet_alpha}, 分片大小 {min(map(len, shards))}~{max(map(len, shards))}"
    )
    return shards


def label_distance(ds: Dataset, shards: list[ClientShard]) -> float:
    """各客户端标签分布与全局分布的平均总变差距离"""
    global_dist = ds.label_histogram() / len(ds)
    distances = []
    for shard in shards:
        local = ds.label_histogram(shard.indices) / len(shard)
        distances.append(0.5 * float(np.abs(local - global_dist).sum()))
    return float(np.mean(distances))


@dataclass(frozen=True)
class CsvSchema:
    """CSV 结构: 特征列数与标签列名；classes 给定时拒绝其他标签"""
    feature_count: int
    label_column: str = "label"
    classes: Optional[tuple[str, ...]] = None


def _sort_labels(raw: set[str]) -> list[str]:
    try:
        return sorted(raw, key=float)
    except ValueError:
        return sorted(raw)


def load_csv(path: Path, schema: CsvSchema) -> Dataset:
    """读取 CSV 数据集，标签重新编号为 0..K-1"""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"文件不存在: {path}")

    features: list[list[float]] = []
    raw_labels: list[str] = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DataFormatError("文件为空", line=1)
        header = [h.strip() for h in header]
        if schema.label_column not in header:
            raise DataFormatError(f"缺少标签列 {schema.label_column!r}", line=1)
        label_pos = header.index(schema.label_column)
        feature_pos = [i for i in range(len(header)) if i != label_pos]
        if len(feature_pos) != schema.feature_count:
            raise DataFormatError(
                f"特征列数 {len(feature_pos)} 与期望的 {schema.feature_count} 不一致", line=1
            )

        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"列数 {len(row)} 与表头 {len(header)} 不一致", line=line_no)
            try:
                features.append([float(row[i].strip()) for i in feature_pos])
            except ValueError:
                raise DataFormatError(f"特征值不是数字: {row}", line=line_no) from None
            label = row[label_pos].strip()
            if schema.classes is not None and label not in schema.classes:
                raise DataFormatError(f"未知标签 {label!r}", line=line_no)
            raw_labels.append(label)

    if not raw_labels:
        raise DataFormatError("文件中没有数据行")

    names = list(schema.classes) if schema.classes is not None else _sort_labels(set(raw_labels))
    index = {name: i for i, name in enumerate(names)}
    labels = np.array([index[label] for label in raw_labels], dtype=np.int64)
    return Dataset(np.array(features, dtype=np.float64), labels, max(len(names), 1))


def write_csv(path: Path, ds: Dataset) -> None:
    """写出 CSV (f0,...,f{D-1},label)，浮点数保留 17 位有效数字"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([f"f{i}" for i in range(ds.dims)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            writer.writerow([format(float(v), ".17g") for v in row] + [int(label)])


def build_dataset(cfg: DataConfig) -> Dataset:
    """按数据配置生成或读取数据集"""
    if cfg.source == "csv":
        return load_csv(Path(cfg.csv_path), CsvSchema(cfg.dims, cfg.label_column))
    return synth_dataset(cfg.classes, cfg.dims, cfg.n, cfg.separation, cfg.seed)
