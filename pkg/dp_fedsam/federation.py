"""联邦训练主循环: 客户端采样、本地训练、隐私处理、聚合与评估"""

import dataclasses
import logging
import math
import os
from collections.abc import Callable, Sequence
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .accountant import PrivacyLedger
from .config import ExperimentConfig, apply_overrides, build_config
from .data import build_dataset, dirichlet_partition, train_test_split
from .diagnostics import time_averaged_norm
from .errors import ConfigError, EngineAbort
from .mechanism import PrivatizedUpdate, aggregate, privatize
from .models import ClientShard, Dataset, ModelSpec, ParamVector, RoundRecord
from .network import evaluate, init_params
from .optimizer import run_local_round

logger = logging.getLogger(__name__)

# (已完成轮数, 总轮数, 最近一轮的记录)
ProgressCallback = Callable[[int, int, RoundRecord], None]


def sample_clients(M: int, q: float, round_index: int, master_seed: int) -> list[int]:
    """无放回地均匀采样 m = round(q·M) 个客户端，结果按编号升序"""
    m = max(1, int(round(q * M)))
    if m > M:
        raise ValueError(f"采样数 m={m} 超过客户端总数 M={M}")
    rng = np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(0, round_index)))
    return sorted(int(i) for i in rng.choice(M, size=m, replace=False))


def client_streams(
    master_seed: int, round_index: int, client_id: int
) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    """(本地训练, 隐私机制) 两条互不相关的随机流，只由 (种子, 轮次, 客户端) 决定"""
    root = np.random.SeedSequence(master_seed, spawn_key=(1, round_index, client_id))
    train, mechanism = root.spawn(2)
    return train, mechanism


@dataclass
class FederationState:
    """全局模型与训练上下文"""
    params: ParamVector
    spec: ModelSpec
    train_set: Dataset
    test_set: Dataset
    shards: list[ClientShard]
    ledger: PrivacyLedger
    round_index: int = 0

    @property
    def num_clients(self) -> int:
        return len(self.shards)


def _new_ledger(cfg: ExperimentConfig) -> PrivacyLedger:
    M = cfg.partition.num_clients
    q = cfg.dp.client_sample_ratio
    delta = cfg.dp.resolve_delta(M)
    if cfg.variant.private:
        return PrivacyLedger.create(q, cfg.dp.noise_multiplier, delta)
    return PrivacyLedger.non_private(q, delta)


def prepare_state(cfg: ExperimentConfig, dataset: Optional[Dataset] = None) -> FederationState:
    """构造数据集、训练/测试划分、客户端分片与初始模型"""
    spec = cfg.model.to_spec()
    dataset = dataset if dataset is not None else build_dataset(cfg.data)
    if dataset.dims != spec.input_dim:
        raise ConfigError(f"数据维度 {dataset.dims} 与 model.layer_sizes[0]={spec.input_dim} 不一致")
    if dataset.class_count > spec.num_classes:
        raise ConfigError(
            f"数据类别数 {dataset.class_count} 超过 model.layer_sizes[-1]={spec.num_classes}"
        )

    train_set, test_set = train_test_split(dataset, cfg.data.test_fraction, cfg.data.seed)
    shards = dirichlet_partition(train_set, cfg.partition)
    return FederationState(
        params=init_params(spec, cfg.master_seed),
        spec=spec,
        train_set=train_set,
        test_set=test_set,
        shards=shards,
        ledger=_new_ledger(cfg),
    )


def _client_update(
    state: FederationState, cfg: ExperimentConfig, client_id: int, sampled_count: int
) -> PrivatizedUpdate:
    t = state.round_index
    train_seed, mechanism_seed = client_streams(cfg.master_seed, t, client_id)
    delta, _ = run_local_round(
        state.params,
        state.shards[client_id],
        state.train_set,
        cfg.effective_optimizer(),
        state.spec,
        train_seed,
        learning_rate=cfg.optimizer.lr_at(t),
    )
    sigma = cfg.dp.noise_multiplier if cfg.variant.private else 0.0
    return privatize(
        delta,
        cfg.dp.clip_threshold,
        sigma,
        sampled_count,
        np.random.default_rng(mechanism_seed),
        sparsifier=cfg.variant.sparsifier,
        k=cfg.dp.sparsity_k(state.spec.parameter_count),
        clip_enabled=cfg.dp.clip_enabled,
    )


def _should_evaluate(round_number: int, cfg: ExperimentConfig) -> bool:
    return round_number % cfg.eval_every == 0 or round_number == cfg.rounds


def run_round(
    state: FederationState,
    cfg: ExperimentConfig,
    executor: Optional[Executor] = None,
) -> tuple[ParamVector, RoundRecord]:
    """执行一轮通信，原地推进 state (模型、账本、轮次)

    被采样客户端的计算可以并行，聚合总是按客户端编号升序依次累加。
    """
    t = state.round_index
    sampled = sample_clients(state.num_clients, cfg.dp.client_sample_ratio, t, cfg.master_seed)
    m = len(sampled)

    def work(client_id: int) -> PrivatizedUpdate:
        return _client_update(state, cfg, client_id, m)

    updates = list(executor.map(work, sampled)) if executor is not None else [work(c) for c in sampled]

    aggregated = aggregate([u.transmitted for u in updates], m)
    if not np.all(np.isfinite(aggregated)):
        raise EngineAbort(
            f"第 {t} 轮聚合结果出现非有限值",
            {
                "round": t,
                "sampled_client_ids": sampled,
                "update_norms": [u.pre_clip_norm for u in updates],
                "clip_factors": [u.clip_factor for u in updates],
                "global_norm": float(np.linalg.norm(state.params)),
            },
        )

    new_params = state.params + aggregated
    state.ledger = state.ledger.step()
    epsilon = state.ledger.spent()[0] if state.ledger.private else math.inf

    factors = np.array([u.clip_factor for u in updates])
    mean_factor = float(factors.mean())
    record = RoundRecord(
        round=t,
        sampled_client_ids=sampled,
        update_norms=[u.pre_clip_norm for u in updates],
        clip_factors=factors.tolist(),
        mean_clip_factor=mean_factor,
        clip_factor_deviation=float(np.abs(factors - mean_factor).mean()),
        epsilon=epsilon,
    )

    state.params = new_params
    state.round_index = t + 1
    if _should_evaluate(t + 1, cfg):
        record.train_accuracy, record.train_loss = evaluate(new_params, state.train_set.batch(), state.spec)
        record.test_accuracy, record.test_loss = evaluate(new_params, state.test_set.batch(), state.spec)
        logger.info(
            f"第 {t + 1}/{cfg.rounds} 轮: 测试准确率 {record.test_accuracy:.4f}, "
            f"测试损失 {record.test_loss:.4f}, ε={epsilon:.4g}"
        )
    logger.debug(f"第 {t} 轮: 采样 {sampled}, ᾱ={mean_factor:.4f}, α̃={record.clip_factor_deviation:.4f}")
    return new_params, record


@dataclass
class ExperimentResult:
    """一次完整实验的结果"""
    records: list[RoundRecord]
    final_params: ParamVector
    spec: ModelSpec
    epsilon: float
    delta: float
    best_order: Optional[float]
    rounds_executed: int
    stopped_by_budget: bool = False
    final_train_accuracy: Optional[float] = None
    final_train_loss: Optional[float] = None
    final_test_accuracy: Optional[float] = None
    final_test_loss: Optional[float] = None

    @property
    def generalization_gap(self) -> Optional[float]:
        """训练准确率与测试准确率之差"""
        if self.final_train_accuracy is None or self.final_test_accuracy is None:
            return None
        return self.final_train_accuracy - self.final_test_accuracy

    @property
    def time_averaged_norm(self) -> float:
        if not self.records:
            return 0.0
        return time_averaged_norm(self.records)

    def summary(self) -> dict[str, Any]:
        def finite(value: Optional[float]) -> Optional[float]:
            return value if value is not None and math.isfinite(value) else None

        return {
            "rounds_executed": self.rounds_executed,
            "stopped_by_budget": self.stopped_by_budget,
            "epsilon": finite(self.epsilon),
            "delta": self.delta,
            "best_order": self.best_order,
            "final_train_accuracy": self.final_train_accuracy,
            "final_train_loss": self.final_train_loss,
            "final_test_accuracy": self.final_test_accuracy,
            "final_test_loss": self.final_test_loss,
            "generalization_gap": self.generalization_gap,
            "time_averaged_update_norm": self.time_averaged_norm,
            "parameter_count": self.spec.parameter_count,
        }


class FederationEngine:
    """联邦训练引擎

    Args:
        cfg: 实验配置
        threads: 客户端并行线程数，None 表示使用全部 CPU 核，1 表示串行
        progress_callback: 每轮结束后的回调，签名为 (completed, total, record)
    """

    def __init__(
        self,
        cfg: ExperimentConfig,
        threads: Optional[int] = None,
        progress_callback: Optional[ProgressCallback] = None,
    ):
        if threads is not None and threads < 1:
            raise ConfigError(f"threads 必须 >= 1，实际为 {threads}")
        self.cfg = cfg
        self.threads = threads
        self.progress_callback = progress_callback

    @property
    def workers(self) -> int:
        return self.threads or os.cpu_count() or 1

    def _next_round_exceeds_budget(self, state: FederationState) -> bool:
        target = self.cfg.target_epsilon
        if target is None:
            return False
        return state.ledger.step().spent()[0] > target

    def run(self, dataset: Optional[Dataset] = None) -> ExperimentResult:
        cfg = self.cfg
        state = prepare_state(cfg, dataset)
        records: list[RoundRecord] = []
        stopped = False

        executor = None
        if self.workers > 1:
            executor = ThreadPoolExecutor(max_workers=self.workers)
        try:
            for _ in range(cfg.rounds):
                if self._next_round_exceeds_budget(state):
                    stopped = True
                    logger.warning(
                        f"继续训练将超出隐私预算 ε={cfg.target_epsilon}，在第 {state.round_index} 轮后停止"
                    )
                    break
                _, record = run_round(state, cfg, executor)
                records.append(record)
                if self.progress_callback:
                    self.progress_callback(len(records), cfg.rounds, record)
        finally:
            if executor is not None:
                executor.shutdown(wait=True)

        if stopped and records and not records[-1].evaluated:
            last = records[-1]
            last.train_accuracy, last.train_loss = evaluate(state.params, state.train_set.batch(), state.spec)
            last.test_accuracy, last.test_loss = evaluate(state.params, state.test_set.batch(), state.spec)

        if state.ledger.private or state.ledger.rounds_elapsed == 0:
            epsilon, best_order = state.ledger.spent()
            best_order = best_order if state.ledger.rounds_elapsed else None
        else:
            epsilon, best_order = math.inf, None

        result = ExperimentResult(
            records=records,
            final_params=state.params,
            spec=state.spec,
            epsilon=epsilon,
            delta=state.ledger.delta,
            best_order=best_order,
            rounds_executed=state.ledger.rounds_elapsed,
            stopped_by_budget=stopped,
        )
        if records:
            last = records[-1]
            result.final_train_accuracy = last.train_accuracy
            result.final_train_loss = last.train_loss
            result.final_test_accuracy = last.test_accuracy
            result.final_test_loss = last.test_loss
        return result


def run_experiment(
    cfg: ExperimentConfig,
    threads: Optional[int] = None,
    progress_callback: Optional[ProgressCallback] = None,
    dataset: Optional[Dataset] = None,
) -> ExperimentResult:
    """运行 T 轮联邦训练"""
    return FederationEngine(cfg, threads, progress_callback).run(dataset)


# ---------------------------------------------------------------------------
# 超参数扫描
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    """某个取值在多个种子上的汇总"""
    value: Any
    seeds: list[int]
    test_accuracies: list[float] = field(default_factory=list)
    train_accuracies: list[float] = field(default_factory=list)
    update_norms: list[float] = field(default_factory=list)
    epsilon: Optional[float] = None
    gain: Optional[float] = None

    @property
    def mean_test_accuracy(self) -> float:
        return float(np.mean(self.test_accuracies))

    @property
    def std_test_accuracy(self) -> float:
        return float(np.std(self.test_accuracies))

    @property
    def mean_train_accuracy(self) -> float:
        return float(np.mean(self.train_accuracies))

    @property
    def mean_update_norm(self) -> float:
        return float(np.mean(self.update_norms))


def with_override(cfg: ExperimentConfig, key: str, value: Any) -> ExperimentConfig:
    """返回修改了单个 (点号路径) 字段的新配置，并重新校验"""
    data = cfg.model_dump(mode="json")
    raw = value if isinstance(value, str) else _json_scalar(value)
    return build_config(apply_overrides(data, [f"{key}={raw}"]))


def _json_scalar(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "null"
    return repr(value) if isinstance(value, float) else str(value)


def run_sweep(
    base_cfg: ExperimentConfig,
    key: str,
    values: Sequence[Any],
    seeds: Sequence[int],
    reference: Any = None,
    threads: Optional[int] = None,
    progress_callback: Optional[Callable[[int, int], None]] = None,
) -> list[SweepRow]:
    """对 key 的每个取值、每个种子运行一次实验

    gain 为相对参考取值 (缺省为最后一个取值) 的平均测试准确率之差。
    """
    if not values:
        raise ValueError("扫描取值不能为空")
    if not seeds:
        raise ValueError("种子列表不能为空")

    rows: list[SweepRow] = []
    total = len(values) * len(seeds)
    done = 0
    for value in values:
        row = SweepRow(value=value, seeds=list(seeds))
        for seed in seeds:
            cfg = with_override(with_override(base_cfg, key, value), "master_seed", int(seed))
            result = run_experiment(cfg, threads=threads)
            row.test_accuracies.append(result.final_test_accuracy)
            row.train_accuracies.append(result.final_train_accuracy)
            row.update_norms.append(result.time_averaged_norm)
            row.epsilon = result.epsilon if math.isfinite(result.epsilon) else None
            done += 1
            if progress_callback:
                progress_callback(done, total)
        logger.info(f"{key}={value}: 平均测试准确率 {row.mean_test_accuracy:.4f}")
        rows.append(row)

    reference_value = values[-1] if reference is None else reference
    matches = [r for r in rows if r.value == reference_value]
    if not matches:
        raise ValueError(f"参考取值 {reference_value!r} 不在扫描取值中")
    baseline = matches[0].mean_test_accuracy
    return [dataclasses.replace(r, gain=r.mean_test_accuracy - baseline) for r in rows]
