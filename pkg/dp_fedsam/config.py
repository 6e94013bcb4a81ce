"""配置管理"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .models import Activation, ModelSpec, OptimizerKind, Variant

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "DPFL_SEED"


class StrictModel(BaseModel):
    """拒绝未知字段的配置基类"""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelConfig(StrictModel):
    layer_sizes: list[int] = Field(default_factory=lambda: [20, 32, 5])
    activation: Activation = Activation.RELU

    @field_validator("layer_sizes")
    @classmethod
    def _check_sizes(cls, value: list[int]) -> list[int]:
        if len(value) < 2 or any(s < 1 for s in value):
            raise ValueError("layer_sizes 至少 2 项且每项 >= 1")
        return value

    def to_spec(self) -> ModelSpec:
        return ModelSpec(tuple(self.layer_sizes), self.activation)


class OptimizerConfig(StrictModel):
    kind: OptimizerKind = OptimizerKind.SAM
    learning_rate: float = Field(0.1, ge=0)
    rho: float = Field(0.5, ge=0)
    local_steps: int = Field(10, ge=1)
    batch_size: int = Field(32, ge=1)
    # 每步使用整个分片而不是有放回采样
    full_batch: bool = False
    # 每轮乘性衰减 η_t = η (1 - lr_decay)^t，默认关闭
    lr_decay: float = Field(0.0, ge=0, lt=1)
    momentum: float = Field(0.0, ge=0, lt=1)

    def lr_at(self, round_index: int) -> float:
        if self.lr_decay == 0.0:
            return self.learning_rate
        return self.learning_rate * (1.0 - self.lr_decay) ** round_index


class DpConfig(StrictModel):
    clip_threshold: float = Field(0.2, gt=0)
    noise_multiplier: float = Field(0.95, ge=0)
    client_sample_ratio: float = Field(0.1, gt=0, le=1)
    # 缺省为 1/M
    failure_prob: Optional[float] = Field(None, gt=0, lt=1)
    sparsity_ratio: float = Field(0.4, gt=0, le=1)
    clip_enabled: bool = True

    def sampled_count(self, num_clients: int) -> int:
        """m = round(q·M)，至少为 1"""
        return max(1, int(round(self.client_sample_ratio * num_clients)))

    def sparsity_k(self, dimension: int) -> int:
        """k = round(p·d)，限制在 [1, d]"""
        return min(dimension, max(1, int(round(self.sparsity_ratio * dimension))))

    def resolve_delta(self, num_clients: int) -> float:
        return self.failure_prob if self.failure_prob is not None else 1.0 / num_clients


class PartitionConfig(StrictModel):
    num_clients: int = Field(50, ge=1)
    dirichlet_alpha: Union[Literal["iid"], float] = 0.6
    seed: int = Field(0, ge=0)

    @field_validator("dirichlet_alpha")
    @classmethod
    def _check_alpha(cls, value):
        if value != "iid" and value <= 0:
            raise ValueError("dirichlet_alpha 必须 > 0 或为 'iid'")
        return value

    @property
    def iid(self) -> bool:
        return self.dirichlet_alpha == "iid"


class DataConfig(StrictModel):
    source: Literal["synthetic", "csv"] = "synthetic"
    classes: int = Field(5, ge=2)
    dims: int = Field(20, ge=1)
    n: int = Field(10_000, ge=2)
    separation: float = Field(3.0, ge=0)
    seed: int = Field(0, ge=0)
    csv_path: Optional[str] = None
    label_column: str = "label"
    test_fraction: float = Field(0.2, gt=0, lt=1)

    @model_validator(mode="after")
    def _check_source(self):
        if self.source == "csv" and not self.csv_path:
            raise ValueError("source=csv 时必须提供 csv_path")
        if self.source == "synthetic" and self.n < self.classes:
            raise ValueError("合成数据的 n 不能小于 classes")
        return self


class ExperimentConfig(StrictModel):
    model: ModelConfig = Field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    dp: DpConfig = Field(default_factory=DpConfig)
    partition: PartitionConfig = Field(default_factory=PartitionConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    rounds: int = Field(200, ge=0)
    master_seed: int = Field(0, ge=0)
    eval_every: int = Field(10, ge=1)
    variant: Variant = Variant.DP_FEDSAM
    # 达到该 ε 之前停止训练
    target_epsilon: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _check_consistency(self):
        spec = self.model.to_spec()
        if self.data.source == "synthetic":
            if spec.input_dim != self.data.dims:
                raise ValueError(
                    f"model.layer_sizes[0]={spec.input_dim} 与 data.dims={self.data.dims} 不一致"
                )
            if spec.num_classes != self.data.classes:
                raise ValueError(
                    f"model.layer_sizes[-1]={spec.num_classes} 与 data.classes={self.data.classes} 不一致"
                )
        if self.dp.sparsity_ratio * spec.parameter_count < 1:
            raise ValueError("dp.sparsity_ratio 过小: 需要 p·d >= 1")
        if self.variant.private and self.dp.noise_multiplier == 0:
            raise ValueError(f"变体 {self.variant.value} 需要 dp.noise_multiplier > 0")
        if self.variant.private and not self.dp.clip_enabled:
            raise ValueError(f"变体 {self.variant.value} 必须启用裁剪 (dp.clip_enabled)")
        if self.target_epsilon is not None and not self.variant.private:
            raise ValueError("target_epsilon 只适用于差分隐私变体")
        return self

    @property
    def optimizer_kind(self) -> OptimizerKind:
        return self.variant.optimizer_kind or self.optimizer.kind

    def effective_optimizer(self) -> OptimizerConfig:
        """按变体确定优化器类型后的本地优化器配置"""
        return self.optimizer.model_copy(update={"kind": self.optimizer_kind})


class RunConfigFile(ExperimentConfig):
    output_dir: str = "./output"


def _format_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        loc = ".".join(str(p) for p in item["loc"]) or "<root>"
        parts.append(f"{loc}: {item['msg']}")
    return "; ".join(parts)


def _parse_value(raw: str) -> Any:
    """--set 的值优先按 JSON 标量解析，否则保留为字符串"""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """应用 key=value 形式的覆盖项，支持点号路径 (optimizer.rho=0.1)"""
    defaults = RunConfigFile().model_dump(mode="json")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"覆盖项格式应为 key=value: {item!r}")
        key, raw = item.split("=", 1)
        path = key.strip().split(".")
        node, schema = data, defaults
        for part in path[:-1]:
            if not isinstance(schema, dict) or part not in schema:
                raise ConfigError(f"未知配置字段: {key}")
            schema = schema[part]
            node = node.setdefault(part, {})
        if not isinstance(schema, dict) or path[-1] not in schema:
            raise ConfigError(f"未知配置字段: {key}")
        node[path[-1]] = _parse_value(raw.strip())
    return data


def apply_env_overrides(data: dict[str, Any]) -> dict[str, Any]:
    """环境变量 DPFL_SEED 覆盖 master_seed"""
    raw = os.environ.get(SEED_ENV_VAR)
    if raw:
        try:
            data["master_seed"] = int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} 必须是整数: {raw!r}") from None
        logger.info(f"使用环境变量 {SEED_ENV_VAR}={raw} 覆盖 master_seed")
    return data


def read_config_data(config_path: Path) -> dict[str, Any]:
    """读取 JSON 或 YAML 配置文件为字典"""
    if not config_path.exists():
        raise ConfigError(f"配置文件不存在: {config_path}")

    with open(config_path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        if config_path.suffix.lower() in (".yaml", ".yml"):
            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"无法解析配置文件 {config_path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"配置文件顶层必须是对象: {config_path}")
    return data


def build_config(data: dict[str, Any]) -> RunConfigFile:
    try:
        return RunConfigFile.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e)) from e


def load_config(
    config_path: Path,
    overrides: Optional[list[str]] = None,
    use_env: bool = True,
) -> RunConfigFile:
    """加载配置文件

    Args:
        config_path: JSON 或 YAML 配置文件路径
        overrides: key=value 覆盖项
        use_env: 是否读取 DPFL_SEED

    Returns:
        RunConfigFile 对象
    """
    data = read_config_data(config_path)
    if overrides:
        data = apply_overrides(data, overrides)
    if use_env:
        data = apply_env_overrides(data)
    return build_config(data)


def echo_config(cfg: ExperimentConfig) -> dict[str, Any]:
    """显式列出所有字段 (包括默认值) 的配置回显"""
    return cfg.model_dump(mode="json")


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(echo_config(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
