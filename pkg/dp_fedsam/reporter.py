"""结果输出: 轮次 CSV、运行摘要 JSON、Markdown 报告与模型检查点"""

import csv
import json
import logging
import math
import struct
from collections.abc import Iterable, Sequence
from datetime import datetime
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .config import ExperimentConfig, config_hash, echo_config
from .diagnostics import (
    LandscapeGrid,
    NormHistogram,
    average_norm_series,
    clip_factor_series,
    norm_histogram,
)
from .errors import DataFormatError
from .federation import ExperimentResult
from .models import Activation, ModelSpec, ParamVector, RoundRecord

logger = logging.getLogger(__name__)

ROUND_COLUMNS = [
    "round",
    "sampled_client_ids",
    "update_norms",
    "clip_factors",
    "mean_clip_factor",
    "clip_factor_deviation",
    "epsilon",
    "train_accuracy",
    "train_loss",
    "test_accuracy",
    "test_loss",
]

CHECKPOINT_MAGIC = b"DPFS"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def format_float(value: Optional[float]) -> str:
    """17 位有效数字；None 写为空串"""
    if value is None:
        return ""
    return format(float(value), ".17g")


def _join(values: Iterable[Any]) -> str:
    return ";".join(format_float(v) if isinstance(v, float) else str(v) for v in values)


def _json_number(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return value


def write_csv_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """通用 CSV 写出，浮点数统一为 17 位有效数字"""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, float) else v for v in row])
    return path


def round_row(record: RoundRecord) -> list[str]:
    return [
        str(record.round),
        _join(record.sampled_client_ids),
        _join(record.update_norms),
        _join(record.clip_factors),
        format_float(record.mean_clip_factor),
        format_float(record.clip_factor_deviation),
        format_float(record.epsilon),
        format_float(record.train_accuracy),
        format_float(record.train_loss),
        format_float(record.test_accuracy),
        format_float(record.test_loss),
    ]


def write_histogram(path: Path, histogram: NormHistogram) -> Path:
    rows = [
        (float(histogram.edges[i]), float(histogram.edges[i + 1]), int(histogram.counts[i]))
        for i in range(len(histogram.counts))
    ]
    return write_csv_rows(path, ["left", "right", "count"], rows)


def write_norm_series(path: Path, series: Sequence[tuple[int, float]]) -> Path:
    return write_csv_rows(path, ["round", "mean_update_norm"], series)


def write_clip_factors(path: Path, series: Sequence[tuple[int, float, float]]) -> Path:
    return write_csv_rows(path, ["round", "mean_clip_factor", "clip_factor_deviation"], series)


def write_landscape(path: Path, grid: LandscapeGrid) -> Path:
    return write_csv_rows(path, ["a", "b", "loss"], grid.rows())


def write_robustness(path: Path, rows: Sequence[tuple[float, float]]) -> Path:
    return write_csv_rows(path, ["radius", "mean_loss_increase"], rows)


def write_json(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)
        f.write("\n")
    return path


def write_manifest(output_dir: Path, artifacts: dict[str, Path]) -> Path:
    """列出产物路径 (相对输出目录) 的 JSON 清单"""
    entries = {name: str(Path(p).relative_to(output_dir)) for name, p in artifacts.items()}
    return write_json(output_dir / "manifest.json", {"artifacts": entries})


class ReportGenerator:
    """训练运行的报告生成器"""

    def __init__(self, cfg: ExperimentConfig, result: ExperimentResult, output_dir: Path):
        self.cfg = cfg
        self.result = result
        self.output_dir = output_dir
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def save_rounds(self) -> Path:
        """rounds.csv: 每轮一行，内容只取决于配置与种子"""
        return write_csv_rows(
            self.output_dir / "rounds.csv",
            ROUND_COLUMNS,
            (round_row(r) for r in self.result.records),
        )

    def save_config(self) -> Path:
        return write_json(self.output_dir / "echoed-config.json", echo_config(self.cfg))

    def summary_data(self) -> dict[str, Any]:
        summary = self.result.summary()
        summary["delta"] = _json_number(summary["delta"])
        return {
            "generated_at": datetime.now().isoformat(),
            "config_hash": config_hash(self.cfg),
            "variant": self.cfg.variant.value,
            "summary": summary,
            "config": echo_config(self.cfg),
        }

    def save_summary(self) -> Path:
        return write_json(self.output_dir / "summary.json", self.summary_data())

    def _clip_statistics(self) -> tuple[float, float, float]:
        records = self.result.records
        if not records:
            return 1.0, 0.0, 1.0
        means = [r.mean_clip_factor for r in records]
        deviations = [r.clip_factor_deviation for r in records]
        return float(np.mean(means)), float(np.mean(deviations)), float(np.min(means))

    def generate_markdown(self) -> str:
        """生成 Markdown 格式报告"""
        cfg = self.cfg
        result = self.result
        mean_alpha, mean_dev, min_alpha = self._clip_statistics()

        def pct(value: Optional[float]) -> str:
            return f"{value * 100:.2f}%" if value is not None else "未评估"

        epsilon = "∞ (无噪声)" if not math.isfinite(result.epsilon) else f"{result.epsilon:.4f}"
        lines = [
            f"# 📈 差分隐私联邦训练报告 ({cfg.variant.value})",
            "",
            f"生成时间: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}",
            f"配置哈希: `{config_hash(cfg)}`",
            "",
            "## ⚙️ 配置",
            "",
            "| 参数 | 取值 |",
            "|------|------|",
            f"| 模型结构 | {list(cfg.model.layer_sizes)} ({cfg.model.activation.value}) |",
            f"| 本地优化器 | {cfg.optimizer_kind.value}, η={cfg.optimizer.learning_rate}, ρ={cfg.optimizer.rho}, K={cfg.optimizer.local_steps} |",
            f"| 客户端 | M={cfg.partition.num_clients}, q={cfg.dp.client_sample_ratio}, Dir({cfg.partition.dirichlet_alpha}) |",
            f"| 隐私参数 | C={cfg.dp.clip_threshold}, σ={cfg.dp.noise_multiplier}, δ={result.delta:.4g} |",
            f"| 轮数 | {result.rounds_executed}/{cfg.rounds} |",
            "",
            "## 📊 结果",
            "",
            "| 指标 | 取值 |",
            "|------|------|",
            f"| 训练准确率 | {pct(result.final_train_accuracy)} |",
            f"| 测试准确率 | {pct(result.final_test_accuracy)} |",
            f"| 泛化差 (训练 - 测试) | {pct(result.generalization_gap)} |",
            f"| 隐私预算 ε | {epsilon} |",
            f"| 平均更新范数 | {result.time_averaged_norm:.4g} |",
            "",
            "## ✂️ 裁剪统计",
            "",
            f"- 平均裁剪因子 ᾱ: {mean_alpha:.4f}",
            f"- 平均偏差 α̃: {mean_dev:.4f}",
            f"- 最小轮均裁剪因子: {min_alpha:.4f}",
        ]
        if result.stopped_by_budget:
            lines += ["", f"> ⚠️ 训练因达到隐私预算 ε={cfg.target_epsilon} 而提前停止"]
        lines.append("")
        return "\n".join(lines)

    def save_report(self) -> Path:
        path = self.output_dir / "report.md"
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.generate_markdown())
        return path

    def save_diagnostics(self, bins: int = 20) -> dict[str, Path]:
        """更新范数直方图、每轮平均范数与裁剪因子序列；没有轮次记录时不写"""
        records = self.result.records
        if not records:
            return {}
        out = self.output_dir
        return {
            "norm_histogram": write_histogram(out / "norm_histogram.csv", norm_histogram(records, bins)),
            "norm_series": write_norm_series(out / "norm_series.csv", average_norm_series(records)),
            "clip_factors": write_clip_factors(out / "clip_factors.csv", clip_factor_series(records)),
        }

    def save_all(self) -> dict[str, Path]:
        artifacts = {
            "rounds": self.save_rounds(),
            "summary": self.save_summary(),
            "config": self.save_config(),
            "report": self.save_report(),
            "model": save_checkpoint(self.output_dir / "model.dpfs", self.result.final_params, self.result.spec),
        }
        artifacts.update(self.save_diagnostics())
        artifacts["manifest"] = write_manifest(self.output_dir, artifacts)
        logger.debug(f"已写出 {len(artifacts)} 个产物到 {self.output_dir}")
        return artifacts


# ---------------------------------------------------------------------------
# 模型检查点
# ---------------------------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_checkpoint(path: Path, params: ParamVector, spec: ModelSpec) -> Path:
    """小端二进制: 魔数 DPFS, u32 版本, u64 d, d 个 float64；另写 JSON 描述模型结构"""
    if params.shape != (spec.parameter_count,):
        raise ValueError(f"参数长度 {params.shape} 与模型参数量 {spec.parameter_count} 不一致")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.shape[0]))
        f.write(np.asarray(params, dtype="<f8").tobytes())
    write_json(
        _sidecar(path),
        {"layer_sizes": list(spec.layer_sizes), "activation": spec.activation.value,
         "parameter_count": spec.parameter_count},
    )
    return path


def load_checkpoint(path: Path) -> tuple[ParamVector, ModelSpec]:
    path = Path(path)
    sidecar = _sidecar(path)
    if not path.exists():
        raise DataFormatError(f"检查点不存在: {path}")
    if not sidecar.exists():
        raise DataFormatError(f"缺少模型描述文件: {sidecar}")

    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"检查点过短: {path}")
    magic, version, d = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise DataFormatError(f"检查点魔数错误: {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"不支持的检查点版本: {version}")
    if len(raw) != _HEADER.size + 8 * d:
        raise DataFormatError(f"检查点长度与 d={d} 不符")
    params = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)

    try:
        with open(sidecar, "r", encoding="utf-8") as f:
            meta = json.load(f)
        spec = ModelSpec(tuple(meta["layer_sizes"]), Activation(meta.get("activation", "relu")))
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise DataFormatError(f"模型描述文件无效: {e}") from e
    if spec.parameter_count != d:
        raise DataFormatError(f"模型结构参数量 {spec.parameter_count} 与检查点 d={d} 不一致")
    return params, spec
