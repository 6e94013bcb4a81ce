"""DP-FedSAM CLI入口"""

import logging
import math
import shutil
from pathlib import Path
from typing import Optional

import typer
import yaml
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TaskProgressColumn, TextColumn
from rich.table import Table

from .accountant import BUDGET_LEVELS, epsilon_curve, log_spaced_rounds, rounds_for_epsilon
from .bounds import (
    GenBoundInputs,
    SensitivityTask,
    empirical_sensitivity,
    estimate_smoothness,
    generalization_report,
    sensitivity_bound_sam,
    sensitivity_bound_sgd,
)
from .config import (
    DataConfig,
    PartitionConfig,
    RunConfigFile,
    load_config,
)
from .data import CsvSchema, build_dataset, dirichlet_partition, label_distance, load_csv, train_test_split
from .diagnostics import landscape_slice, perturbation_robustness
from .errors import (
    BoundDomainError,
    ConfigError,
    DataFormatError,
    DpFedSamError,
    EngineAbort,
    PartitionError,
    PrivacyAccountingError,
)
from .federation import run_experiment, run_sweep
from .models import RoundRecord
from .reporter import (
    ReportGenerator,
    load_checkpoint,
    write_csv_rows,
    write_json,
    write_landscape,
    write_manifest,
    write_robustness,
)

app = typer.Typer(
    name="dp-fedsam",
    help="差分隐私联邦学习 (DP-FedSAM) 模拟器",
    add_completion=False,
)
console = Console()
logger = logging.getLogger(__name__)

EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _fail(message: str, code: int) -> typer.Exit:
    console.print(f"[red]错误: {message}[/red]")
    return typer.Exit(code)


def _load(config_path: Path, overrides: Optional[list[str]] = None) -> RunConfigFile:
    try:
        return load_config(config_path, overrides or [])
    except ConfigError as e:
        raise _fail(f"配置无效: {e}", EXIT_USAGE) from None


def _parse_list(raw: str, cast=float) -> list:
    try:
        return [cast(item.strip()) for item in raw.split(",") if item.strip()]
    except ValueError:
        raise _fail(f"无法解析列表: {raw!r}", EXIT_USAGE) from None


@app.callback()
def main_callback(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="显示调试日志"),
) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


@app.command()
def train(
    config_path: Path = typer.Option(..., "--config", "-c", help="配置文件路径 (JSON 或 YAML)"),
    overrides: Optional[list[str]] = typer.Option(
        None, "--set", "-s", help="覆盖配置项 key=value (可多次指定)",
    ),
    output_dir: Optional[Path] = typer.Option(None, "--output", "-o", help="输出目录"),
    threads: Optional[int] = typer.Option(None, "--threads", "-j", min=1, help="客户端并行线程数 (默认全部核心)"),
) -> None:
    """运行一次联邦训练"""
    cfg = _load(config_path, overrides)
    output_path = output_dir or Path(cfg.output_dir)
    cfg.output_dir = str(output_path)

    console.print(Panel.fit(
        f"[bold blue]📡 DP-FedSAM[/bold blue]\n变体 {cfg.variant.value}, T={cfg.rounds}, "
        f"M={cfg.partition.num_clients}, q={cfg.dp.client_sample_ratio}",
        border_style="blue",
    ))

    try:
        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            TaskProgressColumn(),
            console=console,
        ) as progress:
            task = progress.add_task("训练中...", total=max(cfg.rounds, 1))

            def update_progress(completed: int, total: int, record: RoundRecord):
                progress.update(task, completed=completed)

            result = run_experiment(cfg, threads=threads, progress_callback=update_progress)
    except (ConfigError, DataFormatError, PartitionError) as e:
        raise _fail(str(e), EXIT_USAGE) from None
    except EngineAbort as e:
        console.print(f"[dim]{e.diagnostics}[/dim]")
        raise _fail(f"训练中止: {e}", EXIT_RUNTIME) from None
    except DpFedSamError as e:
        raise _fail(f"训练失败: {e}", EXIT_RUNTIME) from None

    artifacts = ReportGenerator(cfg, result, output_path).save_all()

    table = Table(title="训练结果", show_header=True)
    table.add_column("指标", style="bold")
    table.add_column("取值", justify="right")
    for name, value in [
        ("训练准确率", result.final_train_accuracy),
        ("测试准确率", result.final_test_accuracy),
        ("泛化差", result.generalization_gap),
    ]:
        table.add_row(name, f"{value:.4f}" if value is not None else "-")
    table.add_row("ε", f"{result.epsilon:.4f}" if math.isfinite(result.epsilon) else "∞")
    table.add_row("执行轮数", str(result.rounds_executed))
    console.print(table)
    if result.stopped_by_budget:
        console.print(f"[yellow]⚠️  已达到隐私预算 ε={cfg.target_epsilon}，提前停止[/yellow]")
    console.print(f"\n📋 结果已保存: [green]{artifacts['rounds'].parent}[/green]")


@app.command()
def account(
    q: float = typer.Option(..., "--q", help="客户端采样率"),
    sigma: float = typer.Option(..., "--sigma", help="噪声乘子"),
    rounds: int = typer.Option(..., "--rounds", "-T", min=1, help="通信轮数"),
    delta: float = typer.Option(..., "--delta", help="δ"),
    points: int = typer.Option(10, "--points", min=1, help="对数间隔的轮数点数"),
    budgets: bool = typer.Option(False, "--budgets", help="同时列出各档隐私预算可支撑的轮数"),
    output_dir: Optional[Path] = typer.Option(None, "--output", "-o", help="写出 epsilon_curve.csv"),
) -> None:
    """计算子采样高斯机制累计的隐私预算"""
    if sigma <= 0:
        raise _fail("σ 必须 > 0 (σ=0 时没有隐私保证)", EXIT_USAGE)
    if not 0 < q <= 1 or not 0 < delta < 1:
        raise _fail("需要 0 < q <= 1 且 0 < δ < 1", EXIT_USAGE)

    try:
        curve = epsilon_curve(q, sigma, delta, log_spaced_rounds(rounds, points))
    except PrivacyAccountingError as e:
        raise _fail(f"隐私核算失败: {e}", EXIT_RUNTIME) from None

    table = Table(title=f"累计隐私预算 (q={q}, σ={sigma}, δ={delta})", show_header=True)
    table.add_column("T", justify="right")
    table.add_column("ε", justify="right")
    table.add_column("最优 α", justify="right")
    for t, eps, alpha in curve:
        table.add_row(str(t), f"{eps:.6f}", f"{alpha:g}")
    console.print(table)

    _, final_eps, final_alpha = curve[-1]
    console.print(f"\n最终: T={rounds}, ε={final_eps!r}, α={final_alpha:g}")

    if budgets:
        for level in BUDGET_LEVELS:
            supported = rounds_for_epsilon(q, sigma, delta, level)
            console.print(f"   ε={level:g}: 最多 {supported if supported is not None else 0} 轮")

    if output_dir:
        path = write_csv_rows(output_dir / "epsilon_curve.csv", ["rounds", "epsilon", "best_order"], curve)
        console.print(f"📋 已保存: [green]{path}[/green]")


@app.command()
def bounds(
    eta: float = typer.Option(0.01, "--eta", help="本地学习率 η"),
    rho: float = typer.Option(0.1, "--rho", help="SAM 扰动半径 ρ"),
    local_steps: int = typer.Option(10, "--local-steps", "-K", min=1, help="本地迭代步数 K"),
    smoothness: float = typer.Option(1.0, "--L", help="光滑常数 L"),
    sigma_l: float = typer.Option(1.0, "--sigma-l", help="局部梯度方差界 σ_l"),
    n: int = typer.Option(10_000, "--N", help="样本总数 N"),
    m: int = typer.Option(5, "--m", help="每轮采样客户端数 m"),
    sigma: float = typer.Option(0.95, "--sigma", help="噪声乘子 σ"),
    clip: float = typer.Option(0.2, "--clip", help="裁剪阈值 C"),
    dim: int = typer.Option(837, "--dim", help="模型维度 d"),
    rounds: int = typer.Option(200, "--rounds", "-T", min=1, help="通信轮数 T"),
    delta_tilde: float = typer.Option(1e-5, "--delta-tilde", help="δ̃"),
    output_dir: Optional[Path] = typer.Option(None, "--output", "-o", help="写出 bounds.json"),
) -> None:
    """计算敏感度上界与泛化界"""
    try:
        sam = sensitivity_bound_sam(eta, rho, local_steps, smoothness)
        sgd = sensitivity_bound_sgd(eta, sigma_l, local_steps, smoothness)
        report = generalization_report(
            GenBoundInputs(n, m, rho, sigma, clip, dim, rounds, delta_tilde), smoothness
        )
    except BoundDomainError as e:
        raise _fail(str(e), EXIT_USAGE) from None

    table = Table(title="理论界", show_header=True)
    table.add_column("量", style="bold")
    table.add_column("取值", justify="right")
    rows = [
        ("SAM 期望平方敏感度上界", sam),
        ("SGD 期望平方敏感度上界", sgd),
        ("单轮 ε̃", report.eps_tilde),
        ("单轮 δ", report.round_delta.delta),
        ("T 轮 ε′", report.eps_prime),
        ("T 轮 δ′", report.delta_prime),
        ("泛化差上界 4ε′", report.gap),
        ("置信度", report.confidence),
        ("所需样本数", report.required_n),
    ]
    for name, value in rows:
        table.add_row(name, f"{value:.6g}" if value is not None else "-")
    console.print(table)
    if not report.valid_sample_size:
        console.print(f"[yellow]⚠️  N={n} 小于泛化界要求的样本数 {report.required_n:.4g}[/yellow]")

    if output_dir:
        path = write_json(output_dir / "bounds.json", {
            "sensitivity_sam": sam,
            "sensitivity_sgd": sgd,
            "eps_tilde": report.eps_tilde,
            "round_delta": report.round_delta.delta,
            "t_star": report.round_delta.t_star,
            "eps_prime": report.eps_prime,
            "delta_prime": report.delta_prime,
            "gap": report.gap,
            "confidence": report.confidence,
            "required_n": report.required_n if math.isfinite(report.required_n) else None,
            "valid_sample_size": report.valid_sample_size,
        })
        console.print(f"📋 已保存: [green]{path}[/green]")


@app.command()
def partition(
    config_path: Optional[Path] = typer.Option(None, "--config", "-c", help="配置文件 (读取 data 与 partition 节)"),
    num_clients: Optional[int] = typer.Option(None, "--num-clients", "-M", min=1, help="客户端数"),
    alpha: Optional[str] = typer.Option(None, "--alpha", help="Dirichlet 参数，或 iid"),
    n: Optional[int] = typer.Option(None, "--n", help="合成样本数"),
    seed: Optional[int] = typer.Option(None, "--seed", help="划分随机种子"),
    csv_path: Optional[Path] = typer.Option(None, "--csv", help="外部 CSV 数据集"),
    features: Optional[int] = typer.Option(None, "--features", help="CSV 特征列数"),
    label_column: str = typer.Option("label", "--label-column", help="CSV 标签列名"),
    output_dir: Path = typer.Option(Path("./output/partition"), "--output", "-o", help="输出目录"),
) -> None:
    """把数据集按 Dirichlet 分布划分给客户端"""
    cfg = _load(config_path) if config_path else RunConfigFile()
    try:
        data_cfg = cfg.data.model_copy(update={"n": n}) if n is not None else cfg.data
        data_cfg = DataConfig.model_validate(data_cfg.model_dump())
        part = cfg.partition.model_dump()
        if num_clients is not None:
            part["num_clients"] = num_clients
        if alpha is not None:
            part["dirichlet_alpha"] = alpha if alpha == "iid" else float(alpha)
        if seed is not None:
            part["seed"] = seed
        part_cfg = PartitionConfig.model_validate(part)
    except ValueError as e:
        raise _fail(f"参数无效: {e}", EXIT_USAGE) from None

    try:
        if csv_path is not None:
            if features is None:
                raise _fail("使用 --csv 时必须提供 --features", EXIT_USAGE)
            dataset = load_csv(csv_path, CsvSchema(features, label_column))
        else:
            dataset = build_dataset(data_cfg)
        shards = dirichlet_partition(dataset, part_cfg)
    except (DataFormatError, PartitionError) as e:
        raise _fail(str(e), EXIT_USAGE) from None

    for shard in shards:
        write_csv_rows(output_dir / f"shard_{shard.client_id}.csv", ["index"], ([int(i)] for i in shard.indices))
    write_json(output_dir / "partition.json", {
        "num_examples": len(dataset),
        "num_clients": len(shards),
        "dirichlet_alpha": part_cfg.dirichlet_alpha,
        "seed": part_cfg.seed,
        "label_distance": label_distance(dataset, shards),
        "shards": [
            {"client_id": s.client_id, "size": len(s),
             "label_histogram": dataset.label_histogram(s.indices).tolist()}
            for s in shards
        ],
    })

    sizes = [len(s) for s in shards]
    console.print(
        f"✅ {len(dataset)} 个样本划分给 {len(shards)} 个客户端，"
        f"分片大小 {min(sizes)}~{max(sizes)}，输出目录 [green]{output_dir}[/green]"
    )


@app.command()
def landscape(
    model_path: Path = typer.Option(..., "--model", "-m", help="模型检查点 (.dpfs)"),
    config_path: Path = typer.Option(..., "--config", "-c", help="训练时使用的配置文件"),
    half_width: float = typer.Option(1.0, "--half-width", help="网格半宽"),
    resolution: int = typer.Option(21, "--resolution", help="网格分辨率 (>= 3 的奇数)"),
    radii: str = typer.Option("0,0.05,0.1,0.2,0.5", "--radii", help="扰动半径列表 (逗号分隔)"),
    trials: int = typer.Option(20, "--trials", min=1, help="每个半径的试验次数"),
    seed: int = typer.Option(0, "--seed", help="随机方向种子"),
    output_dir: Path = typer.Option(Path("./output/landscape"), "--output", "-o", help="输出目录"),
) -> None:
    """在测试集上计算损失地形切片与扰动鲁棒性"""
    cfg = _load(config_path)
    radius_list = _parse_list(radii)
    if resolution < 3 or resolution % 2 == 0:
        raise _fail("--resolution 必须是 >= 3 的奇数", EXIT_USAGE)

    try:
        params, spec = load_checkpoint(model_path)
        _, test_set = train_test_split(build_dataset(cfg.data), cfg.data.test_fraction, cfg.data.seed)
        if test_set.dims != spec.input_dim:
            raise _fail(f"数据维度 {test_set.dims} 与模型输入维度 {spec.input_dim} 不一致", EXIT_USAGE)
        grid = landscape_slice(params, spec, test_set, half_width, resolution, seed)
        robustness = perturbation_robustness(params, spec, test_set, radius_list, trials, seed)
    except DataFormatError as e:
        raise _fail(str(e), EXIT_USAGE) from None
    except DpFedSamError as e:
        raise _fail(f"计算失败: {e}", EXIT_RUNTIME) from None

    artifacts = {
        "landscape": write_landscape(output_dir / "landscape.csv", grid),
        "robustness": write_robustness(output_dir / "robustness.csv", robustness),
    }
    write_manifest(output_dir, artifacts)

    table = Table(title="扰动鲁棒性", show_header=True)
    table.add_column("半径", justify="right")
    table.add_column("平均损失增量", justify="right")
    for r, increase in robustness:
        table.add_row(f"{r:g}", f"{increase:.6g}")
    console.print(table)
    console.print(f"中心损失 {grid.center_loss:.6g}，输出目录 [green]{output_dir}[/green]")


@app.command("sensitivity-probe")
def sensitivity_probe(
    config_path: Path = typer.Option(..., "--config", "-c", help="配置文件 (读取 optimizer 与 data 节)"),
    trials: int = typer.Option(50, "--trials", min=1, help="配对试验次数"),
    shard_size: int = typer.Option(64, "--shard-size", min=1, help="相邻分片大小"),
    seed: int = typer.Option(0, "--seed", help="随机种子"),
    confidence: float = typer.Option(0.95, "--confidence", help="单侧检验置信度"),
    output_dir: Path = typer.Option(Path("./output/sensitivity"), "--output", "-o", help="输出目录"),
) -> None:
    """比较 SAM 与 SGD 本地更新在相邻分片上的经验敏感度"""
    cfg = _load(config_path)
    spec = cfg.model.to_spec()
    try:
        train_set, _ = train_test_split(build_dataset(cfg.data), cfg.data.test_fraction, cfg.data.seed)
        task = SensitivityTask(train_set, spec, shard_size=shard_size)
        report = empirical_sensitivity(task, cfg.optimizer, trials, seed)
        smooth = estimate_smoothness(spec, train_set, seed=seed)
    except (DataFormatError, ValueError) as e:
        raise _fail(str(e), EXIT_USAGE) from None
    except DpFedSamError as e:
        raise _fail(f"计算失败: {e}", EXIT_RUNTIME) from None

    eta, rho, K = cfg.optimizer.learning_rate, cfg.optimizer.rho, cfg.optimizer.local_steps
    theory = {}
    for name, compute in (
        ("sam", lambda: sensitivity_bound_sam(eta, rho, K, smooth.L)),
        ("sgd", lambda: sensitivity_bound_sgd(eta, smooth.sigma_l, K, smooth.L)),
    ):
        try:
            theory[name] = compute()
        except BoundDomainError as e:
            logger.warning(f"{name.upper()} 上界不适用: {e}")
            theory[name] = None

    passed = report.sam_not_larger(confidence)
    path = write_json(output_dir / "sensitivity.json", {
        "trials": trials,
        "shard_size": shard_size,
        "mean_sq_sam": report.mean_sq_sam,
        "mean_sq_sgd": report.mean_sq_sgd,
        "sam_to_sgd_ratio": report.ratio,
        "sam_not_larger": passed,
        "confidence": confidence,
        "smoothness": {"L": smooth.L, "sigma_l": smooth.sigma_l, "B": smooth.B},
        "bound_sam": theory["sam"],
        "bound_sgd": theory["sgd"],
    })

    table = Table(title="经验敏感度", show_header=True)
    table.add_column("优化器", style="bold")
    table.add_column("E||Δ(S) - Δ(S′)||²", justify="right")
    table.add_column("理论上界", justify="right")
    table.add_row("SAM", f"{report.mean_sq_sam:.6g}", f"{theory['sam']:.6g}" if theory["sam"] is not None else "-")
    table.add_row("SGD", f"{report.mean_sq_sgd:.6g}", f"{theory['sgd']:.6g}" if theory["sgd"] is not None else "-")
    console.print(table)
    verdict = "[green]✅ SAM 不大于 SGD[/green]" if passed else "[yellow]⚠️  SAM 显著大于 SGD[/yellow]"
    console.print(f"{verdict}  📋 [green]{path}[/green]")


@app.command()
def sweep(
    config_path: Path = typer.Option(..., "--config", "-c", help="基础配置文件"),
    key: str = typer.Option("dp.sparsity_ratio", "--key", "-k", help="扫描的配置项 (点号路径)"),
    values: str = typer.Option("0.1,0.2,0.4,0.6,0.8,1.0", "--values", help="取值列表 (逗号分隔)"),
    seeds: str = typer.Option("0", "--seeds", help="种子列表 (逗号分隔)"),
    reference: Optional[str] = typer.Option(None, "--reference", help="计算增益的参考取值 (默认最后一个)"),
    overrides: Optional[list[str]] = typer.Option(None, "--set", "-s", help="覆盖基础配置 key=value"),
    threads: Optional[int] = typer.Option(None, "--threads", "-j", min=1, help="客户端并行线程数"),
    output_dir: Path = typer.Option(Path("./output/sweep"), "--output", "-o", help="输出目录"),
) -> None:
    """对单个超参数做多种子扫描并输出对比表"""
    cfg = _load(config_path, overrides)
    value_list = [_scalar(v) for v in values.split(",") if v.strip()]
    seed_list = _parse_list(seeds, int)
    reference_value = _scalar(reference) if reference is not None else None

    try:
        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            TaskProgressColumn(),
            console=console,
        ) as progress:
            task = progress.add_task(f"扫描 {key}...", total=len(value_list) * len(seed_list))
            rows = run_sweep(
                cfg, key, value_list, seed_list, reference=reference_value, threads=threads,
                progress_callback=lambda done, total: progress.update(task, completed=done),
            )
    except (ConfigError, ValueError) as e:
        raise _fail(str(e), EXIT_USAGE) from None
    except DpFedSamError as e:
        raise _fail(f"扫描失败: {e}", EXIT_RUNTIME) from None

    table = Table(title=f"{key} 扫描结果", show_header=True)
    for column in (key, "测试准确率", "标准差", "训练准确率", "平均更新范数", "ε", "增益"):
        table.add_column(column, justify="right")
    for row in rows:
        table.add_row(
            str(row.value),
            f"{row.mean_test_accuracy:.4f}",
            f"{row.std_test_accuracy:.4f}",
            f"{row.mean_train_accuracy:.4f}",
            f"{row.mean_update_norm:.4g}",
            f"{row.epsilon:.4f}" if row.epsilon is not None else "∞",
            f"{row.gain:+.4f}",
        )
    console.print(table)

    path = write_csv_rows(
        output_dir / "sweep.csv",
        ["value", "mean_test_accuracy", "std_test_accuracy", "mean_train_accuracy",
         "mean_update_norm", "epsilon", "gain"],
        (
            [row.value, row.mean_test_accuracy, row.std_test_accuracy, row.mean_train_accuracy,
             row.mean_update_norm, row.epsilon, row.gain]
            for row in rows
        ),
    )
    console.print(f"📋 已保存: [green]{path}[/green]")


def _scalar(raw: str):
    """扫描取值: 能解析为数字就用数字，否则保留字符串 (如 iid)"""
    raw = raw.strip()
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    return raw


@app.command()
def init(
    config_path: Path = typer.Option(Path("config.yaml"), "--path", "-p", help="要创建的配置文件"),
) -> None:
    """初始化配置文件"""
    example_path = Path(__file__).parent.parent / "config.example.yaml"

    if config_path.exists():
        console.print(f"[yellow]{config_path} 已存在[/yellow]")
        overwrite = typer.confirm("是否覆盖?")
        if not overwrite:
            raise typer.Exit(0)

    if example_path.exists():
        shutil.copy(example_path, config_path)
    else:
        # 安装后的包中没有示例文件，写出全部默认值
        with open(config_path, "w", encoding="utf-8") as f:
            f.write("# DP-FedSAM 配置文件\n\n")
            yaml.safe_dump(RunConfigFile().model_dump(mode="json"), f, allow_unicode=True, sort_keys=False)

    console.print(f"[green]✅ 配置文件已创建: {config_path}[/green]")
    console.print("编辑后运行: dp-fedsam train --config " + str(config_path))


def main():
    """主入口"""
    app()


if __name__ == "__main__":
    main()
