"""
app/cli.py
bst 명령행 인터페이스 (gen-data, train, eval, predict, experiment)
"""

from pathlib import Path
from typing import Annotated, Any, Dict, Optional

import typer
from rich.console import Console
from rich.table import Table

from app import __version__
from app.core.config import RunConfig, load_run_config
from app.core.exceptions import AcceptanceError
from app.core.logging import get_logger, setup_logging
from app.models.schemas import ModelKind, ReadoutMode
from app.services import experiment as experiment_service
from app.services import pipeline

logger = get_logger("cli")
console = Console()

cli = typer.Typer(
    name="bst",
    help="Behavior Sequence Transformer CTR 엔진 - 데이터 생성, 학습, 평가, 비교 실험",
    no_args_is_help=True,
    add_completion=False,
)

# 공통 옵션
ConfigOpt = Annotated[Optional[Path], typer.Option("--config", "-c", help="TOML 설정 파일")]
RunDirOpt = Annotated[Optional[Path], typer.Option("--run-dir", help="실행 디렉터리 (기본 runs/<시각>-seed<시드>)")]
SeedOpt = Annotated[Optional[int], typer.Option("--seed", help="최상위 난수 시드")]
ForceOpt = Annotated[bool, typer.Option("--force", help="기존 산출물 덮어쓰기")]
LogLevelOpt = Annotated[Optional[str], typer.Option("--log-level", help="DEBUG | INFO | WARNING | ERROR")]

# 모델/학습 옵션
ModelOpt = Annotated[Optional[ModelKind], typer.Option("--model", help="bst | wdl | wdl_seq")]
BlocksOpt = Annotated[Optional[int], typer.Option("--blocks", help="트랜스포머 블록 수 b")]
HeadsOpt = Annotated[Optional[int], typer.Option("--heads", help="어텐션 헤드 수 h")]
ReadoutOpt = Annotated[Optional[ReadoutMode], typer.Option("--readout", help="flatten_all | target_only")]
EpochsOpt = Annotated[Optional[int], typer.Option("--epochs")]
BatchSizeOpt = Annotated[Optional[int], typer.Option("--batch-size")]
LearningRateOpt = Annotated[Optional[float], typer.Option("--learning-rate")]
DropoutOpt = Annotated[Optional[float], typer.Option("--dropout")]

# 데이터 옵션
DaysOpt = Annotated[Optional[int], typer.Option("--days", help="생성 일수")]
SplitDayOpt = Annotated[Optional[int], typer.Option("--split-day", help="테스트 시작 일자 (1부터)")]
ExamplesOpt = Annotated[Optional[int], typer.Option("--examples", help="생성 예제 수")]
ItemsOpt = Annotated[Optional[int], typer.Option("--items")]
CategoriesOpt = Annotated[Optional[int], typer.Option("--categories")]


def _build_config(
    config_file: Optional[Path],
    run_dir: Optional[Path],
    seed: Optional[int],
    log_level: Optional[str],
    **sections: Dict[str, Any],
) -> RunConfig:
    """기본값 < 환경변수 < 설정 파일 < 플래그 순으로 병합 후 로깅 초기화"""
    overrides: Dict[str, Any] = {
        "seed": seed,
        "paths": {"run_dir": run_dir},
        "logging": {"level": log_level},
        **sections,
    }
    config = load_run_config(config_file, overrides)
    setup_logging(config.logging.level, config.logging.file, config.logging.format)
    return config


def _model_sections(model, blocks, heads, readout, epochs, batch_size, learning_rate, dropout) -> Dict[str, Any]:
    return {
        "model": {"num_blocks": blocks, "num_heads": heads, "readout": readout, "dropout_rate": dropout},
        "train": {"model": model, "epochs": epochs, "batch_size": batch_size, "learning_rate": learning_rate},
    }


def _data_section(days, split_day, examples, items, categories) -> Dict[str, Any]:
    return {
        "synth": {
            "days": days, "split_day": split_day, "n_examples": examples,
            "n_items": items, "n_categories": categories,
        }
    }


@cli.command("gen-data")
def gen_data(
    config_file: ConfigOpt = None,
    run_dir: RunDirOpt = None,
    seed: SeedOpt = None,
    force: ForceOpt = False,
    log_level: LogLevelOpt = None,
    days: DaysOpt = None,
    split_day: SplitDayOpt = None,
    examples: ExamplesOpt = None,
    items: ItemsOpt = None,
    categories: CategoriesOpt = None,
):
    """합성 데이터 생성 후 시간 분할 (train/test)"""
    config = _build_config(
        config_file, run_dir, seed, log_level, **_data_section(days, split_day, examples, items, categories)
    )
    paths = pipeline.RunPaths.from_config(config)
    meta = pipeline.generate_dataset(config, paths, force)

    table = Table(title=f"데이터셋 ({paths.root})")
    table.add_column("분할")
    table.add_column("예제 수", justify="right")
    table.add_column("일수", justify="right")
    table.add_column("클릭률", justify="right")
    table.add_row("train", str(meta.train_count), str(meta.train_days), f"{meta.train_base_rate:.4f}")
    table.add_row("test", str(meta.test_count), str(meta.test_days), f"{meta.test_base_rate:.4f}")
    console.print(table)


@cli.command()
def train(
    config_file: ConfigOpt = None,
    run_dir: RunDirOpt = None,
    seed: SeedOpt = None,
    force: ForceOpt = False,
    log_level: LogLevelOpt = None,
    model: ModelOpt = None,
    blocks: BlocksOpt = None,
    heads: HeadsOpt = None,
    readout: ReadoutOpt = None,
    epochs: EpochsOpt = None,
    batch_size: BatchSizeOpt = None,
    learning_rate: LearningRateOpt = None,
    dropout: DropoutOpt = None,
):
    """선택한 모델 학습 → 체크포인트, 손실 로그"""
    config = _build_config(
        config_file, run_dir, seed, log_level,
        **_model_sections(model, blocks, heads, readout, epochs, batch_size, learning_rate, dropout),
    )
    paths = pipeline.RunPaths.from_config(config)
    result, _ = pipeline.train_model(config, paths, force)
    console.print(
        f"[green]학습 완료[/green] {config.train.model.value} - {result.state.step} 스텝, "
        f"마지막 loss {result.final_loss:.5f}, 체크포인트 {paths.checkpoint}"
    )


@cli.command("eval")
def eval_command(
    config_file: ConfigOpt = None,
    run_dir: RunDirOpt = None,
    seed: SeedOpt = None,
    force: ForceOpt = False,
    log_level: LogLevelOpt = None,
):
    """테스트 분할 평가 (AUC, logloss, 지연 시간)"""
    config = _build_config(config_file, run_dir, seed, log_level)
    paths = pipeline.RunPaths.from_config(config)
    _, report = pipeline.evaluate_model(config, paths, force)
    console.print(report, highlight=False)
    console.print(f"지표 파일: {paths.metrics}")


@cli.command()
def predict(
    input_path: Annotated[Path, typer.Option("--input", "-i", help="예측할 예제 파일 (label 선택)")],
    output_path: Annotated[Optional[Path], typer.Option("--output", "-o", help="확률 출력 파일")] = None,
    config_file: ConfigOpt = None,
    run_dir: RunDirOpt = None,
    seed: SeedOpt = None,
    force: ForceOpt = False,
    log_level: LogLevelOpt = None,
):
    """입력 예제마다 클릭 확률 한 줄씩 출력"""
    config = _build_config(config_file, run_dir, seed, log_level)
    paths = pipeline.RunPaths.from_config(config)
    output_path = output_path or paths.root / "predictions.txt"
    probabilities = pipeline.predict_file(config, paths, input_path, output_path, force)
    console.print(f"{len(probabilities)}개 예측 → {output_path}")


@cli.command()
def experiment(
    config_file: ConfigOpt = None,
    run_dir: RunDirOpt = None,
    seed: SeedOpt = None,
    force: ForceOpt = False,
    log_level: LogLevelOpt = None,
    seeds: Annotated[Optional[int], typer.Option("--seeds", help="반복할 연속 시드 수")] = None,
    ablate_blocks: Annotated[bool, typer.Option("--ablate-blocks", help="BST(b=2), BST(b=3) 추가")] = False,
    heads: HeadsOpt = None,
    readout: ReadoutOpt = None,
    epochs: EpochsOpt = None,
    batch_size: BatchSizeOpt = None,
    learning_rate: LearningRateOpt = None,
    dropout: DropoutOpt = None,
    examples: ExamplesOpt = None,
    days: DaysOpt = None,
    split_day: SplitDayOpt = None,
):
    """WDL / WDL(+Seq) / BST 비교 실험과 순서 검증"""
    sections = _model_sections(None, None, heads, readout, None, None, None, dropout)
    sections.update(_data_section(days, split_day, examples, None, None))
    # 학습 일정 플래그는 비교 실험 일정으로 들어감
    sections["experiment"] = {
        "seeds": seeds,
        "ablate_blocks": True if ablate_blocks else None,
        "epochs": epochs,
        "batch_size": batch_size,
        "learning_rate": learning_rate,
    }
    config = _build_config(config_file, run_dir, seed, log_level, **sections)
    paths = pipeline.RunPaths.from_config(config)
    try:
        result = experiment_service.run_experiment(config, paths, force)
    except AcceptanceError:
        console.print(paths.report.read_text(encoding="utf-8"), highlight=False)
        raise
    console.print(result.report, highlight=False)
    console.print(f"[green]비교 실험 통과[/green] ({result.passes}/{len(result.outcomes)})")


@cli.command()
def version():
    """버전 출력"""
    console.print(f"bst {__version__}")
