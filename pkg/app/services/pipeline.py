"""
app/services/pipeline.py
CLI 명령과 비교 실험이 공유하는 실행 단계 (데이터 생성, 학습, 평가, 예측)
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

import numpy as np

from app.core.config import BstConfig, RunConfig
from app.core.exceptions import MissingArtifactError, OverwriteRefusedError
from app.core.logging import get_logger
from app.models.schemas import DatasetMeta, Metrics, ModelKind
from app.services.bst_model import init_params
from app.services.checkpoint import (
    Checkpoint,
    load_checkpoint,
    save_checkpoint,
    verify_shapes,
    verify_vocab_sizes,
)
from app.services.evaluator import compare_report, evaluate, score, write_metrics
from app.services.features import (
    FeatureSpec,
    base_rate,
    build_feature_spec,
    dump_json,
    encode_examples,
    load_examples,
    temporal_split,
    write_examples,
)
from app.services.synth import synth_generate
from app.services.trainer import TrainResult, train, write_loss_log

logger = get_logger(__name__)


@dataclass(frozen=True)
class RunPaths:
    """실행 디렉터리 내 산출물 경로"""

    root: Path
    train: Path
    test: Path
    meta: Path
    spec: Path
    checkpoint: Path
    loss_log: Path
    metrics: Path
    report: Path
    config_echo: Path

    @classmethod
    def from_config(cls, config: RunConfig, root: Optional[Path] = None) -> "RunPaths":
        p = config.paths
        root = Path(root) if root is not None else resolve_run_dir(config)
        return cls(
            root=root,
            train=root / p.train_file,
            test=root / p.test_file,
            meta=root / p.meta_file,
            spec=root / p.spec_file,
            checkpoint=root / p.checkpoint_dir,
            loss_log=root / p.loss_log,
            metrics=root / p.metrics_file,
            report=root / p.report_file,
            config_echo=root / p.config_echo,
        )

    def ensure_root(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)


def resolve_run_dir(config: RunConfig) -> Path:
    """기본 실행 디렉터리: runs/<YYYYmmdd-HHMMSS>-seed<seed>"""
    if config.paths.run_dir is not None:
        return Path(config.paths.run_dir)
    return Path("runs") / f"{datetime.now():%Y%m%d-%H%M%S}-seed{config.seed}"


def guard_overwrite(paths: Iterable[Path], force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise OverwriteRefusedError(f"이미 존재하는 산출물입니다 (덮어쓰려면 --force): {', '.join(existing)}")


def require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(path, what)
    return Path(path)


def write_config_echo(config: RunConfig, paths: RunPaths) -> None:
    dump_json(config.echo(), paths.config_echo)


# ---------------------------------------------------------------------------
# 단계
# ---------------------------------------------------------------------------

def generate_dataset(config: RunConfig, paths: RunPaths, force: bool = False) -> DatasetMeta:
    """합성 데이터 생성 → 시간 분할 → train/test 파일과 메타데이터 기록"""
    guard_overwrite([paths.train, paths.test, paths.meta], force)
    paths.ensure_root()

    synth = config.synth
    examples = synth_generate(synth, config.seed)
    train_examples, test_examples = temporal_split(examples, synth.boundary_time)
    write_examples(train_examples, paths.train)
    write_examples(test_examples, paths.test)

    meta = DatasetMeta(
        train_count=len(train_examples),
        test_count=len(test_examples),
        train_base_rate=base_rate(train_examples),
        test_base_rate=base_rate(test_examples),
        days=synth.days,
        split_day=synth.split_day,
        train_days=synth.split_day - 1,
        test_days=synth.days - synth.split_day + 1,
        boundary_time=synth.boundary_time,
        seed=config.seed,
        config=config.echo(),
    )
    dump_json(meta.model_dump(mode="json"), paths.meta)
    logger.info(
        f"데이터셋 기록 완료 - 학습 {meta.train_count}개 ({meta.train_days}일), "
        f"테스트 {meta.test_count}개 ({meta.test_days}일), 학습 클릭률 {meta.train_base_rate:.4f}"
    )
    return meta


def load_or_build_spec(config: RunConfig, paths: RunPaths, train_examples=None) -> FeatureSpec:
    """스펙 파일이 있으면 로딩, 없으면 학습 분할로 생성 후 저장"""
    if paths.spec.exists():
        return FeatureSpec.load(paths.spec)
    if train_examples is None:
        train_examples = load_examples(require(paths.train, "학습 데이터"))
    spec = build_feature_spec(train_examples, config.features, config.model)
    paths.ensure_root()
    spec.save(paths.spec)
    return spec


def train_model(
    config: RunConfig,
    paths: RunPaths,
    force: bool = False,
    checkpoint_dir: Optional[Path] = None,
) -> Tuple[TrainResult, FeatureSpec]:
    """학습 후 체크포인트, 손실 로그, 설정 echo 기록"""
    checkpoint_dir = checkpoint_dir or paths.checkpoint
    guard_overwrite([checkpoint_dir, paths.loss_log], force)

    train_examples = load_examples(require(paths.train, "학습 데이터"))
    spec = load_or_build_spec(config, paths, train_examples)
    data = encode_examples(train_examples, spec, config.model.sequence_length)

    result = train(config.train.model, data, spec, config.model, config.train, config.seed)
    save_checkpoint(checkpoint_dir, result.state, config.echo(), spec.vocab_sizes())
    write_loss_log(result.losses, paths.loss_log)
    write_config_echo(config, paths)
    return result, spec


def load_trained_model(config: RunConfig, paths: RunPaths) -> Tuple[Checkpoint, FeatureSpec, BstConfig]:
    """체크포인트 + 스펙 로딩, 어휘 크기와 파라미터 shape 검증"""
    spec = FeatureSpec.load(require(paths.spec, "피처 스펙"))
    require(paths.checkpoint, "체크포인트")
    checkpoint = load_checkpoint(paths.checkpoint)
    verify_vocab_sizes(checkpoint, spec.vocab_sizes())

    model_config = BstConfig(**checkpoint.config["model"]) if "model" in checkpoint.config else config.model
    verify_shapes(checkpoint.params.shapes(), init_params(checkpoint.kind, spec, model_config, seed=0).shapes())
    return checkpoint, spec, model_config


def evaluate_model(config: RunConfig, paths: RunPaths, force: bool = False) -> Tuple[Metrics, str]:
    guard_overwrite([paths.metrics, paths.report], force)
    checkpoint, spec, model_config = load_trained_model(config, paths)
    test_examples = load_examples(require(paths.test, "테스트 데이터"))
    data = encode_examples(test_examples, spec, model_config.sequence_length)

    metrics = evaluate(
        data, checkpoint.params, spec, model_config, config.eval,
        seed=config.seed, config_echo=config.echo(),
    )
    report = compare_report([metrics])
    write_metrics([metrics], paths.metrics)
    paths.report.write_text(report, encoding="utf-8")
    return metrics, report


def predict_file(
    config: RunConfig,
    paths: RunPaths,
    input_path: Path,
    output_path: Path,
    force: bool = False,
) -> List[float]:
    """입력 순서대로 한 줄에 확률 하나 기록 (라벨 선택)"""
    guard_overwrite([output_path], force)
    checkpoint, spec, model_config = load_trained_model(config, paths)
    examples = load_examples(require(input_path, "예측 입력"), require_label=False)
    data = encode_examples(examples, spec, model_config.sequence_length)
    probabilities = score(data, checkpoint.params, spec, model_config, config.eval.batch_size, config.eval.workers)

    Path(output_path).parent.mkdir(parents=True, exist_ok=True)
    with Path(output_path).open("w", encoding="utf-8", newline="\n") as f:
        for p in probabilities:
            f.write(f"{float(p)!r}\n")
    logger.info(f"예측 완료 - {len(examples)}개 → {output_path}")
    return [float(p) for p in np.asarray(probabilities)]


def kind_slug(kind: ModelKind, config: BstConfig) -> str:
    kind = ModelKind(kind)
    return f"bst_b{config.num_blocks}" if kind == ModelKind.BST else kind.value

