"""
app/services/experiment.py
WDL / WDL(+Seq) / BST 비교 실험과 순서 검증
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from app.core.config import BstConfig, ExperimentConfig, RunConfig
from app.core.exceptions import AcceptanceError
from app.core.logging import get_logger
from app.models.schemas import Metrics, ModelKind
from app.services.checkpoint import save_checkpoint
from app.services.evaluator import compare_report, evaluate, write_metrics
from app.services.features import encode_examples, load_examples
from app.services.pipeline import (
    RunPaths,
    generate_dataset,
    guard_overwrite,
    kind_slug,
    load_or_build_spec,
    write_config_echo,
)
from app.services.trainer import train, write_loss_log

logger = get_logger(__name__)

ABLATION_BLOCKS = (2, 3)


@dataclass
class SeedOutcome:
    """시드 하나의 비교 결과와 마진"""

    seed: int
    records: List[Metrics]
    bst_margin: float
    seq_margin: float
    latency_ok: bool
    passed: bool

    def describe(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"seed {self.seed}: {status} - AUC(BST)-AUC(WDL+Seq)={self.bst_margin:+.4f}, "
            f"AUC(WDL+Seq)-AUC(WDL)={self.seq_margin:+.4f}, RT(BST)>=RT(WDL)={self.latency_ok}"
        )


@dataclass
class ExperimentResult:
    outcomes: List[SeedOutcome] = field(default_factory=list)
    report: str = ""
    required_passes: int = 0

    @property
    def passes(self) -> int:
        return sum(outcome.passed for outcome in self.outcomes)

    @property
    def passed(self) -> bool:
        return self.passes >= self.required_passes

    @property
    def records(self) -> List[Metrics]:
        return [record for outcome in self.outcomes for record in outcome.records]


def comparison_plan(model: BstConfig, ablate_blocks: bool) -> List[Tuple[ModelKind, BstConfig]]:
    """학습 순서: WDL, WDL(+Seq), BST(b=1) [, BST(b=2), BST(b=3)]"""
    plan = [
        (ModelKind.WDL, model),
        (ModelKind.WDL_SEQ, model),
        (ModelKind.BST, model.model_copy(update={"num_blocks": 1})),
    ]
    if ablate_blocks:
        plan += [(ModelKind.BST, model.model_copy(update={"num_blocks": b})) for b in ABLATION_BLOCKS]
    return plan


def check_ordering(records: List[Metrics], experiment: ExperimentConfig) -> Tuple[float, float, bool, bool]:
    """BST(b=1) ≥ WDL(+Seq) + bst_margin, WDL(+Seq) ≥ WDL + seq_margin, RT(BST) ≥ RT(WDL)"""
    by_tag: Dict[str, Metrics] = {r.model: r for r in records}
    bst, seq, wdl = by_tag["BST(b=1)"], by_tag["WDL(+Seq)"], by_tag["WDL"]
    bst_margin = bst.auc - seq.auc
    seq_margin = seq.auc - wdl.auc

    latency_ok = True
    if bst.latency is not None and wdl.latency is not None:
        latency_ok = bst.latency.batch1_mean_ms >= wdl.latency.batch1_mean_ms
    passed = bst_margin >= experiment.bst_margin and seq_margin >= experiment.seq_margin and latency_ok
    return bst_margin, seq_margin, latency_ok, passed


def run_seed(config: RunConfig, paths: RunPaths, force: bool) -> SeedOutcome:
    """같은 데이터/시드로 모든 모델 학습 후 평가"""
    if not (paths.train.exists() and paths.test.exists()):
        generate_dataset(config, paths, force=force)
    train_examples = load_examples(paths.train)
    test_examples = load_examples(paths.test)
    spec = load_or_build_spec(config, paths, train_examples)

    length = config.model.sequence_length
    train_data = encode_examples(train_examples, spec, length)
    test_data = encode_examples(test_examples, spec, length)

    schedule = config.experiment.train_schedule(config.train)
    records: List[Metrics] = []
    for kind, model_config in comparison_plan(config.model, config.experiment.ablate_blocks):
        run_config = config.with_overrides(
            model=model_config.model_dump(),
            train=schedule.model_copy(update={"model": kind}).model_dump(),
        )
        slug = kind_slug(kind, model_config)
        result = train(kind, train_data, spec, model_config, schedule, config.seed)
        save_checkpoint(paths.root / "checkpoints" / slug, result.state, run_config.echo(), spec.vocab_sizes())
        write_loss_log(result.losses, paths.root / f"loss_{slug}.tsv")
        records.append(
            evaluate(
                test_data, result.state.params, spec, model_config, config.eval,
                seed=config.seed, config_echo=run_config.echo(),
            )
        )

    bst_margin, seq_margin, latency_ok, passed = check_ordering(records, config.experiment)
    outcome = SeedOutcome(config.seed, records, bst_margin, seq_margin, latency_ok, passed)
    logger.info(outcome.describe())
    return outcome


def run_experiment(config: RunConfig, paths: RunPaths, force: bool = False) -> ExperimentResult:
    """시드 N 개 반복 비교. 통과 비율 미달이면 리포트 기록 후 AcceptanceError"""
    guard_overwrite([paths.metrics, paths.report], force)
    paths.ensure_root()
    write_config_echo(config, paths)

    experiment = config.experiment
    result = ExperimentResult(required_passes=math.ceil(experiment.required_pass_ratio * experiment.seeds - 1e-9))
    for offset in range(experiment.seeds):
        seed = config.seed + offset
        seed_config = config.with_overrides(seed=seed)
        seed_root = paths.root if experiment.seeds == 1 else paths.root / f"seed-{seed}"
        seed_paths = RunPaths.from_config(seed_config, seed_root)
        result.outcomes.append(run_seed(seed_config, seed_paths, force))

    summary = [outcome.describe() for outcome in result.outcomes]
    summary.append(f"통과 {result.passes}/{experiment.seeds} (필요 {result.required_passes})")
    result.report = compare_report(result.records) + "\n".join(summary) + "\n"

    write_metrics(result.records, paths.metrics)
    paths.report.write_text(result.report, encoding="utf-8")

    if not result.passed:
        raise AcceptanceError(
            "비교 실험 순서 검증 실패 - " + "; ".join(summary)
        )
    return result
