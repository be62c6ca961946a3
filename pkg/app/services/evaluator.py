"""
app/services/evaluator.py
오프라인 평가 - AUC, logloss, 지연 시간, 비교 리포트
"""

from __future__ import annotations

import io
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from app.core.config import BstConfig, EvalConfig
from app.core.exceptions import DatasetEmptyError, MetricError
from app.core.logging import get_logger
from app.core.ops import SIGMOID_CEIL, SIGMOID_FLOOR
from app.models.schemas import LatencyStats, Metrics
from app.services.bst_model import ModelParams, model_tag, predict_proba
from app.services.features import EncodedBatch, FeatureSpec

logger = get_logger(__name__)

MISSING_CELL = "-"


# ---------------------------------------------------------------------------
# 지표
# ---------------------------------------------------------------------------

def _validate_scores(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise MetricError(f"점수와 라벨 길이가 다릅니다: {scores.shape[0]} != {labels.shape[0]}")
    if np.isnan(scores).any():
        raise MetricError("점수에 NaN 이 있습니다")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("라벨은 0 또는 1 이어야 합니다")
    return scores, labels.astype(np.int64)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney 순위합 AUC, 동점은 평균 순위

    정수 연산: 2R⁺ = Σ (2·start + count + 1), U₂ = 2R⁺ - n⁺(n⁺+1), AUC = U₂ / (2n⁺n⁻)
    """
    scores, labels = _validate_scores(scores, labels)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"AUC 를 계산하려면 양성/음성이 모두 필요합니다 (양성 {n_pos}, 음성 {n_neg})")

    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    # 동점 그룹 시작 위치와 크기
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    counts = np.diff(np.r_[starts, sorted_scores.size])
    positives_per_group = np.add.reduceat(sorted_labels, starts)

    twice_rank = 2 * starts + counts + 1
    rank_sum_twice = sum(int(r) * int(p) for r, p in zip(twice_rank, positives_per_group) if p)
    u_twice = rank_sum_twice - n_pos * (n_pos + 1)
    return u_twice / (2 * n_pos * n_neg)


def logloss(probabilities: Sequence[float], labels: Sequence[int]) -> float:
    probs, labels = _validate_scores(probabilities, labels)
    if probs.size == 0:
        raise MetricError("빈 입력의 logloss 는 정의되지 않습니다")
    probs = np.clip(probs, SIGMOID_FLOOR, SIGMOID_CEIL)
    return float(-np.mean(labels * np.log(probs) + (1 - labels) * np.log1p(-probs)))


def expected_auc(scores: Sequence[float], probabilities: Sequence[float]) -> float:
    """라벨 ~ Bernoulli(p) 일 때 스코어러의 모집단 AUC (쌍별 가중치 p_i(1-p_j))"""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    probs = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    if scores.shape != probs.shape or scores.size < 2:
        raise MetricError("expected_auc 입력 길이가 맞지 않거나 너무 짧습니다")

    order = np.argsort(scores, kind="mergesort")
    s, p = scores[order], probs[order]
    q = 1.0 - p
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    pos_group = np.add.reduceat(p, starts)
    neg_group = np.add.reduceat(q, starts)
    self_pairs = np.add.reduceat(p * q, starts)
    neg_below = np.cumsum(neg_group) - neg_group

    numerator = float(np.sum(pos_group * neg_below + 0.5 * (pos_group * neg_group - self_pairs)))
    denominator = float(p.sum() * q.sum() - np.sum(p * q))
    if denominator <= 0:
        raise MetricError("양성/음성 확률 질량이 없어 AUC 가 정의되지 않습니다")
    return numerator / denominator


# ---------------------------------------------------------------------------
# 스코어링 / 지연 시간
# ---------------------------------------------------------------------------

def score(
    data: EncodedBatch,
    params: ModelParams,
    spec: FeatureSpec,
    config: BstConfig,
    batch_size: int = 1024,
    workers: int = 1,
) -> np.ndarray:
    """eval 모드 배치 스코어링. workers > 1 이면 스레드 샤딩 (입력 순서 유지)"""
    if len(data) == 0:
        return np.zeros(0)
    chunks = [np.arange(start, min(start + batch_size, len(data))) for start in range(0, len(data), batch_size)]

    def run(indices: np.ndarray) -> np.ndarray:
        return predict_proba(data.take(indices), params, spec, config)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="score") as executor:
            parts = list(executor.map(run, chunks))
    else:
        parts = [run(chunk) for chunk in chunks]
    return np.concatenate(parts)


def measure_latency(
    data: EncodedBatch,
    params: ModelParams,
    spec: FeatureSpec,
    config: BstConfig,
    warmup: int = 100,
    samples: int = 200,
    throughput_batch: int = 256,
    throughput_repeats: int = 5,
) -> LatencyStats:
    """배치 1 forward 지연 (웜업 제외) 과 배치 256 의 예제당 평균 (밀리초)"""
    if len(data) == 0:
        raise DatasetEmptyError("지연 시간을 측정할 예제가 없습니다")
    singles = [data.take([i % len(data)]) for i in range(warmup + samples)]
    timings = np.empty(samples)
    for i, single in enumerate(singles):
        start = time.perf_counter()
        predict_proba(single, params, spec, config)
        elapsed = time.perf_counter() - start
        if i >= warmup:
            timings[i - warmup] = elapsed * 1000.0

    wide = data.take(np.arange(throughput_batch) % len(data))
    predict_proba(wide, params, spec, config)
    start = time.perf_counter()
    for _ in range(throughput_repeats):
        predict_proba(wide, params, spec, config)
    per_example = (time.perf_counter() - start) * 1000.0 / (throughput_repeats * throughput_batch)

    return LatencyStats(
        batch1_mean_ms=float(timings.mean()),
        batch1_p50_ms=float(np.percentile(timings, 50)),
        batch1_p99_ms=float(np.percentile(timings, 99)),
        batch256_mean_ms=float(per_example),
        timed_samples=samples,
    )


def evaluate(
    data: EncodedBatch,
    params: ModelParams,
    spec: FeatureSpec,
    model_config: BstConfig,
    eval_config: Optional[EvalConfig] = None,
    with_latency: bool = True,
    seed: Optional[int] = None,
    config_echo: Optional[Dict[str, Any]] = None,
) -> Metrics:
    """eval 모드 AUC + logloss (+ 지연 시간)"""
    eval_config = eval_config or EvalConfig()
    if len(data) == 0:
        raise DatasetEmptyError("평가 데이터가 비어 있습니다")
    if not data.has_labels:
        raise MetricError("평가 데이터에 라벨이 없는 예제가 있습니다")

    labels = data.labels.astype(np.int64)
    probabilities = score(data, params, spec, model_config, eval_config.batch_size, eval_config.workers)
    metrics = Metrics(
        model=model_tag(params.kind, model_config),
        kind=params.kind,
        auc=auc(probabilities, labels),
        logloss=logloss(probabilities, labels),
        n_pos=int(labels.sum()),
        n_neg=int(labels.size - labels.sum()),
        latency=(
            measure_latency(
                data, params, spec, model_config,
                eval_config.warmup, eval_config.latency_samples, eval_config.latency_batch,
            )
            if with_latency else None
        ),
        seed=seed,
        config=config_echo or {},
    )
    logger.info(f"[{metrics.model}] 평가 완료 - AUC {metrics.auc:.4f}, logloss {metrics.logloss:.4f}")
    return metrics


# ---------------------------------------------------------------------------
# 리포트
# ---------------------------------------------------------------------------

def _fmt_ms(value: Optional[float]) -> str:
    return MISSING_CELL if value is None else f"{value:.3f}"


def build_report_table(records: Iterable[Metrics]) -> Table:
    table = Table(title="Offline comparison", show_lines=False)
    table.add_column("Model", style="cyan")
    table.add_column("Seed", justify="right")
    table.add_column("AUC", justify="right", style="green")
    table.add_column("Logloss", justify="right")
    table.add_column("RT mean (ms)", justify="right")
    table.add_column("RT p99 (ms)", justify="right")
    table.add_column("RT b256 (ms/ex)", justify="right")

    for record in sorted(records, key=lambda r: r.auc, reverse=True):
        latency = record.latency
        table.add_row(
            record.model,
            MISSING_CELL if record.seed is None else str(record.seed),
            f"{record.auc:.4f}",
            f"{record.logloss:.4f}",
            _fmt_ms(latency.batch1_mean_ms if latency else None),
            _fmt_ms(latency.batch1_p99_ms if latency else None),
            _fmt_ms(latency.batch256_mean_ms if latency else None),
        )
    return table


def compare_report(records: Sequence[Metrics], width: int = 110) -> str:
    """AUC 내림차순 정렬 텍스트 표 (AUC 소수점 4자리, 지연 없음은 '-')"""
    if not records:
        raise MetricError("리포트할 평가 결과가 없습니다")
    buffer = io.StringIO()
    console = Console(file=buffer, width=width, color_system=None, force_terminal=False)
    console.print(build_report_table(records))
    return buffer.getvalue()


def write_metrics(records: Iterable[Metrics], path: Path, append: bool = False) -> None:
    """한 줄에 한 모델씩 JSON 레코드"""
    with Path(path).open("a" if append else "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(record.model_dump_json())
            f.write("\n")


def read_metrics(path: Path) -> List[Metrics]:
    records = []
    for line_number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(Metrics.model_validate_json(line))
        except ValidationError as e:
            raise MetricError(f"{path}:{line_number} 지표 레코드 파싱 실패 - {e.errors()[0]['msg']}") from e
    return records
