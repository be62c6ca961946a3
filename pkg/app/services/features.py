"""
app/services/features.py
피처 파이프라인 - 어휘 생성, 위치 버킷, 인코딩, 시간 분할, 데이터셋 입출력
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from app.core.config import BstConfig, FeatureConfig
from app.core.exceptions import ChronologyError, DatasetFormatError, FeatureSpecError
from app.core.logging import get_logger
from app.models.schemas import ColumnDocument, Example, FeatureSpecDocument

logger = get_logger(__name__)

PAD_ID = 0
OOV_ID = 1
RESERVED_IDS = 2
FEATURE_SPEC_VERSION = 1
CROSS_SEPARATOR = "\x1f"
TARGET_COLUMNS = ("item_id", "category_id")


# ---------------------------------------------------------------------------
# 어휘
# ---------------------------------------------------------------------------

@dataclass
class Vocabulary:
    """한 컬럼의 token → id 매핑 (0=padding, 1=oov 예약)"""

    name: str
    kind: str
    dim: int
    token_to_id: Dict[str, int] = field(default_factory=dict)
    cross_of: Optional[Tuple[str, str]] = None

    @property
    def size(self) -> int:
        return RESERVED_IDS + len(self.token_to_id)

    def encode(self, token: Optional[str]) -> int:
        if token is None:
            return OOV_ID
        return self.token_to_id.get(token, OOV_ID)

    def token_of(self, token_id: int) -> Optional[str]:
        """id → token 역매핑 (예약 id 는 None)"""
        if token_id < RESERVED_IDS:
            return None
        return self._id_to_token()[token_id - RESERVED_IDS]

    def _id_to_token(self) -> List[str]:
        ordered = sorted(self.token_to_id.items(), key=lambda kv: kv[1])
        return [token for token, _ in ordered]

    def to_document(self) -> ColumnDocument:
        return ColumnDocument(
            name=self.name,
            kind=self.kind,
            dim=self.dim,
            entries=sorted(self.token_to_id.items(), key=lambda kv: kv[1]),
            vocab_size=self.size,
            cross_of=self.cross_of,
        )

    @classmethod
    def from_document(cls, doc: ColumnDocument) -> "Vocabulary":
        ids = sorted(token_id for _, token_id in doc.entries)
        if ids != list(range(RESERVED_IDS, RESERVED_IDS + len(ids))) or doc.vocab_size != RESERVED_IDS + len(ids):
            raise FeatureSpecError(f"'{doc.name}' 컬럼 id 가 연속적이지 않습니다")
        mapping = dict(doc.entries)
        if len(mapping) != len(doc.entries):
            raise FeatureSpecError(f"'{doc.name}' 컬럼에 중복 토큰이 있습니다")
        return cls(name=doc.name, kind=doc.kind, dim=doc.dim, token_to_id=mapping, cross_of=doc.cross_of)


def _build_vocabulary(
    name: str,
    kind: str,
    dim: int,
    counts: Counter,
    min_count: int,
    max_vocab: Optional[int],
    cross_of: Optional[Tuple[str, str]] = None,
) -> Vocabulary:
    # 빈도 내림차순, 동률은 토큰 사전순
    kept = sorted(
        ((token, count) for token, count in counts.items() if count >= min_count),
        key=lambda tc: (-tc[1], tc[0]),
    )
    if max_vocab is not None:
        kept = kept[:max_vocab]
    mapping = {token: RESERVED_IDS + i for i, (token, _) in enumerate(kept)}
    return Vocabulary(name=name, kind=kind, dim=dim, token_to_id=mapping, cross_of=cross_of)


@dataclass
class FeatureSpec:
    """컬럼별 어휘, 임베딩 차원, 위치 버킷 경계"""

    item: Vocabulary
    category: Vocabulary
    others: List[Vocabulary]
    bucket_edges: List[int]
    position_dim: int

    @property
    def num_position_buckets(self) -> int:
        # 0 (시간차 0) + 유한 경계 구간들 + overflow
        return len(self.bucket_edges) + 2

    @property
    def other_columns(self) -> List[str]:
        return [vocab.name for vocab in self.others]

    def vocab_sizes(self) -> Dict[str, int]:
        sizes = {"item_id": self.item.size, "category_id": self.category.size}
        sizes.update({vocab.name: vocab.size for vocab in self.others})
        sizes["position"] = self.num_position_buckets
        return sizes

    def other_token(self, example: Example, vocab: Vocabulary) -> Optional[str]:
        if vocab.cross_of is None:
            return example.other_features.get(vocab.name)
        parts = [_column_token(example, column) for column in vocab.cross_of]
        if any(part is None for part in parts):
            return None
        return CROSS_SEPARATOR.join(parts)

    def to_document(self) -> FeatureSpecDocument:
        position = ColumnDocument(
            name="position",
            kind="position",
            dim=self.position_dim,
            entries=[],
            vocab_size=self.num_position_buckets,
        )
        return FeatureSpecDocument(
            format_version=FEATURE_SPEC_VERSION,
            bucket_edges=list(self.bucket_edges),
            columns=[self.item.to_document(), self.category.to_document(), position]
            + [vocab.to_document() for vocab in self.others],
        )

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_document().model_dump_json(indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "FeatureSpec":
        path = Path(path)
        if not path.is_file():
            raise FeatureSpecError(f"피처 스펙 파일이 존재하지 않습니다: {path}")
        try:
            doc = FeatureSpecDocument.model_validate_json(path.read_text(encoding="utf-8"))
        except ValidationError as e:
            raise FeatureSpecError(f"피처 스펙 파일 형식 오류: {path} - {e.errors()[0]['msg']}") from e
        if doc.format_version != FEATURE_SPEC_VERSION:
            raise FeatureSpecError(
                f"지원하지 않는 피처 스펙 버전입니다: {doc.format_version} (지원: {FEATURE_SPEC_VERSION})"
            )

        by_kind: Dict[str, List[ColumnDocument]] = {}
        for column in doc.columns:
            by_kind.setdefault(column.kind, []).append(column)
        try:
            (item_doc,) = by_kind["item"]
            (category_doc,) = by_kind["category"]
            (position_doc,) = by_kind["position"]
        except (KeyError, ValueError) as e:
            raise FeatureSpecError(f"피처 스펙에 item/category/position 컬럼이 하나씩 필요합니다: {path}") from e

        spec = cls(
            item=Vocabulary.from_document(item_doc),
            category=Vocabulary.from_document(category_doc),
            others=[Vocabulary.from_document(c) for c in doc.columns if c.kind in ("other", "cross")],
            bucket_edges=list(doc.bucket_edges),
            position_dim=position_doc.dim,
        )
        if position_doc.vocab_size != spec.num_position_buckets:
            raise FeatureSpecError("position 버킷 수가 bucket_edges 와 맞지 않습니다")
        return spec


def _column_token(example: Example, column: str) -> Optional[str]:
    if column == "item_id":
        return example.target.item_id
    if column == "category_id":
        return example.target.category_id
    return example.other_features.get(column)


def build_feature_spec(
    examples: Iterable[Example],
    features: FeatureConfig,
    model: BstConfig,
) -> FeatureSpec:
    """학습 분할로부터 어휘 생성"""
    item_counts: Counter = Counter()
    category_counts: Counter = Counter()
    other_counts: Dict[str, Counter] = {}
    crosses = [tuple(name.split("*")) for name in features.cross_features]
    cross_counts: Dict[str, Counter] = {name: Counter() for name in features.cross_features}

    seen = 0
    for example in examples:
        seen += 1
        for event in example.sequence:
            item_counts[event.item_id] += 1
            category_counts[event.category_id] += 1
        item_counts[example.target.item_id] += 1
        category_counts[example.target.category_id] += 1
        for column, token in example.other_features.items():
            other_counts.setdefault(column, Counter())[token] += 1
        for name, (a, b) in zip(features.cross_features, crosses):
            left, right = _column_token(example, a), _column_token(example, b)
            if left is not None and right is not None:
                cross_counts[name][f"{left}{CROSS_SEPARATOR}{right}"] += 1

    if seen == 0:
        raise FeatureSpecError("어휘를 만들 예제가 없습니다 (빈 학습 데이터)")

    known = set(other_counts) | set(TARGET_COLUMNS)
    for name, pair in zip(features.cross_features, crosses):
        missing = [c for c in pair if c not in known]
        if missing:
            raise FeatureSpecError(f"교차 피처 '{name}' 의 컬럼이 데이터에 없습니다: {missing}")

    def vocab(name, kind, dim, counts, cross_of=None):
        return _build_vocabulary(name, kind, dim, counts, features.min_count, features.max_vocab, cross_of)

    others = [vocab(name, "other", model.other_dim, other_counts[name]) for name in sorted(other_counts)]
    others += [
        vocab(name, "cross", model.other_dim, cross_counts[name], cross_of=pair)
        for name, pair in zip(features.cross_features, crosses)
    ]
    spec = FeatureSpec(
        item=vocab("item_id", "item", model.item_dim, item_counts),
        category=vocab("category_id", "category", model.category_dim, category_counts),
        others=others,
        bucket_edges=list(features.bucket_edges),
        position_dim=model.position_dim,
    )
    logger.info(f"피처 스펙 생성 완료 - 예제 {seen}개, 어휘 크기 {spec.vocab_sizes()}")
    return spec


# ---------------------------------------------------------------------------
# 위치 피처
# ---------------------------------------------------------------------------

def position_feature(event_time: int, recommend_time: int, bucket_edges: Sequence[int]) -> int:
    """시간차 버킷. 0 → 0, 그 외 1 + (delta 보다 큰 첫 경계의 인덱스), 마지막 경계 초과 → len(edges)+1

    버킷 0 은 padding 행이기도 하다. 타겟 슬롯(delta 0)과 추천 시각과 같은 초의 이벤트도
    이 행을 쓰므로 position 임베딩 0번 행(0 으로 초기화, 갱신 안 됨)을 받는다.
    """
    delta = recommend_time - event_time
    if delta < 0:
        raise ChronologyError(f"이벤트 시각({event_time}) 이 추천 시각({recommend_time}) 보다 늦습니다")
    if delta == 0:
        return 0
    return 1 + int(np.searchsorted(bucket_edges, delta, side="right"))


# ---------------------------------------------------------------------------
# 인코딩
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncodedExample:
    """고정 길이 L 인코딩. 마지막 슬롯은 항상 타겟"""

    item_ids: np.ndarray
    category_ids: np.ndarray
    position_buckets: np.ndarray
    attention_mask: np.ndarray
    other_ids: np.ndarray
    label: Optional[int]


@dataclass
class EncodedBatch:
    """EncodedExample 을 쌓은 배열 묶음 (N 행)"""

    item_ids: np.ndarray          # [N, L] int64
    category_ids: np.ndarray      # [N, L] int64
    position_buckets: np.ndarray  # [N, L] int64
    attention_mask: np.ndarray    # [N, L] bool
    other_ids: np.ndarray         # [N, C] int64
    labels: np.ndarray            # [N] float64, 라벨 없으면 NaN

    def __len__(self) -> int:
        return int(self.item_ids.shape[0])

    @property
    def sequence_length(self) -> int:
        return int(self.item_ids.shape[1])

    @property
    def has_labels(self) -> bool:
        return bool(len(self)) and not np.isnan(self.labels).any()

    def take(self, indices) -> "EncodedBatch":
        indices = np.asarray(indices, dtype=np.int64)
        return EncodedBatch(
            item_ids=self.item_ids[indices],
            category_ids=self.category_ids[indices],
            position_buckets=self.position_buckets[indices],
            attention_mask=self.attention_mask[indices],
            other_ids=self.other_ids[indices],
            labels=self.labels[indices],
        )

    def example(self, index: int) -> EncodedExample:
        label = self.labels[index]
        return EncodedExample(
            item_ids=self.item_ids[index],
            category_ids=self.category_ids[index],
            position_buckets=self.position_buckets[index],
            attention_mask=self.attention_mask[index],
            other_ids=self.other_ids[index],
            label=None if np.isnan(label) else int(label),
        )

    @classmethod
    def stack(cls, encoded: Sequence[EncodedExample], num_other: int, length: int) -> "EncodedBatch":
        if not encoded:
            empty = np.zeros((0, length), dtype=np.int64)
            return cls(empty, empty.copy(), empty.copy(), empty.astype(bool),
                       np.zeros((0, num_other), dtype=np.int64), np.zeros(0))
        return cls(
            item_ids=np.stack([e.item_ids for e in encoded]),
            category_ids=np.stack([e.category_ids for e in encoded]),
            position_buckets=np.stack([e.position_buckets for e in encoded]),
            attention_mask=np.stack([e.attention_mask for e in encoded]),
            other_ids=np.stack([e.other_ids for e in encoded]).reshape(len(encoded), num_other),
            labels=np.array([np.nan if e.label is None else float(e.label) for e in encoded]),
        )


def encode_example(example: Example, spec: FeatureSpec, sequence_length: int) -> EncodedExample:
    """최근 L-1 이벤트 유지, 왼쪽 padding, 마지막 슬롯에 타겟 (버킷 0)"""
    if sequence_length < 2:
        raise FeatureSpecError(f"시퀀스 길이는 2 이상이어야 합니다: {sequence_length}")
    history = example.sequence[-(sequence_length - 1):] if sequence_length > 1 else []
    offset = sequence_length - 1 - len(history)

    item_ids = np.zeros(sequence_length, dtype=np.int64)
    category_ids = np.zeros(sequence_length, dtype=np.int64)
    buckets = np.zeros(sequence_length, dtype=np.int64)
    mask = np.zeros(sequence_length, dtype=bool)

    for slot, event in enumerate(history, start=offset):
        item_ids[slot] = spec.item.encode(event.item_id)
        category_ids[slot] = spec.category.encode(event.category_id)
        buckets[slot] = position_feature(event.timestamp, example.recommend_time, spec.bucket_edges)
        mask[slot] = True

    item_ids[-1] = spec.item.encode(example.target.item_id)
    category_ids[-1] = spec.category.encode(example.target.category_id)
    mask[-1] = True

    other_ids = np.array(
        [vocab.encode(spec.other_token(example, vocab)) for vocab in spec.others], dtype=np.int64
    )
    return EncodedExample(item_ids, category_ids, buckets, mask, other_ids, example.label)


def encode_examples(examples: Iterable[Example], spec: FeatureSpec, sequence_length: int) -> EncodedBatch:
    encoded = [encode_example(e, spec, sequence_length) for e in examples]
    return EncodedBatch.stack(encoded, len(spec.others), sequence_length)


# ---------------------------------------------------------------------------
# 시간 분할 / 입출력
# ---------------------------------------------------------------------------

def temporal_split(examples: Iterable[Example], boundary_time: int) -> Tuple[List[Example], List[Example]]:
    """추천 시각 < boundary → 학습, 그 외 → 테스트"""
    train: List[Example] = []
    test: List[Example] = []
    for example in examples:
        (train if example.recommend_time < boundary_time else test).append(example)
    if not train or not test:
        logger.warning(
            f"분할 경계 {boundary_time} 가 데이터 범위를 벗어났습니다 - 학습 {len(train)}개, 테스트 {len(test)}개"
        )
    return train, test


def _error_field(error: ValidationError) -> Tuple[str, str]:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first.get("loc", ())) or "<record>"
    if first.get("type") == "json_invalid":
        location = "<json>"
    return location, first.get("msg", str(error))


def iter_examples(path: Path, require_label: bool = True) -> Iterator[Example]:
    """라인 단위 JSON 데이터셋 스트림 읽기"""
    path = Path(path)
    if not path.is_file():
        raise DatasetFormatError(str(path), 0, "<file>", "파일이 존재하지 않습니다")
    with path.open("r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                example = Example.model_validate_json(line)
            except ValidationError as e:
                where, message = _error_field(e)
                raise DatasetFormatError(str(path), line_number, where, message) from e
            if require_label and example.label is None:
                raise DatasetFormatError(str(path), line_number, "label", "필수 필드가 없습니다")
            yield example


def load_examples(path: Path, require_label: bool = True) -> List[Example]:
    return list(iter_examples(path, require_label=require_label))


def write_examples(examples: Iterable[Example], path: Path) -> int:
    """예제를 한 줄에 하나씩 기록하고 개수 반환"""
    count = 0
    with Path(path).open("w", encoding="utf-8", newline="\n") as f:
        for example in examples:
            f.write(example.to_line())
            f.write("\n")
            count += 1
    return count


def base_rate(examples: Sequence[Example]) -> float:
    labelled = [e.label for e in examples if e.label is not None]
    return float(np.mean(labelled)) if labelled else 0.0


def dump_json(data, path: Path) -> None:
    """정렬된 키로 JSON 기록 (재실행 시 바이트 동일)"""
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
