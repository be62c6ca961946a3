"""
app/models/schemas.py
데이터셋 레코드, 피처 스펙 문서, 체크포인트 매니페스트, 평가 지표 스키마 정의
"""

from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, StrictInt, field_validator, model_validator


class ModelKind(str, Enum):
    """학습/평가 대상 모델 종류"""
    BST = "bst"
    WDL = "wdl"
    WDL_SEQ = "wdl_seq"


class ReadoutMode(str, Enum):
    """트랜스포머 출력 → MLP 입력 방식"""
    FLATTEN_ALL = "flatten_all"
    TARGET_ONLY = "target_only"


class Mode(str, Enum):
    """forward 실행 모드"""
    TRAIN = "train"
    EVAL = "eval"


# ---------------------------------------------------------------------------
# 데이터셋 레코드 (라인 단위 JSON, 필드명은 파일 포맷 그대로)
# ---------------------------------------------------------------------------

class _Record(BaseModel):
    model_config = ConfigDict(populate_by_name=True, extra="forbid", frozen=True)


class InteractionEvent(_Record):
    """행동 시퀀스의 클릭 이벤트 하나"""

    item_id: str = Field(..., alias="item", min_length=1, description="아이템 토큰")
    category_id: str = Field(..., alias="cat", min_length=1, description="카테고리 토큰")
    timestamp: StrictInt = Field(..., alias="ts", ge=0, description="클릭 시각 (epoch 초)")


class TargetItem(_Record):
    """CTR 을 예측할 후보 아이템"""

    item_id: str = Field(..., alias="item", min_length=1, description="아이템 토큰")
    category_id: str = Field(..., alias="cat", min_length=1, description="카테고리 토큰")


class Example(_Record):
    """라벨이 붙은 학습 인스턴스 하나"""

    sequence: List[InteractionEvent] = Field(
        default_factory=list, alias="seq", description="시간순 행동 시퀀스"
    )
    target: TargetItem = Field(..., description="타겟 아이템")
    recommend_time: StrictInt = Field(..., alias="rt", ge=0, description="추천 시각 (epoch 초)")
    other_features: Dict[str, str] = Field(
        default_factory=dict, alias="feat", description="기타 범주형 피처 (컬럼 → 토큰)"
    )
    label: Optional[StrictInt] = Field(None, description="클릭 여부 (0/1), 예측 입력에서는 생략 가능")

    @field_validator("label")
    @classmethod
    def validate_label(cls, v):
        if v is not None and v not in (0, 1):
            raise ValueError("label 은 0 또는 1 이어야 합니다")
        return v

    @model_validator(mode="after")
    def validate_chronology(self):
        """시퀀스 시각 비감소, 추천 시각 ≥ 마지막 이벤트 시각"""
        times = [event.timestamp for event in self.sequence]
        if any(later < earlier for earlier, later in zip(times, times[1:])):
            raise ValueError("seq 타임스탬프가 시간순이 아닙니다")
        if times and self.recommend_time < times[-1]:
            raise ValueError("rt 가 마지막 이벤트 시각보다 이릅니다")
        return self

    def to_line(self) -> str:
        """파일 포맷 한 줄 직렬화"""
        return self.model_dump_json(by_alias=True, exclude_none=True)


# ---------------------------------------------------------------------------
# 피처 스펙 문서
# ---------------------------------------------------------------------------

class ColumnDocument(BaseModel):
    """한 컬럼의 어휘 (token, id) 목록과 임베딩 차원"""

    name: str = Field(..., description="컬럼 이름")
    kind: str = Field(..., description="sequence | other | cross")
    dim: int = Field(..., ge=1, description="임베딩 차원")
    entries: List[Tuple[str, int]] = Field(..., description="(token, id) 쌍, 예약 id 제외")
    vocab_size: int = Field(..., ge=2, description="예약 id 포함 어휘 크기")
    cross_of: Optional[Tuple[str, str]] = Field(None, description="교차 피처 구성 컬럼")


class FeatureSpecDocument(BaseModel):
    """버전이 붙은 피처 스펙 파일 포맷"""

    format_version: int = Field(..., description="파일 포맷 버전")
    bucket_edges: List[int] = Field(..., description="위치 버킷 경계 (초, 유한값만)")
    columns: List[ColumnDocument] = Field(..., description="컬럼 목록")


# ---------------------------------------------------------------------------
# 체크포인트 매니페스트
# ---------------------------------------------------------------------------

class TensorEntry(BaseModel):
    """blob 안 텐서 하나의 위치"""

    model_config = ConfigDict(extra="forbid")

    name: str
    shape: List[int]
    offset: int = Field(..., ge=0)
    nbytes: int = Field(..., ge=0)


class ManifestHeader(BaseModel):
    """버전 확인용 최소 필드 (나머지 항목 무시)"""

    format_version: int


class CheckpointManifest(BaseModel):
    """체크포인트 디렉터리의 manifest.json"""

    model_config = ConfigDict(extra="forbid")

    format_version: int
    model: ModelKind = Field(..., description="모델 종류")
    step: int = Field(..., ge=0, description="완료된 옵티마이저 스텝 수")
    config: Dict[str, Any] = Field(default_factory=dict, description="실행 설정 echo")
    vocab_sizes: Dict[str, int] = Field(default_factory=dict, description="컬럼별 어휘 크기")
    dtype: str = Field("float32-le", description="blob 원소 형식")
    blob: str = Field(..., description="blob 파일 이름")
    blob_bytes: int = Field(..., ge=0)
    blob_sha256: str = Field(..., min_length=64, max_length=64)
    tensors: List[TensorEntry]


# ---------------------------------------------------------------------------
# 평가 지표
# ---------------------------------------------------------------------------

class LatencyStats(BaseModel):
    """예제 단위 forward 지연 시간 (밀리초)"""

    batch1_mean_ms: float = Field(..., ge=0.0, description="배치 1 평균")
    batch1_p50_ms: float = Field(..., ge=0.0, description="배치 1 중앙값")
    batch1_p99_ms: float = Field(..., ge=0.0, description="배치 1 99% 분위")
    batch256_mean_ms: float = Field(..., ge=0.0, description="배치 256 의 예제당 평균")
    timed_samples: int = Field(..., ge=1, description="측정 횟수 (웜업 제외)")


class Metrics(BaseModel):
    """모델 하나의 오프라인 평가 결과"""

    model: str = Field(..., description="모델 태그 (예: BST(b=1))")
    kind: ModelKind = Field(..., description="모델 종류")
    auc: float = Field(..., ge=0.0, le=1.0, description="AUC")
    logloss: float = Field(..., ge=0.0, description="평균 로그 손실")
    n_pos: int = Field(..., ge=0, description="양성 예제 수")
    n_neg: int = Field(..., ge=0, description="음성 예제 수")
    latency: Optional[LatencyStats] = Field(None, description="지연 시간 통계")
    seed: Optional[int] = Field(None, description="실행 시드")
    config: Dict[str, Any] = Field(default_factory=dict, description="실행 설정 echo")

    @property
    def evaluated(self) -> int:
        return self.n_pos + self.n_neg


class DatasetMeta(BaseModel):
    """gen-data 산출물 메타데이터"""

    train_count: int = Field(..., ge=0)
    test_count: int = Field(..., ge=0)
    train_base_rate: float = Field(..., ge=0.0, le=1.0)
    test_base_rate: float = Field(..., ge=0.0, le=1.0)
    days: int = Field(..., ge=1)
    split_day: int = Field(..., ge=1)
    train_days: int = Field(..., ge=0)
    test_days: int = Field(..., ge=0)
    boundary_time: int = Field(..., ge=0)
    seed: int
    config: Dict[str, Any] = Field(default_factory=dict)
