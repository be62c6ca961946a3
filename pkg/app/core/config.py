"""
app/core/config.py
실행 설정 관리 모듈

우선순위: 기본값 < 환경변수(BST_ 접두사) < 설정 파일(TOML) < 커맨드라인 플래그
"""

from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict, TomlConfigSettingsSource

from app.core.exceptions import ConfigError
from app.models.schemas import ModelKind, ReadoutMode

DEFAULT_BUCKET_EDGES: List[int] = [60, 600, 3600, 21600, 86400, 259200, 604800, 2592000]
DEFAULT_LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DAY_SECONDS = 86400


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class BstConfig(_Section):
    """모델 구성"""

    sequence_length: int = Field(20, ge=2, description="타겟 포함 시퀀스 길이 L")
    num_heads: int = Field(8, ge=1, description="어텐션 헤드 수 h")
    num_blocks: int = Field(1, ge=1, description="트랜스포머 블록 수 b")
    dropout_rate: float = Field(0.2, ge=0.0, lt=1.0)
    item_dim: int = Field(16, ge=1)
    category_dim: int = Field(8, ge=1)
    position_dim: int = Field(8, ge=1)
    other_dim: int = Field(8, ge=1, description="기타 피처 컬럼별 임베딩 차원")
    ffn_multiplier: int = Field(4, ge=1, description="d_ff = multiplier * d_V")
    mlp_widths: List[int] = Field(default_factory=lambda: [1024, 512, 256])
    leaky_slope: float = Field(0.01, gt=0.0, lt=1.0)
    readout: ReadoutMode = ReadoutMode.FLATTEN_ALL

    @field_validator("mlp_widths")
    @classmethod
    def validate_mlp_widths(cls, v):
        if not v or any(width < 1 for width in v):
            raise ValueError(f"mlp_widths 는 양의 정수 목록이어야 합니다: {v}")
        return v

    @model_validator(mode="after")
    def validate_heads(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError(
                f"d_V({self.d_model}) 가 헤드 수({self.num_heads}) 로 나누어떨어지지 않습니다"
            )
        return self

    @property
    def d_model(self) -> int:
        return self.item_dim + self.category_dim + self.position_dim

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    @property
    def d_ff(self) -> int:
        return self.ffn_multiplier * self.d_model


class TrainConfig(_Section):
    """학습 설정"""

    model: ModelKind = ModelKind.BST
    learning_rate: float = Field(0.01, gt=0.0)
    batch_size: int = Field(256, ge=1)
    epochs: int = Field(1, ge=1)
    adagrad_initial_accumulator: float = Field(0.1, gt=0.0)
    adagrad_epsilon: float = Field(1e-7, gt=0.0)
    shuffle: bool = True
    clip_norm: Optional[float] = Field(None, gt=0.0, description="전역 그래디언트 norm 상한 (기본 비활성)")
    queue_capacity: int = Field(1024, ge=1, description="미리 준비하는 배치 큐 용량")
    log_every: int = Field(50, ge=1, description="손실 로그 출력 주기 (스텝)")
    debug_checks: bool = Field(False, description="매 스텝 파라미터 유한성 검사")


class FeatureConfig(_Section):
    """어휘/위치 버킷 설정"""

    min_count: int = Field(1, ge=1, description="어휘에 포함될 최소 등장 횟수")
    max_vocab: Optional[int] = Field(None, ge=1, description="컬럼별 최대 어휘 수 (예약 id 제외)")
    cross_features: List[str] = Field(default_factory=lambda: ["gender*category_id"])
    bucket_edges: List[int] = Field(default_factory=lambda: list(DEFAULT_BUCKET_EDGES))

    @field_validator("bucket_edges")
    @classmethod
    def validate_edges(cls, v):
        if not v or v[0] <= 0 or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError(f"bucket_edges 는 양의 정수 오름차순이어야 합니다: {v}")
        return v

    @field_validator("cross_features")
    @classmethod
    def validate_crosses(cls, v):
        for name in v:
            parts = name.split("*")
            if len(parts) != 2 or not all(parts) or parts[0] == parts[1]:
                raise ValueError(f"교차 피처는 'a*b' 형식이어야 합니다: {name}")
        return v


class SynthParams(_Section):
    """합성 데이터 생성 파라미터"""

    n_items: int = Field(1000, ge=2)
    n_categories: int = Field(20, ge=2)
    n_examples: int = Field(60000, ge=1)
    days: int = Field(8, ge=1)
    split_day: int = Field(8, ge=1, description="테스트 시작 일자 (1부터)")
    max_history: int = Field(30, ge=0)
    chain_follow_prob: float = Field(0.5, ge=0.0, le=1.0, description="탐색 시 후속 카테고리를 따를 확률")
    target_successor_prob: float = Field(0.5, ge=0.0, le=1.0)
    alpha: float = Field(3.0, ge=0.0, description="순서 신호 강도 (후속 카테고리 호환)")
    interest_strength: float = Field(
        3.0, ge=0.0, description="최근 탐색 카테고리 관심도 신호 강도 (최근성 가중 평균)"
    )
    decay: float = Field(0.5, gt=0.0, le=1.0, description="최근성 가중치 감쇠율")
    gender_affinity: float = Field(0.5, ge=0.0)
    item_bias_scale: float = Field(0.05, ge=0.0)
    click_prior: float = Field(0.3, gt=0.0, lt=1.0)
    pilot_size: int = Field(8000, ge=100, description="절편 보정용 파일럿 표본 크기")
    base_time: int = Field(1_700_000_000, ge=0)

    @model_validator(mode="after")
    def validate_layout(self):
        if self.n_items < self.n_categories:
            raise ValueError("n_items 는 n_categories 이상이어야 합니다")
        if self.split_day > self.days:
            raise ValueError(f"split_day({self.split_day}) 가 days({self.days}) 를 넘습니다")
        return self

    @property
    def boundary_time(self) -> int:
        return self.base_time + (self.split_day - 1) * DAY_SECONDS


class EvalConfig(_Section):
    """평가 설정"""

    batch_size: int = Field(1024, ge=1)
    workers: int = Field(1, ge=1, description="스코어링 스레드 수")
    warmup: int = Field(100, ge=0)
    latency_samples: int = Field(200, ge=1)
    latency_batch: int = Field(256, ge=1)


class ExperimentConfig(_Section):
    """비교 실험 설정"""

    ablate_blocks: bool = False
    seeds: int = Field(1, ge=1)
    bst_margin: float = 0.01
    seq_margin: float = 0.02
    required_pass_ratio: float = Field(0.8, gt=0.0, le=1.0)
    # 비교 학습 일정. [train] 기본값(1 epoch, 배치 256) 으로는 WDL 계열 임베딩이 초기 잡음 수준에 머묾
    epochs: int = Field(3, ge=1, description="비교 실험 학습 epoch 수")
    batch_size: int = Field(64, ge=1, description="비교 실험 배치 크기")
    learning_rate: float = Field(0.05, gt=0.0, description="비교 실험 Adagrad 학습률")

    def train_schedule(self, base: TrainConfig) -> TrainConfig:
        """[train] 설정에 비교 실험 일정을 덮어쓴 사본"""
        return base.model_copy(
            update={"epochs": self.epochs, "batch_size": self.batch_size, "learning_rate": self.learning_rate}
        )


class PathsConfig(_Section):
    """실행 디렉터리 내 산출물 경로"""

    run_dir: Optional[Path] = None
    train_file: str = "train.jsonl"
    test_file: str = "test.jsonl"
    meta_file: str = "dataset_meta.json"
    spec_file: str = "feature_spec.json"
    checkpoint_dir: str = "checkpoint"
    loss_log: str = "loss.tsv"
    metrics_file: str = "metrics.jsonl"
    report_file: str = "report.txt"
    config_echo: str = "config.json"


class LoggingConfig(_Section):
    level: str = "INFO"
    file: Optional[str] = None
    format: str = DEFAULT_LOG_FORMAT

    @field_validator("level")
    @classmethod
    def validate_level(cls, v):
        level = v.upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"알 수 없는 로그 레벨입니다: {v}")
        return level


class RunConfig(BaseSettings):
    """전체 실행 설정"""

    model_config = SettingsConfigDict(
        env_prefix="BST_", env_nested_delimiter="__", extra="forbid", validate_assignment=True
    )

    seed: int = Field(42, ge=0, description="모든 난수의 최상위 시드")
    model: BstConfig = Field(default_factory=BstConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    synth: SynthParams = Field(default_factory=SynthParams)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    def echo(self) -> Dict[str, Any]:
        """산출물에 기록하는 설정 사본 (실행 위치/로깅 제외)"""
        return self.model_dump(mode="json", exclude={"paths", "logging"})

    def with_overrides(self, **sections: Any) -> "RunConfig":
        """섹션 단위 덮어쓰기 사본. 예: cfg.with_overrides(model={"num_blocks": 2})"""
        merged = _deep_merge(self.model_dump(), _drop_none(sections))
        return RunConfig(**merged)


def _drop_none(values: Mapping[str, Any]) -> Dict[str, Any]:
    cleaned: Dict[str, Any] = {}
    for key, value in values.items():
        if isinstance(value, Mapping):
            nested = _drop_none(value)
            if nested:
                cleaned[key] = nested
        elif value is not None:
            cleaned[key] = value
    return cleaned


def _deep_merge(base: Dict[str, Any], updates: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in updates.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _deep_merge(dict(merged[key]), value)
        else:
            merged[key] = value
    return merged


def read_config_file(path: Path) -> Dict[str, Any]:
    """TOML 설정 파일을 섹션 dict 로 읽기"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"설정 파일이 존재하지 않습니다: {path}")
    return dict(TomlConfigSettingsSource(RunConfig, toml_file=path)())


def load_run_config(
    config_file: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """설정 파일과 플래그 덮어쓰기를 병합해 검증된 RunConfig 생성

    None 값 플래그는 무시된다. 환경변수는 BaseSettings 가 init 인자보다 낮은 우선순위로 적용한다.
    """
    values: Dict[str, Any] = read_config_file(config_file) if config_file else {}
    if overrides:
        values = _deep_merge(values, _drop_none(overrides))
    return RunConfig(**values)
