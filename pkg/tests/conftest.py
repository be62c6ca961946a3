"""
tests/conftest.py
pytest 설정 및 공통 픽스처
"""

import os
from pathlib import Path
from typing import Generator

import numpy as np
import pytest

from app.core.config import (
    BstConfig,
    EvalConfig,
    FeatureConfig,
    RunConfig,
    SynthParams,
    TrainConfig,
)
from app.core.tensor import precision
from app.services.features import build_feature_spec, encode_examples
from app.services.synth import SyntheticWorld
from tests import create_random_examples

# 테스트 환경 설정
os.environ["BST_LOGGING__LEVEL"] = "WARNING"  # 테스트 중 로그 출력 최소화


def pytest_collection_modifyitems(config, items):
    """테스트 수집 시 자동 마커 적용"""
    for item in items:
        if "slow" in item.keywords or "integration" in item.keywords:
            continue
        item.add_marker(pytest.mark.unit)


# 설정 픽스처
@pytest.fixture(scope="session")
def tiny_model_config() -> BstConfig:
    """d_V=8, h=2, L=5 소형 BST 구성"""
    return BstConfig(
        sequence_length=5,
        num_heads=2,
        item_dim=4,
        category_dim=2,
        position_dim=2,
        other_dim=2,
        mlp_widths=[16, 8],
    )


@pytest.fixture(scope="session")
def feature_config() -> FeatureConfig:
    return FeatureConfig()


@pytest.fixture(scope="session")
def small_synth_params() -> SynthParams:
    return SynthParams(
        n_items=40,
        n_categories=8,
        n_examples=400,
        days=4,
        split_day=4,
        max_history=8,
        pilot_size=200,
    )


@pytest.fixture
def fast_train_config() -> TrainConfig:
    return TrainConfig(batch_size=32, learning_rate=0.05, log_every=1000)


@pytest.fixture
def tiny_run_config(tmp_path, tiny_model_config, small_synth_params) -> RunConfig:
    """tmp_path 를 실행 디렉터리로 쓰는 소형 전체 설정"""
    return RunConfig(
        seed=7,
        model=tiny_model_config,
        train=TrainConfig(batch_size=64, learning_rate=0.05),
        synth=small_synth_params,
        eval=EvalConfig(warmup=2, latency_samples=5, latency_batch=16),
        paths={"run_dir": tmp_path / "run"},
    )


# 데이터 픽스처
@pytest.fixture(scope="session")
def small_world(small_synth_params) -> SyntheticWorld:
    return SyntheticWorld(small_synth_params, seed=3)


@pytest.fixture(scope="session")
def small_examples(small_world):
    return small_world.generate()


@pytest.fixture(scope="session")
def random_examples():
    """수작업 토큰을 쓰는 무작위 예제 48개"""
    return create_random_examples(48, seed=11)


@pytest.fixture(scope="session")
def small_spec(random_examples, feature_config, tiny_model_config):
    return build_feature_spec(random_examples, feature_config, tiny_model_config)


@pytest.fixture(scope="session")
def small_batch(random_examples, small_spec, tiny_model_config):
    return encode_examples(random_examples, small_spec, tiny_model_config.sequence_length)


# 정밀도 픽스처
@pytest.fixture
def float64_mode() -> Generator[None, None, None]:
    """그래디언트 체크용 64비트 모드"""
    with precision(np.float64):
        yield


@pytest.fixture
def run_dir(tmp_path) -> Path:
    path = tmp_path / "run"
    path.mkdir()
    return path
