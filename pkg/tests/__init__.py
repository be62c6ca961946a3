"""
tests/__init__.py
테스트 패키지 초기화 파일
"""

import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

# 프로젝트 루트를 Python 경로에 추가
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

# 공통 테스트 헬퍼 함수들

BASE_TIME = 1_700_000_000


def create_test_example(
    history: Sequence[Tuple[str, str, int]] = (),
    target: Tuple[str, str] = ("i1", "c1"),
    recommend_time: int = BASE_TIME,
    features: Optional[Dict[str, str]] = None,
    label: Optional[int] = 1,
):
    """테스트용 Example 생성. history 는 (item, category, 추천 시각 기준 몇 초 전) 목록"""
    from app.models.schemas import Example, InteractionEvent, TargetItem

    events = [
        InteractionEvent(item_id=item, category_id=cat, timestamp=recommend_time - seconds_before)
        for item, cat, seconds_before in history
    ]
    return Example(
        sequence=events,
        target=TargetItem(item_id=target[0], category_id=target[1]),
        recommend_time=recommend_time,
        other_features={"gender": "f", "os": "ios"} if features is None else features,
        label=label,
    )


def create_random_examples(count: int, seed: int = 0, max_history: int = 6, n_items: int = 12) -> List:
    """무작위 이력/라벨 예제 목록 (이력 시각은 오름차순)"""
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(count):
        length = int(rng.integers(0, max_history + 1))
        gaps = sorted(rng.integers(1, 100_000, size=length).tolist(), reverse=True)
        history = []
        for gap in gaps:
            item = int(rng.integers(n_items))
            history.append((f"i{item}", f"c{item % 4}", gap))
        target = int(rng.integers(n_items))
        examples.append(
            create_test_example(
                history=history,
                target=(f"i{target}", f"c{target % 4}"),
                features={"gender": "fm"[int(rng.integers(2))], "os": ("android", "ios")[int(rng.integers(2))]},
                label=int(rng.integers(2)),
            )
        )
    return examples


def pairwise_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """O(n²) 쌍 비교 AUC (동점 0.5), 정수 분자로 정확히 계산"""
    scores = list(scores)
    labels = list(labels)
    positives = [s for s, y in zip(scores, labels) if y == 1]
    negatives = [s for s, y in zip(scores, labels) if y == 0]
    twice_wins = 0
    for p in positives:
        for n in negatives:
            if p > n:
                twice_wins += 2
            elif p == n:
                twice_wins += 1
    return twice_wins / (2 * len(positives) * len(negatives))


TINY_CONFIG_TOML = """\
seed = {seed}

[model]
sequence_length = 5
num_heads = 2
item_dim = 4
category_dim = 2
position_dim = 2
other_dim = 2
mlp_widths = [16, 8]

[train]
batch_size = 64
learning_rate = 0.05

[synth]
n_items = 40
n_categories = 8
n_examples = 400
days = 4
split_day = 4
max_history = 8
pilot_size = 200

[eval]
warmup = 2
latency_samples = 5
latency_batch = 16

[logging]
level = "WARNING"
"""


def write_tiny_config(directory: Path, seed: int = 7) -> Path:
    """CLI 테스트용 소형 TOML 설정 파일"""
    path = Path(directory) / "tiny.toml"
    path.write_text(TINY_CONFIG_TOML.format(seed=seed), encoding="utf-8")
    return path
