"""
app/services/synth.py
순서 의존 클릭 신호를 심은 합성 행동 시퀀스 생성기

생성 모델
  - 아이템 i 의 카테고리는 i % C, 카테고리 후속 관계는 하나의 순환 순열
  - 탐색: 확률 chain_follow_prob 로 직전 카테고리의 후속, 아니면 균등
  - 타겟: 확률 target_successor_prob 로 마지막 이벤트 카테고리의 후속 카테고리 아이템, 아니면 균등
  - logit = alpha * Σ_k w_k * compat(e_k, t)
            + interest_strength * Σ_k w_k * interest(cat(e_k)) / Σ_k w_k
            + gender_affinity * aff(gender, cat_t) + item_bias(t) - beta
    (w_k = decay^(k-1), e_1 이 가장 최근 이벤트, interest ∈ {-1, 0, 1})
  - compat 항은 이력과 타겟의 상호작용, interest 항은 이력만의 가산 신호라서
    평균 풀링도 일부(순서 무시 부분)를 학습할 수 있음
  - beta 는 파일럿 표본에서 평균 클릭 확률이 click_prior 가 되도록 이분법으로 보정
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.core.config import DAY_SECONDS, SynthParams
from app.core.exceptions import ConfigError
from app.core.logging import get_logger
from app.core.seeding import bernoulli_from_uint32, derive_rng
from app.models.schemas import Example, InteractionEvent, TargetItem

logger = get_logger(__name__)

GENDERS = ("f", "m")
AGE_BUCKETS = ("18-24", "25-34", "35-44", "45-54", "55+")
OPERATING_SYSTEMS = ("android", "ios")
GAP_SCALES = (60, 600, 3600, 21600, 86400)
ORACLE_PERMUTATIONS = 32
_BISECTION_STEPS = 60


def item_token(index: int) -> str:
    return f"i{index}"


def category_token(index: int) -> str:
    return f"c{index}"


def _token_index(token: str, prefix: str) -> int:
    if not token.startswith(prefix) or not token[len(prefix):].isdigit():
        raise ConfigError(f"합성 데이터 토큰이 아닙니다: {token}")
    return int(token[len(prefix):])


@dataclass
class _Draw:
    """생성 중간 결과 (정수 인덱스)"""
    history_items: List[int]
    target_item: int
    gender: int
    age: int
    os: int
    recommend_time: int
    timestamps: List[int]


class SyntheticWorld:
    """생성기의 잠재 구조와 오라클 스코어러"""

    def __init__(self, params: SynthParams, seed: int):
        self.params = params
        self.seed = seed
        rng = derive_rng(seed, "world")

        n_cat = params.n_categories
        order = rng.permutation(n_cat)
        self.successor = np.empty(n_cat, dtype=np.int64)
        self.successor[order] = np.roll(order, -1)

        self.item_category = np.arange(params.n_items, dtype=np.int64) % n_cat
        self.items_by_category = [np.flatnonzero(self.item_category == c) for c in range(n_cat)]
        self.item_bias = rng.integers(-5, 6, size=params.n_items).astype(np.float64) * params.item_bias_scale
        self.affinity = rng.integers(-1, 2, size=(len(GENDERS), n_cat)).astype(np.float64)
        self.interest = rng.integers(-1, 2, size=n_cat).astype(np.float64)

        self.recency_weights = params.decay ** np.arange(max(params.max_history, 1), dtype=np.float64)
        self.intercept = 0.0
        self.intercept = self._calibrate_intercept()

    # ------------------------------------------------------------------
    # 샘플링
    # ------------------------------------------------------------------

    def _draw(self, rng: np.random.Generator) -> _Draw:
        p = self.params
        n_cat = p.n_categories

        length = int(rng.integers(0, p.max_history + 1))
        history: List[int] = []
        category = int(rng.integers(n_cat))
        for position in range(length):
            if position > 0:
                if bernoulli_from_uint32(rng, p.chain_follow_prob):
                    category = int(self.successor[category])
                else:
                    category = int(rng.integers(n_cat))
            members = self.items_by_category[category]
            history.append(int(members[rng.integers(len(members))]))

        if history and bernoulli_from_uint32(rng, p.target_successor_prob):
            target_category = int(self.successor[self.item_category[history[-1]]])
            members = self.items_by_category[target_category]
            target = int(members[rng.integers(len(members))])
        else:
            target = int(rng.integers(p.n_items))

        day = int(rng.integers(p.days))
        recommend_time = p.base_time + day * DAY_SECONDS + int(rng.integers(DAY_SECONDS))
        timestamps: List[int] = []
        current = recommend_time
        for _ in range(length):
            scale = GAP_SCALES[int(rng.integers(len(GAP_SCALES)))]
            current -= int(rng.integers(1, scale + 1))
            timestamps.append(current)
        timestamps.reverse()

        return _Draw(
            history_items=history,
            target_item=target,
            gender=int(rng.integers(len(GENDERS))),
            age=int(rng.integers(len(AGE_BUCKETS))),
            os=int(rng.integers(len(OPERATING_SYSTEMS))),
            recommend_time=recommend_time,
            timestamps=timestamps,
        )

    def _logit(self, history_items: Sequence[int], target_item: int, gender: int) -> float:
        p = self.params
        target_category = self.item_category[target_item]
        score = 0.0
        if len(history_items):
            recent_first = np.asarray(history_items[::-1], dtype=np.int64)
            categories = self.item_category[recent_first]
            weights = self.recency_weights[: len(recent_first)]
            compat = self.successor[categories] == target_category
            score += p.alpha * float(np.dot(weights, compat))
            score += p.interest_strength * float(np.dot(weights, self.interest[categories])) / float(weights.sum())
        score += p.gender_affinity * self.affinity[gender, target_category]
        score += self.item_bias[target_item]
        return score - self.intercept

    @staticmethod
    def _sigmoid(z):
        return 1.0 / (1.0 + np.exp(-z))

    def _calibrate_intercept(self) -> float:
        rng = derive_rng(self.seed, "pilot")
        draws = [self._draw(rng) for _ in range(self.params.pilot_size)]
        raw = np.array([self._logit(d.history_items, d.target_item, d.gender) for d in draws])

        low, high = -30.0, 30.0
        for _ in range(_BISECTION_STEPS):
            mid = 0.5 * (low + high)
            if self._sigmoid(raw - mid).mean() > self.params.click_prior:
                low = mid
            else:
                high = mid
        beta = 0.5 * (low + high)
        logger.debug(f"합성 데이터 절편 보정 완료 - beta={beta:.4f}")
        return beta

    def _to_example(self, draw: _Draw, label: int) -> Example:
        events = [
            InteractionEvent(
                item_id=item_token(item),
                category_id=category_token(int(self.item_category[item])),
                timestamp=ts,
            )
            for item, ts in zip(draw.history_items, draw.timestamps)
        ]
        return Example(
            sequence=events,
            target=TargetItem(
                item_id=item_token(draw.target_item),
                category_id=category_token(int(self.item_category[draw.target_item])),
            ),
            recommend_time=draw.recommend_time,
            other_features={
                "gender": GENDERS[draw.gender],
                "age": AGE_BUCKETS[draw.age],
                "os": OPERATING_SYSTEMS[draw.os],
            },
            label=label,
        )

    def generate(self, n_examples: Optional[int] = None, stream: str = "data") -> List[Example]:
        """예제 생성 후 추천 시각 순 정렬"""
        count = self.params.n_examples if n_examples is None else n_examples
        rng = derive_rng(self.seed, stream)
        examples = []
        for _ in range(count):
            draw = self._draw(rng)
            probability = float(self._sigmoid(self._logit(draw.history_items, draw.target_item, draw.gender)))
            examples.append(self._to_example(draw, bernoulli_from_uint32(rng, probability)))
        examples.sort(key=lambda e: e.recommend_time)
        return examples

    # ------------------------------------------------------------------
    # 오라클
    # ------------------------------------------------------------------

    def _decode(self, example: Example):
        history = [_token_index(e.item_id, "i") for e in example.sequence]
        target = _token_index(example.target.item_id, "i")
        gender = GENDERS.index(example.other_features.get("gender", GENDERS[0]))
        return history, target, gender

    def bayes_probability(self, example: Example) -> float:
        """생성기를 아는 최적 스코어러의 실제 클릭 확률"""
        history, target, gender = self._decode(example)
        return float(self._sigmoid(self._logit(history, target, gender)))

    def order_blind_probability(self, example: Example, permutations: int = ORACLE_PERMUTATIONS) -> float:
        """이력 순서와 시각을 모르는 최적 스코어러 근사 (무작위 재배열 평균)"""
        history, target, gender = self._decode(example)
        if len(history) < 2:
            return float(self._sigmoid(self._logit(history, target, gender)))
        rng = derive_rng(self.seed, "oracle", len(history))
        items = np.sort(np.asarray(history, dtype=np.int64))  # 입력 순서와 무관한 기준 배열
        total = 0.0
        for _ in range(permutations):
            total += float(self._sigmoid(self._logit(list(rng.permutation(items)), target, gender)))
        return total / permutations

    def describe(self) -> Dict[str, float]:
        return {
            "intercept": round(self.intercept, 6),
            "n_items": self.params.n_items,
            "n_categories": self.params.n_categories,
        }


def synth_generate(params: SynthParams, seed: int) -> List[Example]:
    """시드가 같으면 동일한 예제 목록 (추천 시각 순)"""
    world = SyntheticWorld(params, seed)
    examples = world.generate()
    logger.info(f"합성 데이터 생성 완료 - {len(examples)}개, 절편 {world.intercept:.4f}")
    return examples
