"""
app/core/gradcheck.py
중앙 유한차분 기반 그래디언트 검증
"""

from __future__ import annotations

from typing import Callable, Dict, Mapping, Optional

import numpy as np

from app.core.exceptions import ConfigError
from app.core.tensor import Tape, Tensor

DEFAULT_STEP = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """블록 단위 상대 오차 ||a - n|| / max(||a||, ||n||)"""
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric)) / scale


def gradient_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = DEFAULT_STEP,
    samples: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, float]:
    """테이프 그래디언트와 중앙 유한차분을 비교해 파라미터 블록별 상대 오차 반환

    fn 은 인자 없이 스칼라 loss 를 돌려주는 결정적 함수여야 한다 (dropout 비활성).
    samples 가 주어지면 블록마다 해당 개수의 좌표만 무작위로 검사한다.
    """
    for name, tensor in params.items():
        if tensor.dtype != np.float64:
            raise ConfigError(f"그래디언트 체크는 64비트 파라미터가 필요합니다: {name} ({tensor.dtype})")

    with Tape() as tape:
        loss = fn()
    analytic = tape.backward(loss, params)

    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    for name, tensor in params.items():
        # reshape 가 view 여야 좌표 교란이 원본에 반영됨
        tensor.data = np.ascontiguousarray(tensor.data)
        flat = tensor.data.reshape(-1)
        if samples is None or samples >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=samples, replace=False))

        numeric = np.empty(coords.size, dtype=np.float64)
        for j, index in enumerate(coords):
            original = flat[index]
            flat[index] = original + h
            plus = float(fn().data)
            flat[index] = original - h
            minus = float(fn().data)
            flat[index] = original
            numeric[j] = (plus - minus) / (2.0 * h)

        errors[name] = relative_error(analytic[name].reshape(-1)[coords], numeric)
    return errors
