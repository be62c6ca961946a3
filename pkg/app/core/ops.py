"""
app/core/ops.py
BST 가 사용하는 미분 가능한 primitive 연산 모음

브로드캐스팅은 마지막 축 bias 덧셈만 허용하고 나머지 shape 불일치는 모두 오류로 처리한다.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from app.core.exceptions import ConfigError, EmbeddingLookupError, MaskError, ShapeError
from app.core.tensor import Tensor, emit

LAYER_NORM_EPS = 1e-6
SIGMOID_FLOOR = 1e-7
SIGMOID_CEIL = 1.0 - 1e-7
DEFAULT_LEAKY_SLOPE = 0.01

Operand = Union[Tensor, np.ndarray]


def _as_array(value: Operand) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


# ---------------------------------------------------------------------------
# 선형 연산
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """행렬곱. b 는 공유 가중치(2차원)이거나 a 와 같은 배치 차원을 가져야 한다"""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul 은 2차원 이상 텐서가 필요합니다: {a.shape} · {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul 내부 차원 불일치: {a.shape} · {b.shape} ({a.shape[-1]} != {b.shape[-2]})"
        )
    shared_weight = b.ndim == 2
    if not shared_weight and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul 배치 차원 불일치: {a.shape} · {b.shape}")

    a_data, b_data = a.data, b.data
    out = np.matmul(a_data, b_data)

    def backward(grad: np.ndarray):
        grad_a = np.matmul(grad, np.swapaxes(b_data, -1, -2)) if a.requires_grad else None
        grad_b = None
        if b.requires_grad:
            if shared_weight and a.ndim > 2:
                grad_b = a_data.reshape(-1, a_data.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
            else:
                grad_b = np.matmul(np.swapaxes(a_data, -1, -2), grad)
        return grad_a, grad_b

    return emit("matmul", out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """같은 shape 덧셈 또는 마지막 축 bias 덧셈"""
    bias_add = b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1] and a.shape != b.shape
    if a.shape != b.shape and not bias_add:
        raise ShapeError(f"add shape 불일치: {a.shape} + {b.shape}")

    out = a.data + b.data

    def backward(grad: np.ndarray):
        grad_b = grad.reshape(-1, grad.shape[-1]).sum(axis=0) if bias_add else grad
        return grad, grad_b

    return emit("add", out, (a, b), backward)


def mul(a: Tensor, b: Operand) -> Tensor:
    """같은 shape 원소곱. b 는 텐서 또는 상수 배열"""
    b_data = _as_array(b).astype(a.dtype, copy=False)
    if a.shape != b_data.shape:
        raise ShapeError(f"mul shape 불일치: {a.shape} * {b_data.shape}")
    a_data = a.data
    out = a_data * b_data

    if isinstance(b, Tensor):
        def backward(grad: np.ndarray):
            return grad * b_data, grad * a_data
        return emit("mul", out, (a, b), backward)

    return emit("mul", out, (a,), lambda grad: (grad * b_data,))


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * factor
    return emit("scale", out, (x,), lambda grad: (grad * factor,))


# ---------------------------------------------------------------------------
# shape 연산
# ---------------------------------------------------------------------------

def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose 축 지정 오류: {axes} (ndim={x.ndim})")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return emit("transpose", out, (x,), lambda grad: (np.transpose(grad, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape 원소 수 불일치: {x.shape} -> {shape}")
    original = x.shape
    out = x.data.reshape(shape)
    return emit("reshape", out, (x,), lambda grad: (grad.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """지정 축 이어붙이기 (Concat(head_1, ..., head_h), 임베딩 결합)"""
    if not tensors:
        raise ShapeError("concat 할 텐서가 없습니다")
    ndim = tensors[0].ndim
    axis = axis % ndim
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != reference[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(f"concat shape 불일치: {reference} vs {t.shape} (axis={axis})")

    sizes = [t.shape[axis] for t in tensors]
    split_points = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(grad: np.ndarray):
        return tuple(np.split(grad, split_points, axis=axis))

    return emit("concat", out, tuple(tensors), backward)


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """한 축의 단일 위치 선택 (해당 축은 제거됨)"""
    axis = axis % x.ndim
    if not -x.shape[axis] <= index < x.shape[axis]:
        raise ShapeError(f"select 인덱스 {index} 가 축 {axis} 크기 {x.shape[axis]} 를 벗어났습니다")
    out = np.take(x.data, index, axis=axis)
    original = x.shape

    def backward(grad: np.ndarray):
        full = np.zeros(original, dtype=grad.dtype)
        slicer = [slice(None)] * len(original)
        slicer[axis] = index
        full[tuple(slicer)] = grad
        return (full,)

    return emit("select", out, (x,), backward)


def gather_rows(table: Tensor, ids: np.ndarray, column: str = "embedding") -> Tensor:
    """임베딩 조회. 역전파는 테이블로 scatter-add"""
    if table.ndim != 2:
        raise ShapeError(f"'{column}' 임베딩 테이블은 2차원이어야 합니다: {table.shape}")
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"'{column}' 조회 id 는 정수여야 합니다: dtype={ids.dtype}")
    vocab_size = table.shape[0]
    if ids.size:
        low, high = int(ids.min()), int(ids.max())
        if low < 0 or high >= vocab_size:
            raise EmbeddingLookupError(column, low if low < 0 else high, vocab_size)

    out = table.data[ids]

    def backward(grad: np.ndarray):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), grad.reshape(-1, table.shape[1]))
        return (full,)

    return emit("gather_rows", out, (table,), backward)


# ---------------------------------------------------------------------------
# 비선형 / 정규화
# ---------------------------------------------------------------------------

def masked_softmax(x: Tensor, mask: Operand) -> Tensor:
    """마지막 축 softmax. 마스킹 위치는 정확히 0"""
    mask = _as_array(mask).astype(bool, copy=False)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_softmax 마스크 shape 불일치: {mask.shape} vs {x.shape}")
    if not mask.any(axis=-1).all():
        raise MaskError("모든 위치가 마스킹된 행이 있습니다 (길이 0 시퀀스가 어텐션에 도달)")

    shifted = np.where(mask, x.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=-1, keepdims=True)

    def backward(grad: np.ndarray):
        inner = (grad * out).sum(axis=-1, keepdims=True)
        return (out * (grad - inner),)

    return emit("masked_softmax", out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """마지막 축 정규화 후 affine 변환"""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm 파라미터 shape 불일치: x={x.shape}, gain={gain.shape}, bias={bias.shape}"
        )

    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(variance + eps)
    normalized = centered * inv_std
    out = normalized * gain.data + bias.data

    def backward(grad: np.ndarray):
        flat_grad = grad.reshape(-1, width)
        grad_gain = (flat_grad * normalized.reshape(-1, width)).sum(axis=0)
        grad_bias = flat_grad.sum(axis=0)
        d_norm = grad * gain.data
        grad_x = inv_std * (
            d_norm
            - d_norm.mean(axis=-1, keepdims=True)
            - normalized * (d_norm * normalized).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gain, grad_bias

    return emit("layer_norm", out, (x, gain, bias), backward)


def leaky_relu(x: Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"LeakyReLU slope 는 (0, 1) 범위여야 합니다: {slope}")
    positive = x.data >= 0
    out = np.where(positive, x.data, x.data * slope)
    local = np.where(positive, 1.0, slope).astype(x.dtype)
    return emit("leaky_relu", out, (x,), lambda grad: (grad * local,))


def dropout(
    x: Tensor,
    rate: float,
    training: bool,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """inverted dropout. eval 모드와 rate 0 은 입력을 그대로 반환"""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate 는 [0, 1) 범위여야 합니다: {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("학습 모드 dropout 에는 시드가 지정된 난수 생성기가 필요합니다")

    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * (1.0 / (1.0 - rate))
    out = x.data * keep
    return emit("dropout", out, (x,), lambda grad: (grad * keep,))


def sigmoid(x: Tensor) -> Tensor:
    """1/(1+e^-x), log 안전을 위해 [1e-7, 1-1e-7] 로 clamp"""
    exp_neg = np.exp(-np.abs(x.data))
    raw = np.where(x.data >= 0, 1.0 / (1.0 + exp_neg), exp_neg / (1.0 + exp_neg))
    out = np.clip(raw, SIGMOID_FLOOR, SIGMOID_CEIL).astype(x.dtype)
    local = out * (1.0 - out)
    return emit("sigmoid", out, (x,), lambda grad: (grad * local,))


# ---------------------------------------------------------------------------
# 축소 연산
# ---------------------------------------------------------------------------

def reduce_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    shape = x.shape
    return emit("reduce_sum", out, (x,), lambda grad: (np.full(shape, grad, dtype=grad.dtype),))


def reduce_mean(x: Tensor) -> Tensor:
    count = max(x.size, 1)
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    shape = x.shape
    return emit(
        "reduce_mean", out, (x,), lambda grad: (np.full(shape, grad / count, dtype=grad.dtype),)
    )


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """[B, L, d] 의 마스크 가중 평균 → [B, d]. 유효 위치가 없으면 0 벡터"""
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise ShapeError(f"masked_mean shape 불일치: x={x.shape}, mask={mask.shape}")
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1)
    weights = (mask / counts).astype(x.dtype)[..., None]
    out = (x.data * weights).sum(axis=1)
    return emit("masked_mean", out, (x,), lambda grad: (grad[:, None, :] * weights,))


def binary_cross_entropy(p: Tensor, labels: np.ndarray) -> Tensor:
    """배치 평균 음의 로그우도 -(1/N)Σ[y log p + (1-y) log(1-p)]"""
    labels = np.asarray(labels, dtype=p.dtype)
    if p.ndim != 1 or labels.shape != p.shape:
        raise ShapeError(f"cross entropy 길이 불일치: p={p.shape}, y={labels.shape}")
    count = max(p.shape[0], 1)
    probs = p.data
    per_example = labels * np.log(probs) + (1.0 - labels) * np.log1p(-probs)
    out = np.asarray(-per_example.mean(), dtype=p.dtype)

    def backward(grad: np.ndarray):
        return (grad * (probs - labels) / (probs * (1.0 - probs) * count),)

    return emit("binary_cross_entropy", out, (p,), backward)


__all__: Tuple[str, ...] = (
    "matmul", "add", "mul", "scale", "transpose", "reshape", "concat", "select",
    "gather_rows", "masked_softmax", "layer_norm", "leaky_relu", "dropout", "sigmoid",
    "reduce_sum", "reduce_mean", "masked_mean", "binary_cross_entropy",
)
