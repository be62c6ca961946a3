"""
app/core/tensor.py
최소 dense 텐서와 역전파 테이프
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import ConfigError, NonFiniteError, TapeError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# 스레드/컨텍스트별 상태
_dtype_var: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "bst_default_dtype", default=np.dtype(np.float32)
)
_validate_var: contextvars.ContextVar[bool] = contextvars.ContextVar("bst_validate", default=False)
_tape_var: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("bst_tape", default=None)


def default_dtype() -> np.dtype:
    """현재 컨텍스트의 기본 부동소수 타입"""
    return _dtype_var.get()


@contextmanager
def precision(dtype) -> Iterator[np.dtype]:
    """새로 생성되는 텐서의 정밀도 지정 (float32 학습, float64 그래디언트 체크)"""
    resolved = np.dtype(dtype)
    if resolved not in _SUPPORTED_DTYPES:
        raise ConfigError(f"지원하지 않는 정밀도입니다: {resolved}")
    token = _dtype_var.set(resolved)
    try:
        yield resolved
    finally:
        _dtype_var.reset(token)


@contextmanager
def validation(enabled: bool = True) -> Iterator[None]:
    """생성되는 모든 텐서의 유한성 검사 활성화"""
    token = _validate_var.set(enabled)
    try:
        yield
    finally:
        _validate_var.reset(token)


def validation_enabled() -> bool:
    return _validate_var.get()


def active_tape() -> Optional["Tape"]:
    return _tape_var.get()


class Tensor:
    """row-major dense 텐서"""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _SUPPORTED_DTYPES:
                dtype = data.dtype
            else:
                dtype = default_dtype()
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.name = name

        if _validate_var.get() and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(name or "tensor")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


@dataclass(frozen=True)
class TapeEntry:
    """테이프에 기록된 primitive 연산 하나"""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """실행된 연산을 순서대로 기록하고 역방향으로 한 번 재생하는 테이프

    with Tape() as tape:
        loss = ...
    grads = tape.backward(loss, params)
    """

    def __init__(self):
        self._entries: list[TapeEntry] = []
        self._outputs: set[int] = set()
        self._replayed = False
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        if self._replayed:
            raise TapeError("역전파가 끝난 테이프는 다시 사용할 수 없습니다")
        self._token = _tape_var.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if self._token is not None:
            _tape_var.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> Tuple[TapeEntry, ...]:
        return tuple(self._entries)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> None:
        if self._replayed:
            raise TapeError("역전파가 끝난 테이프에는 연산을 기록할 수 없습니다")
        self._entries.append(TapeEntry(op=op, inputs=inputs, output=output, backward=backward))
        self._outputs.add(id(output))

    def backward(self, loss: Tensor, params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
        """loss 에서 역방향 누적, 파라미터 이름 → 그래디언트 맵 반환"""
        if self._replayed:
            raise TapeError("이 테이프는 이미 역전파되었습니다. 다시 기록한 뒤 호출하세요")
        if loss.ndim != 0:
            raise TapeError(f"backward 는 스칼라 loss 에만 호출할 수 있습니다: shape={loss.shape}")
        if id(loss) not in self._outputs:
            raise TapeError("loss 가 현재 테이프에서 생성되지 않았습니다")
        self._replayed = True

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self._entries):
            upstream = grads.pop(id(entry.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(entry.inputs, entry.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.shape:
                    raise TapeError(
                        f"{entry.op} 역전파 shape 오류: {grad.shape} != {tensor.shape}"
                    )
                key = id(tensor)
                grads[key] = grads[key] + grad if key in grads else grad

        return {
            name: grads.get(id(tensor), np.zeros_like(tensor.data))
            for name, tensor in params.items()
        }


def emit(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    """연산 결과 텐서 생성, 활성 테이프가 있고 입력이 그래디언트를 요구하면 기록"""
    out = Tensor(data)
    tape = _tape_var.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out
