"""
app/services/trainer.py
교차 엔트로피 목적함수, Adagrad, 재개 가능한 학습 루프
"""

from __future__ import annotations

import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app.core import ops
from app.core.config import BstConfig, TrainConfig
from app.core.exceptions import DatasetEmptyError, NonFiniteError
from app.core.logging import TrainingLogger, get_logger
from app.core.seeding import derive_rng
from app.core.tensor import Tape
from app.models.schemas import Mode, ModelKind
from app.services.bst_model import ModelParams, forward, init_params, model_tag
from app.services.features import EncodedBatch, FeatureSpec

logger = get_logger(__name__)

cross_entropy_loss = ops.binary_cross_entropy


@dataclass
class AdagradState:
    """파라미터별 제곱 그래디언트 누적값"""

    accumulators: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def create(cls, params: ModelParams, initial_accumulator: float) -> "AdagradState":
        return cls(
            accumulators={
                name: np.full(t.shape, initial_accumulator, dtype=t.dtype) for name, t in params.items()
            }
        )

    def copy(self) -> "AdagradState":
        return AdagradState({n: a.copy() for n, a in self.accumulators.items()}, self.step)


def clip_by_global_norm(grads: Dict[str, np.ndarray], clip_norm: float) -> Dict[str, np.ndarray]:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total <= clip_norm or total == 0.0:
        return grads
    factor = clip_norm / total
    return {name: g * np.asarray(factor, dtype=g.dtype) for name, g in grads.items()}


def adagrad_step(
    params: ModelParams,
    grads: Dict[str, np.ndarray],
    state: AdagradState,
    learning_rate: float,
    epsilon: float = 1e-7,
    clip_norm: Optional[float] = None,
) -> AdagradState:
    """acc += g², p -= lr * g / (sqrt(acc) + eps). 임베딩 padding 행은 갱신하지 않음"""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(name, "그래디언트")

    frozen = set(params.embedding_names)
    prepared = {}
    for name, grad in grads.items():
        grad = np.asarray(grad, dtype=params[name].dtype)
        if name in frozen:
            grad = grad.copy()
            grad[0] = 0.0
        prepared[name] = grad
    if clip_norm is not None:
        prepared = clip_by_global_norm(prepared, clip_norm)

    lr = np.asarray(learning_rate)
    eps = np.asarray(epsilon)
    for name, grad in prepared.items():
        param = params[name]
        acc = state.accumulators[name]
        acc += grad * grad
        update = (lr * grad / (np.sqrt(acc) + eps)).astype(param.dtype)
        param.data -= update
    state.step += 1
    return state


@dataclass
class TrainState:
    """재개 가능한 학습 상태"""

    params: ModelParams
    optimizer: AdagradState

    @property
    def step(self) -> int:
        return self.optimizer.step


@dataclass
class TrainResult:
    state: TrainState
    losses: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1][1] if self.losses else float("nan")


def steps_per_epoch(num_examples: int, batch_size: int) -> int:
    # 마지막 부분 배치도 학습
    return math.ceil(num_examples / batch_size)


def batch_indices(step: int, num_examples: int, train_config: TrainConfig, seed: int) -> np.ndarray:
    """전역 스텝 → 예제 인덱스. epoch 별 셔플은 (seed, "shuffle", epoch) 에서 파생"""
    per_epoch = steps_per_epoch(num_examples, train_config.batch_size)
    epoch, offset = divmod(step, per_epoch)
    if train_config.shuffle:
        order = derive_rng(seed, "shuffle", epoch).permutation(num_examples)
    else:
        order = np.arange(num_examples)
    start = offset * train_config.batch_size
    return order[start:start + train_config.batch_size]


class BatchPrefetcher:
    """학습 스텝 순서대로 배치를 미리 준비하는 bounded 큐

    배치 순서는 셔플 결과로 고정되므로 준비 속도와 무관하게 결정적이다.
    """

    _DONE = object()

    def __init__(self, data: EncodedBatch, steps: Sequence[int], train_config: TrainConfig, seed: int):
        self.data = data
        self.steps = list(steps)
        self.train_config = train_config
        self.seed = seed
        self.capacity = max(1, min(train_config.queue_capacity, len(self.steps)))
        self._queue: "queue.Queue" = queue.Queue(maxsize=self.capacity)
        self._stop = threading.Event()
        self._error: Optional[BaseException] = None
        self._thread = threading.Thread(target=self._produce, name="batch-prefetch", daemon=True)

    def _produce(self) -> None:
        try:
            for step in self.steps:
                if self._stop.is_set():
                    return
                indices = batch_indices(step, len(self.data), self.train_config, self.seed)
                self._put((step, self.data.take(indices)))
        except BaseException as e:  # 소비자 쪽에서 다시 발생
            self._error = e
        finally:
            self._put(self._DONE)

    def _put(self, item) -> None:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def __iter__(self) -> Iterator[Tuple[int, EncodedBatch]]:
        self._thread.start()
        try:
            while True:
                item = self._queue.get()
                if item is self._DONE:
                    break
                yield item
            if self._error is not None:
                raise self._error
        finally:
            self._stop.set()
            self._thread.join(timeout=5)


def training_step(
    kind: ModelKind,
    batch: EncodedBatch,
    state: TrainState,
    spec: FeatureSpec,
    model_config: BstConfig,
    train_config: TrainConfig,
    seed: int,
) -> float:
    """forward → loss → backward → Adagrad 한 번. 갱신 전 loss 반환"""
    rng = derive_rng(seed, "dropout", state.step)
    with Tape() as tape:
        probabilities = forward(kind, batch, state.params, spec, model_config, Mode.TRAIN, rng)
        loss = cross_entropy_loss(probabilities, batch.labels)
    grads = tape.backward(loss, state.params.tensors)
    adagrad_step(
        state.params,
        grads,
        state.optimizer,
        train_config.learning_rate,
        train_config.adagrad_epsilon,
        train_config.clip_norm,
    )
    if train_config.debug_checks:
        for name, tensor in state.params.items():
            if not np.all(np.isfinite(tensor.data)):
                raise NonFiniteError(name, "파라미터")
    return float(loss.data)


def new_train_state(
    kind: ModelKind, spec: FeatureSpec, model_config: BstConfig, train_config: TrainConfig, seed: int
) -> TrainState:
    params = init_params(kind, spec, model_config, seed)
    return TrainState(params, AdagradState.create(params, train_config.adagrad_initial_accumulator))


def train(
    kind: ModelKind,
    data: EncodedBatch,
    spec: FeatureSpec,
    model_config: BstConfig,
    train_config: TrainConfig,
    seed: int,
    state: Optional[TrainState] = None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """시드 셔플 미니배치 학습. state 를 넘기면 해당 스텝부터 이어서 진행"""
    kind = ModelKind(kind)
    if len(data) == 0:
        raise DatasetEmptyError("학습 데이터가 비어 있습니다")
    if not data.has_labels:
        raise DatasetEmptyError("학습 데이터에 라벨이 없는 예제가 있습니다")

    if state is None:
        state = new_train_state(kind, spec, model_config, train_config, seed)
    per_epoch = steps_per_epoch(len(data), train_config.batch_size)
    total = per_epoch * train_config.epochs
    end = total if max_steps is None else min(total, state.step + max_steps)
    steps = range(state.step, end)

    tag = model_tag(kind, model_config)
    progress = TrainingLogger(tag, train_config.log_every)
    logger.info(
        f"[{tag}] 학습 시작 - 예제 {len(data)}개, 스텝 {state.step}→{end} / {total}, "
        f"파라미터 {state.params.num_parameters():,}개"
    )

    result = TrainResult(state=state)
    epoch_losses: List[float] = []
    for step, batch in BatchPrefetcher(data, steps, train_config, seed):
        loss = training_step(kind, batch, state, spec, model_config, train_config, seed)
        result.losses.append((state.step, loss))
        epoch_losses.append(loss)
        progress.log_step(state.step, loss, min(state.step * train_config.batch_size, len(data) * train_config.epochs))
        if state.step % per_epoch == 0:
            progress.log_epoch(state.step // per_epoch, float(np.mean(epoch_losses)), len(epoch_losses))
            epoch_losses.clear()

    progress.log_finished(state.step)
    return result


def write_loss_log(losses: Sequence[Tuple[int, float]], path: Path, append: bool = False) -> None:
    """step<TAB>loss, 부동소수는 왕복 가능한 repr"""
    with Path(path).open("a" if append else "w", encoding="utf-8", newline="\n") as f:
        for step, loss in losses:
            f.write(f"{step}\t{loss!r}\n")


def read_loss_log(path: Path) -> List[Tuple[int, float]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            step, loss = line.split("\t")
            rows.append((int(step), float(loss)))
    return rows
