"""
app/services/checkpoint.py
체크포인트 저장/로딩 - 텍스트 매니페스트 + little-endian float32 blob
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from app.core.exceptions import (
    CheckpointCorruptError,
    CheckpointShapeError,
    CheckpointVersionError,
)
from app.core.logging import get_logger
from app.core.tensor import Tensor
from app.models.schemas import CheckpointManifest, ManifestHeader, ModelKind, TensorEntry
from app.services.bst_model import ModelParams
from app.services.trainer import AdagradState, TrainState

logger = get_logger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
BLOB_FILE = "tensors.bin"
BLOB_DTYPE = np.dtype("<f4")
TEMP_SUFFIX = ".tmp"
PARAM_PREFIX = "param/"
ADAGRAD_PREFIX = "adagrad/"


@dataclass
class Checkpoint:
    """로딩된 전체 학습 상태"""

    kind: ModelKind
    state: TrainState
    config: Dict[str, Any] = field(default_factory=dict)
    vocab_sizes: Dict[str, int] = field(default_factory=dict)

    @property
    def params(self) -> ModelParams:
        return self.state.params

    @property
    def step(self) -> int:
        return self.state.step


def _tensor_entries(state: TrainState) -> List[Tuple[str, np.ndarray]]:
    entries = [(PARAM_PREFIX + name, t.data) for name, t in state.params.items()]
    entries += [(ADAGRAD_PREFIX + name, state.optimizer.accumulators[name]) for name in state.params.names]
    return entries


def _write_atomic(path: Path, data: bytes) -> Path:
    """같은 디렉터리의 임시 파일에 쓴 뒤 교체할 준비. 임시 파일 경로 반환"""
    staging = path.with_name(path.name + TEMP_SUFFIX)
    staging.write_bytes(data)
    return staging


def save_checkpoint(
    path: Path,
    state: TrainState,
    config: Dict[str, Any],
    vocab_sizes: Dict[str, int],
) -> Path:
    """디렉터리에 manifest.json 과 tensors.bin 기록. 동일 상태면 바이트 동일

    두 파일 모두 임시 이름으로 쓴 뒤 blob, 매니페스트 순으로 os.replace 한다.
    중간에 끊겨 매니페스트와 blob 이 어긋나면 blob_sha256 검사에서 걸린다.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    index: List[TensorEntry] = []
    chunks = []
    offset = 0
    for name, array in _tensor_entries(state):
        blob = np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes()
        index.append(TensorEntry(name=name, shape=list(array.shape), offset=offset, nbytes=len(blob)))
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)

    manifest = CheckpointManifest(
        format_version=CHECKPOINT_FORMAT_VERSION,
        model=state.params.kind,
        step=state.step,
        config=config,
        vocab_sizes=vocab_sizes,
        blob=BLOB_FILE,
        blob_bytes=offset,
        blob_sha256=hashlib.sha256(payload).hexdigest(),
        tensors=index,
    )
    staged_blob = _write_atomic(path / BLOB_FILE, payload)
    staged_manifest = _write_atomic(path / MANIFEST_FILE, (manifest.model_dump_json(indent=2) + "\n").encode("utf-8"))
    os.replace(staged_blob, path / BLOB_FILE)
    os.replace(staged_manifest, path / MANIFEST_FILE)
    logger.info(f"체크포인트 저장 완료: {path} (step {state.step}, {offset:,} bytes)")
    return path


def read_manifest(path: Path) -> CheckpointManifest:
    manifest_path = Path(path) / MANIFEST_FILE
    if not manifest_path.is_file():
        raise CheckpointCorruptError(f"체크포인트 매니페스트가 없습니다: {manifest_path}")
    text = manifest_path.read_text(encoding="utf-8")
    try:
        header = ManifestHeader.model_validate_json(text)
    except ValidationError as e:
        raise CheckpointCorruptError(f"매니페스트 파싱 실패: {manifest_path} - {e.errors()[0]['msg']}") from e

    if header.format_version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"지원하지 않는 체크포인트 버전입니다: {header.format_version} (지원: {CHECKPOINT_FORMAT_VERSION})"
        )
    try:
        return CheckpointManifest.model_validate_json(text)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"])
        raise CheckpointCorruptError(f"매니페스트 '{field}' 항목 오류: {first['msg']}") from e


def load_checkpoint(path: Path, expected_shapes: Optional[Dict[str, Tuple[int, ...]]] = None) -> Checkpoint:
    """매니페스트/blob 을 모두 검증한 뒤에만 상태를 반환"""
    path = Path(path)
    manifest = read_manifest(path)
    blob_path = path / manifest.blob
    if not blob_path.is_file():
        raise CheckpointCorruptError(f"체크포인트 blob 이 없습니다: {blob_path}")
    blob = blob_path.read_bytes()
    if len(blob) != manifest.blob_bytes:
        raise CheckpointCorruptError(
            f"blob 크기 불일치: {len(blob)} bytes (매니페스트 {manifest.blob_bytes} bytes)"
        )
    if hashlib.sha256(blob).hexdigest() != manifest.blob_sha256:
        raise CheckpointCorruptError(f"blob 체크섬이 매니페스트와 다릅니다: {blob_path}")

    arrays: Dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in manifest.tensors:
        shape = tuple(entry.shape)
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * BLOB_DTYPE.itemsize
        if entry.offset != expected_offset or entry.nbytes != nbytes:
            raise CheckpointCorruptError(f"'{entry.name}' 텐서 오프셋/크기가 매니페스트와 맞지 않습니다")
        if entry.offset + nbytes > len(blob):
            raise CheckpointCorruptError(f"'{entry.name}' 텐서가 blob 범위를 벗어납니다")
        data = np.frombuffer(blob, dtype=BLOB_DTYPE, count=count, offset=entry.offset)
        arrays[entry.name] = data.astype(np.float32).reshape(shape)
        expected_offset += nbytes
    if expected_offset != len(blob):
        raise CheckpointCorruptError("blob 에 매니페스트에 없는 데이터가 남아 있습니다")

    params = {n[len(PARAM_PREFIX):]: a for n, a in arrays.items() if n.startswith(PARAM_PREFIX)}
    accumulators = {n[len(ADAGRAD_PREFIX):]: a for n, a in arrays.items() if n.startswith(ADAGRAD_PREFIX)}
    if set(params) != set(accumulators):
        raise CheckpointCorruptError("파라미터와 Adagrad 누적값 목록이 일치하지 않습니다")

    if expected_shapes is not None:
        verify_shapes({n: a.shape for n, a in params.items()}, expected_shapes)

    state = TrainState(
        params=ModelParams(manifest.model, {n: Tensor(a) for n, a in params.items()}),
        optimizer=AdagradState(accumulators=accumulators, step=manifest.step),
    )
    return Checkpoint(
        kind=manifest.model,
        state=state,
        config=manifest.config,
        vocab_sizes=manifest.vocab_sizes,
    )


def verify_shapes(actual: Dict[str, Tuple[int, ...]], expected: Dict[str, Tuple[int, ...]]) -> None:
    missing = sorted(set(expected) - set(actual))
    extra = sorted(set(actual) - set(expected))
    if missing or extra:
        raise CheckpointShapeError(f"파라미터 목록 불일치 - 누락 {missing}, 초과 {extra}")
    for name, shape in expected.items():
        if tuple(actual[name]) != tuple(shape):
            raise CheckpointShapeError(f"'{name}' shape 불일치: 체크포인트 {actual[name]}, 모델 {shape}")


def verify_vocab_sizes(checkpoint: Checkpoint, vocab_sizes: Dict[str, int]) -> None:
    """피처 스펙과 체크포인트 어휘 크기 비교"""
    if checkpoint.vocab_sizes != vocab_sizes:
        diff = {
            k: (checkpoint.vocab_sizes.get(k), vocab_sizes.get(k))
            for k in sorted(set(checkpoint.vocab_sizes) | set(vocab_sizes))
            if checkpoint.vocab_sizes.get(k) != vocab_sizes.get(k)
        }
        raise CheckpointShapeError(f"피처 스펙과 체크포인트 어휘 크기가 다릅니다: {diff}")
