"""
app/services/bst_model.py
Behavior Sequence Transformer 와 WDL / WDL(+Seq) 베이스라인 forward 그래프
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from app.core import ops
from app.core.config import BstConfig
from app.core.exceptions import ConfigError, ShapeError
from app.core.seeding import derive_rng
from app.core.tensor import Tensor, default_dtype
from app.models.schemas import Mode, ModelKind, ReadoutMode
from app.services.features import EncodedBatch, FeatureSpec

EMBEDDING_PREFIX = "emb/"
EMBEDDING_INIT_STD = 0.01

ShapeTrace = Dict[str, Tuple[int, ...]]


class ModelParams:
    """이름 → 학습 텐서 모음. 이름은 정렬 순서로 고정"""

    def __init__(self, kind: ModelKind, tensors: Dict[str, Tensor]):
        self.kind = ModelKind(kind)
        self.tensors: Dict[str, Tensor] = {name: tensors[name] for name in sorted(tensors)}
        for name, tensor in self.tensors.items():
            tensor.name = name
            tensor.requires_grad = True

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def names(self) -> List[str]:
        return list(self.tensors)

    @property
    def embedding_names(self) -> List[str]:
        """padding 행(0) 이 고정되는 임베딩 테이블"""
        return [name for name in self.tensors if name.startswith(EMBEDDING_PREFIX)]

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: t.shape for name, t in self.tensors.items()}

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.kind, {n: Tensor(t.data.copy()) for n, t in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.kind, {n: Tensor(t.data.astype(dtype)) for n, t in self.tensors.items()})


# ---------------------------------------------------------------------------
# 초기화
# ---------------------------------------------------------------------------

def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _embedding(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    table = rng.normal(0.0, EMBEDDING_INIT_STD, size=(rows, dim))
    table[0] = 0.0
    return table


def other_width(spec: FeatureSpec) -> int:
    return sum(vocab.dim for vocab in spec.others)


def mlp_input_width(kind: ModelKind, spec: FeatureSpec, config: BstConfig) -> int:
    target_width = config.item_dim + config.category_dim
    if kind == ModelKind.BST:
        if config.readout == ReadoutMode.FLATTEN_ALL:
            return other_width(spec) + config.sequence_length * config.d_model
        return other_width(spec) + config.d_model
    if kind == ModelKind.WDL:
        return other_width(spec) + target_width
    return other_width(spec) + 2 * target_width


def init_params(kind: ModelKind, spec: FeatureSpec, config: BstConfig, seed: int) -> ModelParams:
    """모델 종류별 파라미터 생성 (가중치 Glorot uniform, 임베딩 N(0, 0.01), padding 행 0)"""
    kind = ModelKind(kind)
    if spec.item.dim != config.item_dim or spec.category.dim != config.category_dim:
        raise ConfigError("피처 스펙의 임베딩 차원이 모델 설정과 다릅니다")
    if kind == ModelKind.BST and spec.position_dim != config.position_dim:
        raise ConfigError("피처 스펙의 position 차원이 모델 설정과 다릅니다")

    rng = derive_rng(seed, "init")
    dtype = default_dtype()
    raw: Dict[str, np.ndarray] = {
        "emb/item_id": _embedding(rng, spec.item.size, config.item_dim),
        "emb/category_id": _embedding(rng, spec.category.size, config.category_dim),
    }
    for vocab in spec.others:
        raw[f"{EMBEDDING_PREFIX}{vocab.name}"] = _embedding(rng, vocab.size, vocab.dim)

    if kind == ModelKind.BST:
        d, d_ff = config.d_model, config.d_ff
        raw["emb/position"] = _embedding(rng, spec.num_position_buckets, config.position_dim)
        for j in range(config.num_blocks):
            prefix = f"block{j}/"
            for name in ("wq", "wk", "wv", "wh"):
                raw[prefix + name] = _glorot(rng, d, d)
            raw[prefix + "ffn_w1"] = _glorot(rng, d, d_ff)
            raw[prefix + "ffn_b1"] = np.zeros(d_ff)
            raw[prefix + "ffn_w2"] = _glorot(rng, d_ff, d)
            raw[prefix + "ffn_b2"] = np.zeros(d)
            for ln in ("ln1", "ln2"):
                raw[f"{prefix}{ln}_gain"] = np.ones(d)
                raw[f"{prefix}{ln}_bias"] = np.zeros(d)

    width = mlp_input_width(kind, spec, config)
    for k, out_width in enumerate(config.mlp_widths):
        raw[f"mlp{k}/w"] = _glorot(rng, width, out_width)
        raw[f"mlp{k}/b"] = np.zeros(out_width)
        width = out_width
    raw["out/w"] = _glorot(rng, width, 1)
    raw["out/b"] = np.zeros(1)

    return ModelParams(kind, {name: Tensor(value.astype(dtype)) for name, value in raw.items()})


# ---------------------------------------------------------------------------
# 공통 블록
# ---------------------------------------------------------------------------

def _record(trace: Optional[ShapeTrace], key: str, tensor: Tensor) -> Tensor:
    if trace is not None:
        trace[key] = tensor.shape
    return tensor


def embed_other_features(batch: EncodedBatch, params: ModelParams, spec: FeatureSpec) -> Optional[Tensor]:
    """기타 피처 임베딩 결합 [B, Σ d_o]. 컬럼이 없으면 None"""
    if batch.other_ids.shape[1] != len(spec.others):
        raise ShapeError(
            f"기타 피처 컬럼 수 불일치: 배치 {batch.other_ids.shape[1]}, 스펙 {len(spec.others)}"
        )
    parts = [
        ops.gather_rows(params[f"{EMBEDDING_PREFIX}{vocab.name}"], batch.other_ids[:, i], vocab.name)
        for i, vocab in enumerate(spec.others)
    ]
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else ops.concat(parts, axis=-1)


def _target_embedding(batch: EncodedBatch, params: ModelParams) -> Tensor:
    item = ops.gather_rows(params["emb/item_id"], batch.item_ids[:, -1], "item_id")
    category = ops.gather_rows(params["emb/category_id"], batch.category_ids[:, -1], "category_id")
    return ops.concat([item, category], axis=-1)


def mlp_head(x: Tensor, params: ModelParams, config: BstConfig, trace: Optional[ShapeTrace] = None) -> Tensor:
    """MLP (LeakyReLU) → 스칼라 affine → clamp sigmoid, [B] 확률"""
    k = 0
    while f"mlp{k}/w" in params:
        x = ops.leaky_relu(ops.add(ops.matmul(x, params[f"mlp{k}/w"]), params[f"mlp{k}/b"]), config.leaky_slope)
        _record(trace, f"mlp{k}", x)
        k += 1
    logits = ops.add(ops.matmul(x, params["out/w"]), params["out/b"])
    logits = ops.reshape(_record(trace, "logits", logits), (x.shape[0],))
    return _record(trace, "probabilities", ops.sigmoid(logits))


def _with_others(others: Optional[Tensor], features: List[Tensor]) -> Tensor:
    parts = ([others] if others is not None else []) + features
    return parts[0] if len(parts) == 1 else ops.concat(parts, axis=-1)


# ---------------------------------------------------------------------------
# BST
# ---------------------------------------------------------------------------

def embed_sequence(batch: EncodedBatch, params: ModelParams, config: BstConfig) -> Tensor:
    """슬롯별 item ⊕ category ⊕ position 임베딩 [B, L, d_V]"""
    if batch.sequence_length != config.sequence_length:
        raise ShapeError(f"배치 시퀀스 길이 {batch.sequence_length} != 설정 {config.sequence_length}")
    item = ops.gather_rows(params["emb/item_id"], batch.item_ids, "item_id")
    category = ops.gather_rows(params["emb/category_id"], batch.category_ids, "category_id")
    position = ops.gather_rows(params["emb/position"], batch.position_buckets, "position")
    return ops.concat([item, category, position], axis=-1)


def multi_head_attention(
    E: Tensor,
    mask: np.ndarray,
    params: ModelParams,
    block: int,
    config: BstConfig,
    return_weights: bool = False,
):
    """h 헤드 scaled dot-product 어텐션, 키 마스킹. 헤드 폭 d_V/h, 분모 sqrt(d_V/h)"""
    batch_size, length, d = E.shape
    heads, head_dim = config.num_heads, config.head_dim
    if d != config.d_model:
        raise ShapeError(f"어텐션 입력 폭 {d} != d_V {config.d_model}")
    prefix = f"block{block}/"

    def split(x: Tensor, axes) -> Tensor:
        return ops.transpose(ops.reshape(x, (batch_size, length, heads, head_dim)), axes)

    q = split(ops.matmul(E, params[prefix + "wq"]), (0, 2, 1, 3))    # [B, h, L, dh]
    k_t = split(ops.matmul(E, params[prefix + "wk"]), (0, 2, 3, 1))  # [B, h, dh, L]
    v = split(ops.matmul(E, params[prefix + "wv"]), (0, 2, 1, 3))    # [B, h, L, dh]

    scores = ops.scale(ops.matmul(q, k_t), 1.0 / math.sqrt(head_dim))
    key_mask = np.broadcast_to(np.asarray(mask, dtype=bool)[:, None, None, :], scores.shape)
    weights = ops.masked_softmax(scores, key_mask)

    context = ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3))
    context = ops.reshape(context, (batch_size, length, d))
    out = ops.matmul(context, params[prefix + "wh"])
    return (out, weights) if return_weights else out


def transformer_block(
    E: Tensor,
    mask: np.ndarray,
    params: ModelParams,
    block: int,
    config: BstConfig,
    mode: Mode = Mode.EVAL,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[ShapeTrace] = None,
) -> Tensor:
    """S' = LN(E + Dropout(MH(E))), F = LN(S' + Dropout(FFN(S')))"""
    prefix = f"block{block}/"
    training = Mode(mode) == Mode.TRAIN

    attended = _record(trace, f"{prefix}attention", multi_head_attention(E, mask, params, block, config))
    s = ops.layer_norm(
        ops.add(E, ops.dropout(attended, config.dropout_rate, training, rng)),
        params[prefix + "ln1_gain"],
        params[prefix + "ln1_bias"],
    )
    _record(trace, f"{prefix}attention_norm", s)

    hidden = ops.leaky_relu(
        ops.add(ops.matmul(s, params[prefix + "ffn_w1"]), params[prefix + "ffn_b1"]), config.leaky_slope
    )
    _record(trace, f"{prefix}ffn_hidden", hidden)
    ffn = ops.add(ops.matmul(hidden, params[prefix + "ffn_w2"]), params[prefix + "ffn_b2"])
    out = ops.layer_norm(
        ops.add(s, ops.dropout(ffn, config.dropout_rate, training, rng)),
        params[prefix + "ln2_gain"],
        params[prefix + "ln2_bias"],
    )
    return _record(trace, f"{prefix}output", out)


def stack_blocks(
    E: Tensor,
    mask: np.ndarray,
    params: ModelParams,
    config: BstConfig,
    mode: Mode = Mode.EVAL,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[ShapeTrace] = None,
) -> Tensor:
    out = E
    for j in range(config.num_blocks):
        out = transformer_block(out, mask, params, j, config, mode, rng, trace)
    return out


def forward_bst(
    batch: EncodedBatch,
    params: ModelParams,
    spec: FeatureSpec,
    config: BstConfig,
    mode: Mode = Mode.EVAL,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[ShapeTrace] = None,
) -> Tensor:
    mask = batch.attention_mask
    E = _record(trace, "embedding", embed_sequence(batch, params, config))
    F = stack_blocks(E, mask, params, config, mode, rng, trace)

    if config.readout == ReadoutMode.FLATTEN_ALL:
        # padding 행은 0 으로 만든 뒤 펼침
        keep = np.broadcast_to(mask[..., None], F.shape).astype(F.dtype)
        readout = ops.reshape(ops.mul(F, keep), (len(batch), config.sequence_length * config.d_model))
    else:
        readout = ops.select(F, axis=1, index=config.sequence_length - 1)
    _record(trace, "readout", readout)

    x = _with_others(embed_other_features(batch, params, spec), [readout])
    return mlp_head(_record(trace, "mlp_input", x), params, config, trace)


# ---------------------------------------------------------------------------
# 베이스라인
# ---------------------------------------------------------------------------

def forward_wdl(
    batch: EncodedBatch,
    params: ModelParams,
    spec: FeatureSpec,
    config: BstConfig,
    mode: Mode = Mode.EVAL,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[ShapeTrace] = None,
) -> Tensor:
    """기타 피처 + 타겟 임베딩만 사용 (행동 시퀀스 미사용)"""
    x = _with_others(embed_other_features(batch, params, spec), [_target_embedding(batch, params)])
    return mlp_head(_record(trace, "mlp_input", x), params, config, trace)


def history_mean(batch: EncodedBatch, params: ModelParams) -> Tensor:
    """타겟/padding 을 제외한 이력 슬롯의 item ⊕ category 임베딩 평균 [B, d_item + d_cat]

    슬롯을 (item, category) 정렬 순서로 재배치한 뒤 합산하므로 이력 순서와 무관하게 비트 단위로 같다.
    """
    history_mask = batch.attention_mask.copy()
    history_mask[:, -1] = False
    order = np.lexsort((batch.category_ids, batch.item_ids, ~history_mask), axis=-1)
    items = np.take_along_axis(batch.item_ids, order, axis=-1)
    categories = np.take_along_axis(batch.category_ids, order, axis=-1)
    canonical_mask = np.take_along_axis(history_mask, order, axis=-1)

    embedded = ops.concat(
        [
            ops.gather_rows(params["emb/item_id"], items, "item_id"),
            ops.gather_rows(params["emb/category_id"], categories, "category_id"),
        ],
        axis=-1,
    )
    return ops.masked_mean(embedded, canonical_mask)


def forward_wdl_seq(
    batch: EncodedBatch,
    params: ModelParams,
    spec: FeatureSpec,
    config: BstConfig,
    mode: Mode = Mode.EVAL,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[ShapeTrace] = None,
) -> Tensor:
    """WDL 입력 + 이력 평균 풀링 (순서 무시)"""
    pooled = _record(trace, "history_mean", history_mean(batch, params))
    x = _with_others(
        embed_other_features(batch, params, spec), [_target_embedding(batch, params), pooled]
    )
    return mlp_head(_record(trace, "mlp_input", x), params, config, trace)


ForwardFn = Callable[..., Tensor]

_FORWARDS: Dict[ModelKind, ForwardFn] = {
    ModelKind.BST: forward_bst,
    ModelKind.WDL: forward_wdl,
    ModelKind.WDL_SEQ: forward_wdl_seq,
}


def forward(
    kind: ModelKind,
    batch: EncodedBatch,
    params: ModelParams,
    spec: FeatureSpec,
    config: BstConfig,
    mode: Mode = Mode.EVAL,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[ShapeTrace] = None,
) -> Tensor:
    kind = ModelKind(kind)
    if params.kind != kind:
        raise ConfigError(f"파라미터 종류({params.kind.value}) 와 모델({kind.value}) 이 다릅니다")
    return _FORWARDS[kind](batch, params, spec, config, mode, rng, trace)


def predict_proba(
    batch: EncodedBatch,
    params: ModelParams,
    spec: FeatureSpec,
    config: BstConfig,
) -> np.ndarray:
    """eval 모드 클릭 확률 (테이프 기록 없음)"""
    return forward(params.kind, batch, params, spec, config, Mode.EVAL).data.astype(np.float64)


def model_tag(kind: ModelKind, config: BstConfig) -> str:
    kind = ModelKind(kind)
    if kind == ModelKind.BST:
        return f"BST(b={config.num_blocks})"
    return "WDL" if kind == ModelKind.WDL else "WDL(+Seq)"
