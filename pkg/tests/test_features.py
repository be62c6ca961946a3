"""
tests/test_features.py
피처 파이프라인 (어휘, 위치 버킷, 인코딩, 분할, 입출력) 테스트
"""

import json

import numpy as np
import pytest

from app.core.config import BstConfig, FeatureConfig
from app.core.exceptions import ChronologyError, DatasetFormatError, FeatureSpecError
from app.models.schemas import Example
from app.services.features import (
    CROSS_SEPARATOR,
    OOV_ID,
    PAD_ID,
    FeatureSpec,
    build_feature_spec,
    encode_example,
    encode_examples,
    load_examples,
    position_feature,
    temporal_split,
    write_examples,
)
from tests import BASE_TIME, create_random_examples, create_test_example

NO_CROSS = FeatureConfig(cross_features=[])


class TestVocabulary:
    """어휘 생성 규칙"""

    def test_reserved_ids_counted(self):
        example = create_test_example(history=[("A", "c1", 10)], target=("B", "c1"))
        spec = build_feature_spec([example], NO_CROSS, BstConfig())
        assert spec.item.size == 4
        assert spec.item.encode("A") >= 2 and spec.item.encode("B") >= 2
        assert spec.item.encode("unseen") == OOV_ID

    def test_min_count_maps_rare_token_to_oov(self):
        examples = [
            create_test_example(history=[("A", "c1", 10)], target=("A", "c1")),
            create_test_example(history=[], target=("B", "c1")),
        ]
        spec = build_feature_spec(examples, FeatureConfig(min_count=2, cross_features=[]), BstConfig())
        assert spec.item.encode("A") == 2
        assert spec.item.encode("B") == OOV_ID

    def test_cross_feature_enumerates_observed_pairs(self):
        examples = [
            create_test_example(target=(f"i{c}", f"c{c}"), features={"gender": g})
            for g in ("f", "m")
            for c in range(3)
        ]
        spec = build_feature_spec(examples, FeatureConfig(), BstConfig())
        (cross,) = [v for v in spec.others if v.cross_of is not None]
        assert cross.name == "gender*category_id"
        assert cross.size == 8
        assert f"m{CROSS_SEPARATOR}c2" in cross.token_to_id

    def test_frequency_then_token_order(self):
        examples = [
            create_test_example(history=[("z", "c1", 30), ("z", "c1", 20)], target=("a", "c1")),
            create_test_example(history=[("b", "c1", 10)], target=("a", "c1")),
        ]
        spec = build_feature_spec(examples, NO_CROSS, BstConfig())
        assert spec.item.encode("a") == 2
        assert spec.item.encode("z") == 3
        assert spec.item.encode("b") == 4
        assert spec.item.token_of(3) == "z"
        assert spec.item.token_of(PAD_ID) is None

    def test_max_vocab_limits_size(self):
        examples = create_random_examples(30, seed=2)
        spec = build_feature_spec(examples, FeatureConfig(max_vocab=3, cross_features=[]), BstConfig())
        assert spec.item.size == 5

    def test_empty_stream(self):
        with pytest.raises(FeatureSpecError, match="빈 학습 데이터"):
            build_feature_spec([], FeatureConfig(), BstConfig())

    def test_unknown_cross_column(self):
        with pytest.raises(FeatureSpecError, match="교차 피처"):
            build_feature_spec(
                [create_test_example()], FeatureConfig(cross_features=["device*item_id"]), BstConfig()
            )

    def test_vocab_sizes_include_position(self, small_spec):
        sizes = small_spec.vocab_sizes()
        assert sizes["position"] == len(small_spec.bucket_edges) + 2 == 10
        assert set(sizes) == {"item_id", "category_id", "position", "gender", "os", "gender*category_id"}

    def test_spec_file_round_trip(self, small_spec, tmp_path):
        path = tmp_path / "feature_spec.json"
        small_spec.save(path)
        loaded = FeatureSpec.load(path)
        assert loaded.vocab_sizes() == small_spec.vocab_sizes()
        assert loaded.item.token_to_id == small_spec.item.token_to_id
        assert [v.cross_of for v in loaded.others] == [v.cross_of for v in small_spec.others]
        loaded.save(tmp_path / "again.json")
        assert (tmp_path / "again.json").read_bytes() == path.read_bytes()

    def test_spec_file_version_mismatch(self, small_spec, tmp_path):
        path = tmp_path / "feature_spec.json"
        small_spec.save(path)
        document = json.loads(path.read_text(encoding="utf-8"))
        document["format_version"] = 99
        path.write_text(json.dumps(document), encoding="utf-8")
        with pytest.raises(FeatureSpecError, match="버전"):
            FeatureSpec.load(path)


class TestPositionFeature:
    """시간차 버킷"""

    @pytest.mark.parametrize(
        "delta,bucket",
        [(0, 0), (30, 1), (59, 1), (60, 2), (90, 2), (120, 2), (3599, 2), (3600, 3), (86400, 4), (10**7, 4)],
    )
    def test_short_edges(self, delta, bucket):
        assert position_feature(BASE_TIME - delta, BASE_TIME, [60, 3600, 86400]) == bucket

    def test_default_edges_overflow_bucket(self):
        edges = FeatureConfig().bucket_edges
        assert position_feature(BASE_TIME - 3 * 2592000, BASE_TIME, edges) == len(edges) + 1

    def test_negative_delta(self):
        with pytest.raises(ChronologyError):
            position_feature(BASE_TIME + 1, BASE_TIME, [60])


class TestEncoding:
    """고정 길이 인코딩"""

    @pytest.fixture
    def spec(self):
        examples = [
            create_test_example(history=[(f"i{k}", "c1", 1000 - k) for k in range(30)], target=("i99", "c2"))
        ]
        return build_feature_spec(examples, FeatureConfig(), BstConfig())

    def test_empty_history(self, spec):
        encoded = encode_example(create_test_example(history=[], target=("i99", "c2")), spec, 20)
        assert encoded.attention_mask.tolist() == [False] * 19 + [True]
        assert encoded.item_ids[:19].tolist() == [PAD_ID] * 19
        assert encoded.item_ids[-1] == spec.item.encode("i99")

    def test_truncates_to_most_recent(self, spec):
        history = [(f"i{k}", "c1", 1000 - k) for k in range(25)]
        encoded = encode_example(create_test_example(history=history), spec, 20)
        kept = [spec.item.token_of(int(i)) for i in encoded.item_ids[:19]]
        assert kept == [f"i{k}" for k in range(6, 25)]
        assert encoded.attention_mask.all()

    def test_position_bucket_of_recent_event(self, spec):
        encoded = encode_example(create_test_example(history=[("i1", "c1", 90)]), spec, 4)
        assert encoded.position_buckets.tolist() == [0, 0, 2, 0]

    def test_target_and_same_second_event_share_padding_bucket(self, spec):
        """delta 0 이벤트, 타겟, padding 모두 position 0번 행"""
        encoded = encode_example(create_test_example(history=[("i1", "c1", 0)]), spec, 4)
        assert encoded.attention_mask.tolist() == [False, False, True, True]
        assert encoded.position_buckets.tolist() == [0, 0, 0, 0]

    def test_unknown_tokens_map_to_oov(self, spec):
        example = create_test_example(
            history=[("never", "seen", 10)], target=("nope", "c2"), features={"os": "ios"}
        )
        encoded = encode_example(example, spec, 3)
        assert encoded.item_ids.tolist() == [PAD_ID, OOV_ID, OOV_ID]
        assert encoded.category_ids[1] == OOV_ID
        # gender 누락 → gender 와 교차 피처 모두 oov
        by_name = dict(zip(spec.other_columns, encoded.other_ids.tolist()))
        assert by_name["gender"] == OOV_ID
        assert by_name["gender*category_id"] == OOV_ID

    def test_structural_invariants(self, random_examples, small_spec):
        batch = encode_examples(random_examples, small_spec, 5)
        assert batch.attention_mask[:, -1].all()
        assert (batch.position_buckets[:, -1] == 0).all()
        padded = ~batch.attention_mask
        assert (batch.item_ids[padded] == PAD_ID).all()
        assert (batch.position_buckets[padded] == 0).all()
        # 패딩은 항상 왼쪽
        assert (np.diff(batch.attention_mask.astype(int), axis=1) >= 0).all()

    def test_reencoding_decoded_ids_is_stable(self, random_examples, small_spec):
        for example in random_examples[:10]:
            encoded = encode_example(example, small_spec, 5)
            valid = encoded.attention_mask
            tokens = [small_spec.item.token_of(int(i)) for i in encoded.item_ids[valid]]
            again = [small_spec.item.encode(t) for t in tokens]
            assert again == encoded.item_ids[valid].tolist()

    def test_stack_and_take(self, small_batch):
        subset = small_batch.take([3, 1])
        assert len(subset) == 2
        np.testing.assert_array_equal(subset.item_ids[0], small_batch.item_ids[3])
        assert subset.example(1).label == int(small_batch.labels[1])
        assert small_batch.has_labels

    def test_missing_labels_are_nan(self, small_spec):
        batch = encode_examples([create_test_example(label=None)], small_spec, 5)
        assert np.isnan(batch.labels[0])
        assert not batch.has_labels


class TestTemporalSplit:
    """시간 분할"""

    def test_partition(self, small_examples, small_synth_params):
        train, test = temporal_split(small_examples, small_synth_params.boundary_time)
        assert len(train) + len(test) == len(small_examples)
        assert all(e.recommend_time < small_synth_params.boundary_time for e in train)
        assert all(e.recommend_time >= small_synth_params.boundary_time for e in test)

    def test_day_ratio(self, small_examples, small_synth_params):
        train, test = temporal_split(small_examples, small_synth_params.boundary_time)
        base = small_synth_params.base_time
        train_days = {(e.recommend_time - base) // 86400 for e in train}
        test_days = {(e.recommend_time - base) // 86400 for e in test}
        assert train_days == {0, 1, 2}
        assert test_days == {3}

    def test_boundary_before_all_data(self, small_examples, caplog):
        train, test = temporal_split(small_examples, 0)
        assert train == []
        assert len(test) == len(small_examples)
        assert "분할 경계" in caplog.text


class TestDatasetIO:
    """라인 단위 JSON 입출력"""

    def test_round_trip(self, tmp_path):
        examples = create_random_examples(100, seed=4)
        path = tmp_path / "data.jsonl"
        assert write_examples(examples, path) == 100
        assert load_examples(path) == examples

    def test_field_names_are_normative(self, tmp_path):
        path = tmp_path / "data.jsonl"
        write_examples([create_test_example(history=[("A", "c1", 5)])], path)
        record = json.loads(path.read_text(encoding="utf-8").splitlines()[0])
        assert set(record) == {"seq", "target", "rt", "feat", "label"}
        assert set(record["seq"][0]) == {"item", "cat", "ts"}

    def test_missing_label_cites_line(self, tmp_path):
        path = tmp_path / "data.jsonl"
        lines = [create_test_example().to_line(), create_test_example(label=None).to_line()]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(DatasetFormatError) as excinfo:
            load_examples(path)
        assert excinfo.value.line_number == 2
        assert excinfo.value.field == "label"
        assert len(load_examples(path, require_label=False)) == 2

    def test_malformed_json_line(self, tmp_path):
        path = tmp_path / "data.jsonl"
        path.write_text(create_test_example().to_line() + "\n{not json\n", encoding="utf-8")
        with pytest.raises(DatasetFormatError) as excinfo:
            load_examples(path)
        assert excinfo.value.line_number == 2
        assert excinfo.value.field == "<json>"

    def test_non_chronological_sequence_rejected(self, tmp_path):
        record = {
            "seq": [{"item": "a", "cat": "c", "ts": 20}, {"item": "b", "cat": "c", "ts": 10}],
            "target": {"item": "t", "cat": "c"},
            "rt": 30,
            "feat": {},
            "label": 0,
        }
        path = tmp_path / "data.jsonl"
        path.write_text(json.dumps(record) + "\n", encoding="utf-8")
        with pytest.raises(DatasetFormatError, match="1 라인"):
            load_examples(path)

    def test_invalid_label_value(self):
        with pytest.raises(ValueError):
            Example.model_validate({"target": {"item": "t", "cat": "c"}, "rt": 1, "label": 2})
