"""
app/core/seeding.py
최상위 시드에서 라벨별 독립 난수 생성기 파생
"""

import zlib

import numpy as np


def derive_seed_sequence(seed: int, label: str, index: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(label.encode("utf-8")), index))


def derive_rng(seed: int, label: str, index: int = 0) -> np.random.Generator:
    """(seed, label, index) 가 같으면 플랫폼과 무관하게 같은 난수열

    label 예: "data", "init", "shuffle", "dropout"
    """
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(seed, label, index)))


def bernoulli_from_uint32(rng: np.random.Generator, probability: float) -> int:
    """정수 경로 Bernoulli 추출: uint32 < floor(p * 2^32)"""
    threshold = int(np.floor(probability * 4294967296.0))
    return int(int(rng.integers(0, 4294967296, dtype=np.uint64)) < threshold)
