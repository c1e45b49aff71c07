"""Shared fixtures: small learned pairs reused by reconstruction-level tests."""

from __future__ import annotations

from pathlib import Path

import pytest

import synthdata
from guideddepth.operators import load_pair, save_pair

ARTIFACT_DIR = Path(__file__).parent / "_artifacts"


@pytest.fixture(scope="session")
def toy_pair():
    """Small coupled pair (p=3, k=18) trained on synthetic scenes."""
    path = ARTIFACT_DIR / "toy_pair.jido"
    if path.exists():
        return load_pair(path)
    pair, _ = synthdata.train_pair_on_scenes(
        num_scenes=4, shape=(72, 88), patch_side=3, k=18,
        samples=2500, iterations=600, seed=11,
    )
    ARTIFACT_DIR.mkdir(exist_ok=True)
    save_pair(pair, path)
    return pair


