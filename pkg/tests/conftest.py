"""Shared fixtures. The desk_run fixture is session-scoped because it
trains for real; only the tests that assert on training quality pay for
it."""

import json
import time
from pathlib import Path

import pytest

from vfseg.config import PartyConfig
from vfseg.data import MemoryImageStore, MemoryLabelStore, gen_synthetic
from vfseg.orchestrator import run_both
from vfseg.presets import config_for

DESK_SAMPLES = 369
DESK_EPOCHS = 10
DESK_SEED = 7


@pytest.fixture(scope="session")
def small_pairs():
    return gen_synthetic(16, 64, 0)


@pytest.fixture(scope="session")
def small_stores(small_pairs):
    size = config_for("tiny").input_size
    return (MemoryImageStore(small_pairs, size),
            MemoryLabelStore(small_pairs, size))


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One real training run: tiny preset, 369 synthetic pairs, split
    loopback path, adam. Returns everything quality tests assert on."""
    out_dir = tmp_path_factory.mktemp("desk_run")
    pairs = gen_synthetic(DESK_SAMPLES, 64, 0)
    size = config_for("tiny").input_size
    images = MemoryImageStore(pairs, size)
    labels = MemoryLabelStore(pairs, size)
    cfg = PartyConfig(role="both", preset="tiny", out_dir=str(out_dir),
                      batch_size=8, epochs=DESK_EPOCHS, optimizer="adam",
                      lr=1e-3, seed=DESK_SEED).validate()
    started = time.time()
    result = run_both(cfg, images, labels)
    elapsed = time.time() - started
    return {
        "cfg": cfg,
        "out_dir": Path(out_dir),
        "pairs": pairs,
        "images": images,
        "labels": labels,
        "bottom": result["bottom"]["worker"],
        "top": result["top"]["worker"],
        "epoch_reports": result["top"]["epoch_reports"],
        "elapsed": elapsed,
    }


@pytest.fixture(scope="session")
def golden_fixture():
    path = Path(__file__).parent / "data" / "golden_frames.json"
    with open(path) as fh:
        return json.load(fh)
