"""Shared fixtures: deterministic RNG, tiny images, and a small trained model.

The trained checkpoint is session-scoped because training even a toy model
costs ~30 s; CLI and pipeline tests share it. Golden files live under
tests/golden and are recorded on first run, then enforced.
"""

from pathlib import Path

import numpy as np
import pytest
import torch

from imd.core import Image, MatchingConfig
from imd.datasets import generate_dataset, load_dataset
from imd.pipeline import save_checkpoint
from imd.tensorio import read_tensor, write_tensor
from imd.train import train_model

torch.set_num_threads(1)

GOLDEN_DIR = Path(__file__).parent / "golden"

# Release-gate results, printed once at the end of the run (see
# test_acceptance.py); keyed by criterion number.
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


def golden_check(name: str, value, atol: float = 1e-6):
    """Compare against a stored reference, recording it on first run."""
    arr = np.asarray(value.detach().numpy() if isinstance(value, torch.Tensor) else value)
    arr = arr.astype(np.float32)
    path = GOLDEN_DIR / f"{name}.imdt"
    if not path.exists():
        GOLDEN_DIR.mkdir(exist_ok=True)
        write_tensor(path, arr)
        return
    ref = read_tensor(path)
    assert ref.shape == arr.shape, f"golden {name}: shape {arr.shape} != {ref.shape}"
    np.testing.assert_allclose(arr, ref, atol=atol, rtol=0)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def random_image(rng, h=64, w=64, image_id="img"):
    return Image(pixels=rng.integers(0, 256, (h, w, 3)).astype(np.uint8), id=image_id)


@pytest.fixture
def image_pair(rng):
    return random_image(rng, image_id="a"), random_image(rng, image_id="b")


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """40 synthetic warp pairs at 64x64: 36 train / 4 val."""
    root = tmp_path_factory.mktemp("data") / "warp"
    generate_dataset(root, "warp", 40, seed=11, holdout_every=10)
    records = load_dataset(root / "index.json")
    return root, records


@pytest.fixture(scope="session")
def trained_setup(tmp_path_factory, small_dataset):
    """A briefly trained model + checkpoint dir; enough to match reliably.

    250 steps leave confidences around 0.1, so the config lowers tau; the
    tests here exercise contracts, not confidence calibration.
    """
    _, records = small_dataset
    train_recs = [r for r in records if r.split == "train"]
    cfg = MatchingConfig(tau=0.05)
    model, history = train_model(train_recs, cfg, steps=250, log_every=0)
    ckpt = tmp_path_factory.mktemp("ckpt") / "model"
    save_checkpoint(model, cfg, ckpt)
    return model, cfg, ckpt
