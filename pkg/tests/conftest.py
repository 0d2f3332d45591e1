import numpy as np
import pytest

from Services.geometry import RngSeed


@pytest.fixture
def rng() -> RngSeed:
    return RngSeed(seed=20240611, stream_id=3)


@pytest.fixture
def generator(rng: RngSeed) -> np.random.Generator:
    return rng.generator()


@pytest.fixture
def out_dir(tmp_path, monkeypatch):
    """Artifact directory for controller and CLI runs."""

    target = tmp_path / "runs"
    monkeypatch.setenv("POPGRAD_OUTPUT_DIR", str(target))
    return target
