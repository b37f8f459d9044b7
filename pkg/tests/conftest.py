import numpy as np
import pytest
import torch

from lanit.config import ArchConfig, EmbedderConfig, LabelingConfig, LossWeights, RunConfig, TrainConfig
from lanit.data import ToyDatasetSpec, make_toy_dataset
from lanit.embedding import MockBackend

TOY_ATTRS = ["red", "blue", "circle", "square"]


@pytest.fixture
def mock():
    return MockBackend(k=64, concepts=TOY_ATTRS, context="a photo of")


def tiny_config(iterations=20, prompt_start=None, image_size=16, domains=("red", "blue"), **train):
    return RunConfig(
        embedder=EmbedderConfig(kind="mock", k=64, concepts=list(domains), context="a photo of"),
        labeling=LabelingConfig(template="a photo of", domains=list(domains)),
        arch=ArchConfig(image_size=image_size, style_dim=8, latent_dim=4, base_channels=4, max_channels=8, mapping_hidden=8, content_downsamples=2),
        loss=LossWeights(),
        train=TrainConfig(
            iterations=iterations,
            batch_size=4,
            prompt_learning_start_iter=prompt_start,
            checkpoint_interval=0,
            sample_interval=0,
            **train,
        ),
    )


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    return make_toy_dataset(ToyDatasetSpec(n_images=40, image_size=32, seed=3), out)


def solid(color, size=16, shape=None):
    """Image in [0, 1] with a coloured shape on a light background."""
    from lanit.data import render_toy_image

    img = render_toy_image(size, shape or "square", [color], np.random.default_rng(0))
    return np.asarray(img, dtype=np.float32) / 255.0


def model_batch(images01):
    arr = np.stack(images01).transpose(0, 3, 1, 2) * 2 - 1
    return torch.from_numpy(np.ascontiguousarray(arr)).float()


# Acceptance results collected by tests/test_acceptance.py, echoed in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
