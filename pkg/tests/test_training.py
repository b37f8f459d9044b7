import copy
import struct

import numpy as np
import pytest
import torch

from lanit import checkpoint as ckpt
from lanit.config import ArchConfig
from lanit.data import load_dataset
from lanit.embedding import make_backend
from lanit.errors import CheckpointError, TrainingError
from lanit.training import (
    compute_labels,
    discriminator_step,
    get_batches,
    init_state,
    load_checkpoint,
    run_training,
    save_checkpoint,
    should_learn_prompt,
    train_step,
)

from conftest import tiny_config


def _params(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


@pytest.fixture
def setup(toy_dir):
    def make(**kw):
        cfg = tiny_config(**kw)
        be = make_backend(cfg.embedder)
        man = load_dataset(toy_dir, cfg.arch.image_size)
        return init_state(cfg, be), be, man

    return make


def _step(state, be, man):
    x, y = get_batches(man, state)
    return train_step(state, be, x, y)[1]


def test_should_learn_prompt_gate():
    cfg = tiny_config(iterations=100000, prompt_start=50000)
    assert not should_learn_prompt(49999, cfg)
    assert should_learn_prompt(50000, cfg)
    assert all(should_learn_prompt(i, tiny_config(prompt_start=0)) for i in (0, 1, 7))
    assert tiny_config(iterations=100).train.prompt_start == 60


def test_prompt_frozen_before_start(setup):
    state, be, man = setup(prompt_start=5)
    before = _params(state.prompts)
    for _ in range(3):
        _step(state, be, man)
    assert _same(before, _params(state.prompts))


def test_prompt_step_moves_template_only(setup):
    state, be, man = setup(prompt_start=0, lr_prompt=1e-2)
    before = _params(state.prompts)
    _step(state, be, man)
    after = _params(state.prompts)
    assert not torch.equal(before["templates.0"], after["templates.0"])
    for k in before:
        if k.startswith("domain_"):
            assert torch.equal(before[k], after[k])
    assert torch.equal(state.prompts.base_sequence().tokens, state.prompts.templates[0])


def test_discriminator_step_touches_only_discriminator(setup):
    state, be, man = setup()
    x, y = get_batches(man, state)
    d_y = compute_labels(state, be, y)
    g_before = {n: _params(m) for n, m in zip("cgsm", state.model.generator_modules())}
    p_before = _params(state.prompts)
    d_before = _params(state.model.discriminator)
    discriminator_step(state, x, y, d_y)
    assert all(_same(g_before[n], _params(m)) for n, m in zip("cgsm", state.model.generator_modules()))
    assert _same(p_before, _params(state.prompts))
    assert not _same(d_before, _params(state.model.discriminator))


def test_generator_step_leaves_discriminator(setup, monkeypatch):
    import lanit.training as T

    state, be, man = setup()
    monkeypatch.setattr(T, "discriminator_step", lambda *a: (0.0, 0.0, 0.0))
    d_before = _params(state.model.discriminator)
    g_before = _params(state.model.generator)
    _step(state, be, man)
    assert _same(d_before, _params(state.model.discriminator))
    assert not _same(g_before, _params(state.model.generator))
    assert all(p.requires_grad for p in state.model.discriminator.parameters())


def test_ema_tracks_live_weights(setup):
    state, be, man = setup()
    _step(state, be, man)
    beta = state.config.train.ema_decay
    for name in ("generator",):
        for pe, p in zip(state.ema[name].parameters(), getattr(state.model, name).parameters()):
            assert not torch.equal(pe, p)
            assert (pe - p).abs().max() < 1.0 - beta + 1e-6 + (p.abs().max())


def test_lr_step_decay(setup):
    state, be, man = setup(lr_step_size=1, lr_gamma=0.5)
    _step(state, be, man)
    _step(state, be, man)
    assert state.opt_g.param_groups[0]["lr"] == pytest.approx(0.5e-4)


def test_non_finite_loss_raises(setup):
    state, be, man = setup()
    x, y = get_batches(man, state)
    x = x.clone()
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingError) as e:
        train_step(state, be, x, y)
    assert e.value.report is not None


def test_checkpoint_round_trip_is_byte_identical(setup, tmp_path):
    state, be, man = setup(prompt_start=0)
    for _ in range(2):
        _step(state, be, man)
    a, b = tmp_path / "a.lanit", tmp_path / "b.lanit"
    save_checkpoint(state, a)
    save_checkpoint(load_checkpoint(a, be), b)
    assert a.read_bytes() == b.read_bytes()


def test_resume_matches_uninterrupted(setup, tmp_path):
    state, be, man = setup(prompt_start=2)
    full = [_step(state, be, man).log_record() for _ in range(4)]
    state2, _, _ = setup(prompt_start=2)
    for _ in range(2):
        _step(state2, be, man)
    save_checkpoint(state2, tmp_path / "mid.lanit")
    resumed = load_checkpoint(tmp_path / "mid.lanit", be)
    rest = [_step(resumed, be, man).log_record() for _ in range(2)]
    assert rest == full[2:]


def test_checkpoint_errors(setup, tmp_path):
    state, be, _ = setup()
    p = tmp_path / "c.lanit"
    save_checkpoint(state, p)
    other = copy.deepcopy(state.config)
    other.arch = ArchConfig(image_size=16, style_dim=4, latent_dim=4, base_channels=4, max_channels=8, mapping_hidden=8, content_downsamples=2)
    with pytest.raises(CheckpointError, match="mismatch"):
        load_checkpoint(p, be, other)
    raw = p.read_bytes()
    (tmp_path / "v.lanit").write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.lanit", be)
    (tmp_path / "t.lanit").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.lanit", be)
    (tmp_path / "m.lanit").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.lanit", be)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.lanit", be)


def test_archive_preserves_dtypes(tmp_path):
    arrays = {"a": np.arange(5, dtype=np.int64), "b": torch.ones(2, 3, dtype=torch.float64), "c": np.zeros(0, np.uint8)}
    ckpt.write_archive(tmp_path / "x", {"k": 1}, arrays)
    meta, back = ckpt.read_archive(tmp_path / "x")
    assert meta == {"k": 1}
    assert back["a"].dtype == np.int64 and back["b"].shape == (2, 3) and back["c"].size == 0


def test_run_training_outputs(setup, tmp_path):
    state, be, man = setup(iterations=2, prompt_start=1)
    state.config.train.sample_interval = 2
    state.config.train.checkpoint_interval = 1
    run_training(state, be, man, tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["ckpt_000001.lanit", "ckpt_000002.lanit", "latest.lanit", "losses.jsonl", "sample_000002.png"]
    lines = (tmp_path / "losses.jsonl").read_text().splitlines()
    assert len(lines) == 2
