import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lanit.config import LabelingConfig
from lanit.embedding import FROZEN, LEARNABLE, MockBackend
from lanit.errors import ConfigError
from lanit.labeling import (
    SimilarityVector,
    adaptive_threshold_label,
    build_prompts,
    compute_similarities,
    label,
    label_batch,
    rank_dictionary,
    select_domains_from_dictionary,
    similarity_batch,
    topk_label,
)

from conftest import solid


def test_threshold_strict_and_fallback():
    assert adaptive_threshold_label(SimilarityVector(np.array([0.3, 0.2, 0.25]), 0.22)).tolist() == [1, 0, 1]
    # a tie with the base does not pass
    assert adaptive_threshold_label(SimilarityVector(np.array([0.22, 0.3]), 0.22)).tolist() == [0, 1]
    # nothing passes: one-hot argmax
    assert adaptive_threshold_label(SimilarityVector(np.array([0.1, 0.15, 0.12]), 0.5)).tolist() == [0, 1, 0]


def test_threshold_needs_base():
    with pytest.raises(ConfigError):
        adaptive_threshold_label(SimilarityVector(np.array([0.1]), None))


def test_topk_ties_lowest_index():
    assert topk_label(SimilarityVector(np.array([0.5, 0.5, 0.1]), None), 1).tolist() == [1, 0, 0]
    assert topk_label(SimilarityVector(np.array([0.1, 0.3, 0.2]), None), 2).tolist() == [0, 1, 1]
    with pytest.raises(ConfigError):
        topk_label(SimilarityVector(np.array([0.1]), None), 2)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=8), st.floats(-1, 1))
def test_label_always_has_an_active_domain(f, base):
    d = adaptive_threshold_label(SimilarityVector(np.array(f), base))
    assert d.M >= 1


def test_label_batch_matches_scalar():
    rng = np.random.default_rng(0)
    f = torch.from_numpy(rng.uniform(-1, 1, (50, 5)))
    base = torch.from_numpy(rng.uniform(-1, 1, 50))
    for mode in ("adaptive", "topk"):
        cfg = LabelingConfig(domains=list("abcde"), mode=mode, K=2)
        got = label_batch(f, base, cfg).numpy()
        want = np.stack([label(SimilarityVector(f[i].numpy(), float(base[i])), cfg).d for i in range(50)])
        assert np.array_equal(got, want)


def test_prompt_structure(mock):
    p = build_prompts("a photo of", ["red", "blue"], mock)
    assert p.N == 2 and p.L == 3
    seq = p.sequences()[1]
    assert seq.provenance == [LEARNABLE] * 3 + [FROZEN]
    assert torch.equal(seq.tokens[-1], p.domain_token(1)[0])
    assert len(list(p.parameters())) == 1  # only the template is learnable
    with pytest.raises(ConfigError, match="known domains"):
        p.domain_index("green")
    with pytest.raises(ConfigError):
        build_prompts("a photo of", ["red", "red"], mock)


def test_base_prompt_shares_template_storage(mock):
    p = build_prompts("a photo of", ["red"], mock)
    with torch.no_grad():
        p.templates[0].add_(0.1)
    assert torch.equal(p.base_sequence().tokens, p.templates[0])


def test_empty_template_has_no_base(mock):
    p = build_prompts("", ["red", "blue"], mock)
    assert p.base_sequence() is None
    sim = compute_similarities(solid("red"), p, mock)
    assert sim.base_sim is None


def test_mock_engineered_labels(mock):
    cfg = LabelingConfig(domains=["red", "blue", "circle", "square"])
    p = build_prompts("a photo of", cfg.domains, mock, cfg)
    d = label(compute_similarities(solid("red", 64, "square"), p, mock, cfg), cfg)
    assert d.tolist() == [1, 0, 0, 1]


def test_augmented_prompts(mock):
    cfg = LabelingConfig(domains=["red", "blue"], augment=True, dataset_word="toy")
    p = build_prompts("a photo of", cfg.domains, mock, cfg)
    assert len(p.templates) == 9
    assert all("toy" in t for t in p.template_texts)
    sim = compute_similarities(solid("blue", 32), p, mock, cfg)
    assert sim.f.argmax() == 1 and sim.base_sim is not None


def test_similarity_gradient_reaches_template(mock):
    p = build_prompts("a photo of", ["red", "blue"], mock)
    x = torch.from_numpy(solid("red").transpose(2, 0, 1)[None].copy())
    f, base = similarity_batch(x, p, mock)
    (f[0, 0] - base[0]).backward()
    assert p.templates[0].grad.abs().sum() > 0


def _rank_oracle(sims, scope):
    n_img, n_ent = sims.shape
    means = []
    for e in range(n_ent):
        if scope == "all":
            means.append((0, -sum(sims[:, e]) / n_img, e))
            continue
        rows = [i for i in range(n_img) if max(range(n_ent), key=lambda j: (sims[i, j], -j)) == e]
        if rows:
            means.append((0, -sum(sims[i, e] for i in rows) / len(rows), e))
        else:
            means.append((1, -sum(sims[:, e]) / n_img, e))
    return [e for *_, e in sorted(means)]


def test_rank_dictionary_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(50):
        sims = rng.uniform(-1, 1, (int(rng.integers(1, 12)), int(rng.integers(1, 7))))
        for scope in ("assigned", "all"):
            assert rank_dictionary(sims, scope).tolist() == _rank_oracle(sims, scope)


def test_select_domains(mock):
    imgs = [solid("red", 32, "circle"), solid("red", 32, "square"), solid("blue", 32, "circle")]
    be = MockBackend(k=64, concepts=["red", "blue", "green", "circle", "square"], context="a photo of")
    sel = select_domains_from_dictionary(imgs, ["green", "red", "blue"], 2, be)
    assert sel == ["red", "blue"]
    with pytest.raises(ConfigError):
        select_domains_from_dictionary(imgs, ["red"], 2, be)
