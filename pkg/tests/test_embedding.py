import numpy as np
import pytest
import torch

from lanit.config import EmbedderConfig
from lanit.embedding import (
    CachedEmbedder,
    EmbeddingCache,
    MockBackend,
    cosine,
    embed_image,
    make_backend,
    normalize,
    parse_registry,
)
from lanit.errors import ConfigError, InputError, NormalizationError

from conftest import solid


def text_vec(be, text):
    return be.encode_text(be.template_tokens(text)).numpy()


def test_normalize_zero_raises():
    with pytest.raises(NormalizationError):
        normalize(np.zeros(4))
    with pytest.raises(NormalizationError):
        normalize(torch.zeros(2, 3))


def test_cosine_basic_and_errors():
    assert cosine(np.array([1.0, 0]), np.array([2.0, 0])) == pytest.approx(1.0)
    assert cosine(np.array([1.0, 0]), np.array([0, 3.0])) == pytest.approx(0.0)
    with pytest.raises(InputError):
        cosine(np.ones(3), np.ones(4))


def test_mock_text_deterministic_and_unit(mock):
    other = MockBackend(k=64, concepts=["red", "blue", "circle", "square"], context="a photo of")
    a = text_vec(mock, "a photo of red")
    b = text_vec(other, "a photo of red")
    assert np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0)


def test_registry_seed_controls_direction():
    reg = parse_registry("red: 11\n# comment\nblue: 12\n")
    assert reg == {"red": 11, "blue": 12}
    a = MockBackend(k=32, registry=reg)
    b = MockBackend(k=32, registry={"red": 11})
    assert np.array_equal(a.direction("red"), b.direction("red"))
    assert not np.array_equal(a.direction("red"), MockBackend(k=32, registry={"red": 99}).direction("red"))


def test_registered_directions_align_images_with_prompts(mock):
    for colour in ("red", "blue"):
        v = embed_image(mock, solid(colour, 32))
        sims = {c: float(v @ text_vec(mock, f"a photo of {c}")) for c in ("red", "blue")}
        assert max(sims, key=sims.get) == colour


def test_shape_probe_separates_circle_and_square(mock):
    sq = mock.probe_scores(torch.from_numpy(solid("red", 64, "square").transpose(2, 0, 1)[None].copy()))
    ci = mock.probe_scores(torch.from_numpy(solid("red", 64, "circle").transpose(2, 0, 1)[None].copy()))
    assert sq["square"] > sq["circle"]
    assert ci["circle"] > ci["square"]


def test_noise_bounds_token_angle():
    clean = MockBackend(k=128)
    noisy = MockBackend(k=128, noise=0.2)
    c = float(clean.token_vector("red") @ noisy.token_vector("red"))
    assert c >= np.sqrt(1 - 0.2**2) - 1e-12
    assert c < 1.0


def test_image_encoding_is_differentiable(mock):
    x = torch.from_numpy(solid("red", 16).transpose(2, 0, 1)[None].copy()).double().requires_grad_(True)
    mock.encode_images(x).sum().backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()


def test_uniform_image_embeds(mock):
    v = embed_image(mock, np.full((8, 8, 3), 0.5, dtype=np.float32))
    assert np.isfinite(v).all()


def test_bad_image_shape(mock):
    with pytest.raises(InputError):
        embed_image(mock, np.zeros((8, 8)))


def test_make_backend_errors():
    with pytest.raises(ConfigError):
        make_backend(EmbedderConfig(kind="nope"))
    with pytest.raises(ConfigError):
        make_backend(EmbedderConfig(kind="reference", weights="/does/not/exist"))


def test_cache_hits_and_identity(tmp_path, mock):
    cache = EmbeddingCache(tmp_path / "emb.sqlite")
    ce = CachedEmbedder(mock, cache)
    img = solid("blue", 16)
    a = ce.embed_image(img)
    b = ce.embed_image(img)
    assert np.array_equal(a, b)
    assert (ce.hits, ce.misses) == (1, 1)
    ce2 = CachedEmbedder(MockBackend(k=64, seed=5, concepts=["blue"]), cache)
    ce2.embed_image(img)
    assert ce2.misses == 1
    cache.close()


# -- reference backend against transformers' own text/image feature path --------


class _Tok:
    # Like the real vocabulary, EOS carries the largest id.
    bos_token_id = 98
    eos_token_id = 99

    def __call__(self, text, add_special_tokens=False):
        return {"input_ids": [3 + (sum(map(ord, w)) % 90) for w in text.split()]}


@pytest.fixture(scope="module")
def tiny_clip():
    transformers = pytest.importorskip("transformers")
    torch.manual_seed(0)
    cfg = transformers.CLIPConfig(
        text_config=dict(vocab_size=100, hidden_size=32, intermediate_size=64, num_hidden_layers=2,
                         num_attention_heads=2, max_position_embeddings=16, bos_token_id=98, eos_token_id=99),
        vision_config=dict(hidden_size=32, intermediate_size=64, num_hidden_layers=2, num_attention_heads=2,
                           image_size=32, patch_size=8),
        projection_dim=24,
    )
    model = transformers.CLIPModel(cfg)
    model.config._attn_implementation = "eager"
    return model


def _features(out):
    return out if isinstance(out, torch.Tensor) else out.pooler_output


def test_reference_text_path_matches_model(tiny_clip):
    from lanit.embedding.reference import ClipBackend

    be = ClipBackend(model=tiny_clip, tokenizer=_Tok())
    text = "a photo of red"
    ids = [98] + _Tok()(text)["input_ids"] + [99]
    ids = ids + [99] * (16 - len(ids))
    with torch.no_grad():
        want = _features(tiny_clip.get_text_features(input_ids=torch.tensor([ids])))[0]
        got = be.encode_text(torch.cat([be.template_tokens("a photo of"), be.domain_tokens("red")]))
    assert torch.allclose(got, want, atol=1e-5)


def test_reference_image_path_and_grad(tiny_clip):
    from lanit.embedding.reference import ClipBackend

    be = ClipBackend(model=tiny_clip, tokenizer=_Tok())
    x = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        want = _features(tiny_clip.get_image_features(pixel_values=be.preprocess(x)))
        got = be.encode_images(x)
    assert torch.allclose(got, want, atol=1e-5)
    tok = be.template_tokens("a photo").requires_grad_(True)
    be.encode_text(torch.cat([tok, be.domain_tokens("red")])).sum().backward()
    assert tok.grad is not None and tok.grad.abs().sum() > 0
