import math
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from masque import faces
from masque.diffusion.backend import ToyBackend, ToyModelSpec
from masque.diffusion.schedule import DDIMSchedule, cosine_alphas_bar
from masque.diffusion.text import PAD, Tokenizer
from masque.diffusion.train import train_toy_model
from masque.errors import CheckpointError, ScheduleError, ShapeMismatch, UnknownTokens

DATA = Path(__file__).parent / "data"


# -- text ---------------------------------------------------------------------

def test_embed_text_two_content_tokens(backend):
    e = backend.embed_text("a face")
    assert e.words == ("a", "face")
    assert e.tokens[3:] == (PAD,) * (len(e.tokens) - 3)


def test_embed_text_deterministic(backend):
    a, b = backend.embed_text("a face with red lipstick"), backend.embed_text("a face with red lipstick")
    assert a.array.numpy().tobytes() == b.array.numpy().tobytes()


def test_new_words_are_set_difference(backend):
    from masque.editor.attention import PromptPair

    pair = PromptPair.build(backend.embed_text("a face"), backend.embed_text("a face with red lipstick"))
    # the connective "with" is new as well
    assert set(pair.new_words) == {"with", "red", "lipstick"}


def test_unknown_words_rejected():
    with pytest.raises(UnknownTokens):
        Tokenizer().tokenize("a face with glitter")


# -- schedule -------------------------------------------------------------------

def test_schedule_endpoints():
    s = DDIMSchedule(50)
    assert s.alphas_bar[0] == 1.0
    assert len(s.grid) == 50
    assert np.all(np.diff(s.alphas_bar) < 0)
    base = cosine_alphas_bar(1000)
    assert s.alphas_bar[50] == base[s.timesteps[50]]


def test_schedule_rejects_bad_T():
    with pytest.raises(ScheduleError):
        DDIMSchedule(7)
    with pytest.raises(ScheduleError):
        DDIMSchedule(50).ddim_step(torch.zeros(3), torch.zeros(3), 51, 50)


def test_ddim_step_identity_and_zero_eps():
    s = DDIMSchedule(50)
    z = torch.randn(2, 12, 16, 16, dtype=torch.float64)
    assert torch.equal(s.ddim_step(z, torch.randn_like(z), 20, 20), z)
    assert torch.equal(s.ddim_inverse_step(z, torch.randn_like(z), 20, 20), z)
    out = s.ddim_step(z, torch.zeros_like(z), 20, 19)
    torch.testing.assert_close(out, math.sqrt(s.alphas_bar[19] / s.alphas_bar[20]) * z, rtol=1e-12, atol=0)
    out = s.ddim_inverse_step(z, torch.zeros_like(z), 19, 20)
    torch.testing.assert_close(out, math.sqrt(s.alphas_bar[20] / s.alphas_bar[19]) * z, rtol=1e-12, atol=0)


@settings(max_examples=30, deadline=None)
@given(t=st.integers(1, 50), seed=st.integers(0, 2 ** 16))
def test_ddim_round_trip(t, seed):
    s = DDIMSchedule(50)
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(12, 16, 16, generator=g, dtype=torch.float64)
    eps = torch.randn(12, 16, 16, generator=g, dtype=torch.float64)
    back = s.ddim_inverse_step(s.ddim_step(z, eps, t, t - 1), eps, t - 1, t)
    assert float((back - z).norm() / z.norm()) < 1e-6


# -- autoencoder --------------------------------------------------------------

def test_autoencoder_exact(backend):
    x = torch.rand(3, 32, 32, 3, dtype=torch.float64)
    assert torch.equal(backend.decode_latent(backend.encode_image(x)), x)
    assert not backend.encode_image(torch.zeros(32, 32, 3)).any()


def test_encode_shape_checked(backend):
    with pytest.raises(ShapeMismatch):
        backend.encode_image(torch.zeros(16, 16, 3))
    with pytest.raises(ShapeMismatch):
        backend.decode_latent(torch.zeros(4, 16, 16))


# -- noise prediction ---------------------------------------------------------

@pytest.fixture(scope="module")
def latent():
    g = torch.Generator().manual_seed(5)
    return torch.randn(2, 12, 16, 16, generator=g, dtype=torch.float64)


def test_guidance_scale_collapse(backend, latent):
    c, u = backend.embed_text("a face with red lipstick"), backend.null_embedding()
    with torch.no_grad():
        e0, _ = backend.predict_noise(latent, 30, c, u, 0.0)
        e1, _ = backend.predict_noise(latent, 30, c, u, 1.0)
        eu = backend.eps(latent, 30, backend._ctx(u, 2))
        ec = backend.eps(latent, 30, backend._ctx(c, 2))
    assert torch.equal(e0, eu)
    assert torch.equal(e1, ec)


def test_cfg_linearity(backend, latent):
    c, u = backend.embed_text("a face with blue eyeshadow"), backend.null_embedding()
    with torch.no_grad():
        e, _ = backend.predict_noise(latent, 12, c, u, 7.5)
        eu = backend.eps(latent, 12, backend._ctx(u, 2))
        ec = backend.eps(latent, 12, backend._ctx(c, 2))
    torch.testing.assert_close(e, (1 - 7.5) * eu + 7.5 * ec, rtol=0, atol=1e-6)


def test_predict_noise_golden():
    # frozen from the bundled checkpoint
    from masque.models import load_diffusion

    g = np.load(DATA / "golden_predict_noise.npz")
    b = load_diffusion()
    with torch.no_grad():
        e, _ = b.predict_noise(torch.as_tensor(g["z"]), int(g["tau"]), b.embed_text("a face with red lipstick"),
                               b.null_embedding(), float(g["scale"]))
    assert np.max(np.abs(e.numpy() - g["eps"])) <= 1e-6


def test_attention_rows_sum_to_one(backend, latent):
    with torch.no_grad():
        _, rec = backend.predict_noise(latent, 40, backend.embed_text("a face"), backend.null_embedding(), 7.5,
                                       record_attention=True)
    assert rec.layers
    for key, probs in rec.items():
        torch.testing.assert_close(probs.sum(-1), torch.ones(probs.shape[:-1], dtype=probs.dtype), atol=1e-5,
                                   rtol=0)


def test_sampling_bit_reproducible(backend, latent):
    c, u = backend.embed_text("a face"), backend.null_embedding()

    def sample():
        z = latent.clone()
        with torch.no_grad():
            for tau in range(50, 0, -5):
                e, _ = backend.predict_noise(z, tau, c, u, 7.5)
                z = backend.ddim_step(z, e, tau, tau - 5)
        return z

    assert torch.equal(sample(), sample())


# -- checkpoints and training --------------------------------------------------

def test_checkpoint_round_trip(tmp_path, backend):
    path = tmp_path / "m.pt"
    backend.save(path, {"note": 1})
    again = ToyBackend.load(path)
    assert again.digest() == backend.digest()
    assert again.extra == {"note": 1}


def test_checkpoint_tamper_detected(tmp_path, backend):
    path = tmp_path / "m.pt"
    backend.save(path)
    d = torch.load(path, weights_only=False)
    k = next(iter(d["state"]))
    d["state"][k] = d["state"][k] + 1
    torch.save(d, path)
    with pytest.raises(CheckpointError):
        ToyBackend.load(path)


def test_checkpoint_wrong_kind(tmp_path, emb_a):
    path = tmp_path / "e.pt"
    emb_a.save(path)
    with pytest.raises(CheckpointError):
        ToyBackend.load(path)


def test_bundled_training_bound(backend):
    # loss history recorded when the bundled model was trained (50 x 10 renders, 4000 steps)
    initial = np.mean(backend.extra["initial_losses"])
    final = backend.extra["training_loss_windows"][-1]
    assert backend.spec.dataset["n_identities"] * backend.spec.dataset["images_per_identity"] == 500
    assert final <= 0.1 * initial


def test_small_training_overfits_and_is_deterministic():
    ds = faces.generate(1, 1, seed=3)
    spec = ToyModelSpec(width=8, mid_width=16, steps=200, batch_size=8, seed=4)
    b1, losses = train_toy_model(ds, spec)
    b2, _ = train_toy_model(ds, spec)
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    assert b1.digest() == b2.digest()
