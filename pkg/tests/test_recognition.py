import json

import httpx
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from masque import faces
from masque.errors import AuthError, ConfigError, DataError, InsufficientPairs, ServiceUnavailable
from masque.recognition.embedder import EmbedderSpec, FaceEmbedder, cosine, train_toy_embedder
from masque.recognition.remote import ClientConfig, remote_verify
from masque.recognition.verification import (Gallery, VerificationThreshold, calibrate_from_similarities,
                                             calibrate_threshold, identify, rank_identities, similarity, verify)


@pytest.fixture(scope="module")
def heldout():
    return faces.generate(50, 4, seed=99, identity_seed=1000)


def test_embedding_unit_norm_and_deterministic(emb_a, heldout):
    x = heldout.renders[0].pixels
    a, b = emb_a.embed_face(x), emb_a.embed_face(x)
    assert torch.equal(a.vector, b.vector)
    assert abs(float(a.vector.norm()) - 1) < 1e-6


@pytest.mark.parametrize("which", ["emb_a", "emb_b"])
def test_trained_embedder_bounds(which, request, heldout):
    # frozen training acceptance bounds, checked on held-out identities
    emb = request.getfixturevalue(which)
    e = emb.embed_batch(heldout.images())
    labels = np.array([r.identity_label for r in heldout.renders])
    s = (e @ e.T).numpy()
    iu = np.triu_indices(len(labels), 1)
    same = (labels[:, None] == labels[None, :])[iu]
    assert np.median(s[iu][same]) >= 0.9
    assert np.median(s[iu][~same]) <= 0.5


def test_same_identity_renders_similar(emb_a, heldout):
    g = heldout.by_identity()["id0003"]
    assert similarity(emb_a, g[0].pixels, g[1].pixels) >= 0.9


def test_embedders_are_independent(emb_a, emb_b):
    assert emb_a.digest() != emb_b.digest()
    assert emb_a.spec.seed != emb_b.spec.seed and emb_a.spec.width != emb_b.spec.width


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 16))
def test_cosine_symmetry(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(8, generator=g, dtype=torch.float64), torch.randn(8, generator=g, dtype=torch.float64)
    assert float(cosine(a, b)) == pytest.approx(float(cosine(b, a)), abs=1e-15)
    assert float(cosine(a, a)) == pytest.approx(1.0, abs=1e-12)


# -- thresholds -----------------------------------------------------------------------

def test_degenerate_calibration():
    assert calibrate_from_similarities(np.full(200, 0.3), 0.01).gamma == 0.3
    s = np.linspace(-0.2, 0.7, 150)
    assert calibrate_from_similarities(s, 0.0).gamma == 0.7
    with pytest.raises(InsufficientPairs):
        calibrate_from_similarities(np.zeros(10), 0.01)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=100, max_size=300), st.floats(0, 0.2), st.floats(0, 0.2))
def test_threshold_monotone_in_far(sims, f1, f2):
    lo, hi = sorted((f1, f2))
    assert calibrate_from_similarities(sims, lo).gamma >= calibrate_from_similarities(sims, hi).gamma


def test_calibration_far_recount(emb_b):
    ds = faces.generate(200, 1, seed=21, identity_seed=2000)
    x = ds.images()
    rng = np.random.default_rng(0)
    pairs = []
    while len(pairs) < 1000:
        i, j = rng.integers(0, 200, 2)
        if i != j:
            pairs.append((x[i], x[j]))
    th = calibrate_threshold(pairs, emb_b, far=0.01)
    # per-pair embedding differs from the batched one by rounding only
    sims = np.array([similarity(emb_b, a, b) for a, b in pairs])
    above = np.count_nonzero(sims > th.gamma + 1e-12)
    assert above / len(pairs) <= 0.01
    assert th.measured_far == above / len(pairs)
    assert np.count_nonzero(sims >= th.gamma - 1e-12) > above


def test_verify_boundary_and_fixture(emb_a):
    x = faces.generate(60, 1, seed=31, identity_seed=3000).images()
    th = VerificationThreshold(0.5, 0.01, 0.0, 100, "")
    v = verify(x[18], x[36], th, emb_a)
    # pair found once by search over the held-out renders
    assert v["similarity"] == pytest.approx(0.4203855654025384, abs=1e-6)
    assert v["match"] is False
    assert verify(x[0], x[0], th, emb_a)["match"] is True
    at = VerificationThreshold(v["similarity"], 0.01, 0.0, 100, "")
    assert verify(x[18], x[36], at, emb_a)["match"] is False


# -- identification ---------------------------------------------------------------------

def test_identify_brute_force(emb_a, heldout):
    groups = heldout.by_identity()
    labels = sorted(groups)
    gal = Gallery.from_images(emb_a, labels, np.stack([groups[l][0].pixels for l in labels]))
    rng = np.random.default_rng(1)
    for q in rng.choice(len(heldout), 20, replace=False):
        x = heldout.renders[q].pixels
        e = emb_a.embed_batch(x[None])[0]
        brute = sorted(((l, float((e * gal.entries[l][0]).sum() / e.norm() / gal.entries[l][0].norm()))
                        for l in labels), key=lambda p: (-p[1], p[0]))
        got = identify(x, gal, emb_a, k=len(labels))
        assert [l for l, _ in got] == [l for l, _ in brute]


def test_identify_single_and_self(emb_a, heldout):
    x = heldout.renders[0].pixels
    one = Gallery.from_images(emb_a, ["only"], x[None])
    assert identify(heldout.renders[5].pixels, one, emb_a)[0][0] == "only"
    label, s = identify(x, one, emb_a)[0]
    assert s == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(DataError):
        identify(x, Gallery(), emb_a)


def test_identify_insertion_order_invariant(emb_a, heldout):
    imgs = heldout.images()[:8]
    labels = [f"p{i}" for i in range(8)]
    g1 = Gallery.from_images(emb_a, labels, imgs)
    g2 = Gallery.from_images(emb_a, labels[::-1], imgs[::-1])
    q = emb_a.embed_batch(heldout.images()[9:10])[0]
    assert rank_identities(q, g1) == rank_identities(q, g2)


def test_gallery_persistence(tmp_path, emb_a, heldout):
    g = Gallery.from_images(emb_a, ["a", "b"], heldout.images()[:2], sources=["x0", "x1"])
    g.save(tmp_path / "gal")
    h = Gallery.load(tmp_path / "gal")
    assert h.labels == ["a", "b"]
    assert torch.equal(h.entries["a"], g.entries["a"])
    assert h.provenance["b"] == ["x1"]


# -- training ------------------------------------------------------------------------------

def test_small_embedder_training():
    ds = faces.generate(2, 4, seed=6, identity_seed=800)
    spec = EmbedderSpec(width=8, steps=60, identities_per_batch=2, images_per_identity=4, seed=3)
    e1, _ = train_toy_embedder(ds, spec)
    e2, _ = train_toy_embedder(ds, spec)
    assert e1.digest() == e2.digest()
    g = ds.by_identity()
    genuine = similarity(e1, g["id0000"][0].pixels, g["id0000"][1].pixels)
    impostor = similarity(e1, g["id0000"][0].pixels, g["id0001"][0].pixels)
    assert genuine > impostor


def test_embedder_checkpoint_round_trip(tmp_path, emb_b):
    emb_b.save(tmp_path / "b.pt", {"k": 1})
    again = FaceEmbedder.load(tmp_path / "b.pt")
    assert again.digest() == emb_b.digest() and again.extra == {"k": 1}


# -- remote client ---------------------------------------------------------------------------

def _client():
    return ClientConfig(url="https://verify.example/api", api_key="k", backoff=0.0)


def _img():
    return np.zeros((4, 4, 3))


def test_remote_pass_through():
    transport = httpx.MockTransport(lambda req: httpx.Response(200, json={"confidence": 87.5}))
    assert remote_verify(_client(), _img(), _img(), transport=transport, sleep=lambda s: None) == 87.5


def test_remote_retries_rate_limit():
    calls = []

    def handler(req):
        calls.append(req)
        if len(calls) == 1:
            return httpx.Response(429)
        return httpx.Response(200, json={"confidence": 12.0})

    sleeps = []
    score = remote_verify(_client(), _img(), _img(), transport=httpx.MockTransport(handler), sleep=sleeps.append)
    assert score == 12.0 and len(calls) == 2 and len(sleeps) == 1
    assert json.loads(calls[0].content)["image_a"]


def test_remote_malformed_body():
    transport = httpx.MockTransport(lambda req: httpx.Response(200, text="<html>oops</html>"))
    with pytest.raises(ServiceUnavailable, match="oops"):
        remote_verify(_client(), _img(), _img(), transport=transport, sleep=lambda s: None)


def test_remote_auth_and_env(monkeypatch):
    transport = httpx.MockTransport(lambda req: httpx.Response(401))
    with pytest.raises(AuthError):
        remote_verify(_client(), _img(), _img(), transport=transport, sleep=lambda s: None)
    monkeypatch.delenv("MASQUE_FACE_API_KEY", raising=False)
    with pytest.raises(ConfigError, match="MASQUE_FACE_API_KEY"):
        ClientConfig.from_env()
