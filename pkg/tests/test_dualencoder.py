"""Dual-encoder contracts: embeddings, zero-shot classifier construction,
confidence scoring, and contrastive pretraining sanity."""

import numpy as np
import pytest

from synthcls import dataengine as dtx
from synthcls import dualencoder as de
from synthcls import numcore as nc


class FakeEncoder:
    """Encoder stub whose 'images' are already feature vectors."""

    def __init__(self, d, scale=1.0):
        self.d = d
        self.scale = scale

    def encode(self, x):
        return np.asarray(x, dtype=np.float32) * self.scale


def _small_world():
    return dtx.WorldSpec(shapes=("square", "circle"), colors=("red", "blue"))


def _encoders(seed=0, d=16):
    rng = np.random.default_rng(seed)
    spec = _small_world()
    vocab = dtx.world_vocabulary([spec])
    g = de.ImageEncoder(spec.image_shape, d, rng)
    h = de.TextEncoder(vocab, d, rng)
    return spec, vocab, g, h


# -- encode_image -----------------------------------------------------------

def test_encode_image_contracts():
    spec, _, g, _ = _encoders()
    img = dtx.render_world_sample(spec, 0, np.random.default_rng(0)).image
    e1 = de.encode_image(g, img)
    e2 = de.encode_image(g, img)
    assert e1.shape == (16,)
    assert np.array_equal(e1, e2)
    u = e1 / np.linalg.norm(e1)
    assert float(u @ u) == pytest.approx(1.0, abs=1e-6)


def test_encode_image_rejects_bad_shape():
    _, _, g, _ = _encoders()
    with pytest.raises(nc.ShapeError):
        de.encode_image(g, np.zeros((3, 8, 8), dtype=np.float32))


def test_frozen_stats_batch_independence():
    spec, _, g, _ = _encoders()
    rng = np.random.default_rng(1)
    imgs = np.stack([dtx.render_world_sample(spec, i % 4, rng).image for i in range(8)])
    alone = de.encode_image(g, imgs[0])
    batched = de.encode_image(g, imgs)[0]
    assert np.allclose(alone, batched, atol=1e-6)


# -- zero-shot classifier ---------------------------------------------------

def test_zeroshot_single_class_predicts_it():
    _, _, g, h = _encoders()
    zsc = de.build_zeroshot_classifier(h, ["red square"])
    spec = _small_world()
    img = dtx.render_world_sample(spec, 0, np.random.default_rng(0)).image
    conf = de.clip_confidence(g, zsc, img)
    assert conf.shape == (1,) and conf[0] == pytest.approx(1.0)


def test_zeroshot_duplicate_names_warn():
    _, _, _, h = _encoders()
    with pytest.warns(UserWarning, match="duplicate"):
        zsc = de.build_zeroshot_classifier(h, ["red square", "red square"])
    assert np.allclose(zsc.W[:, 0], zsc.W[:, 1])


def test_zeroshot_unknown_token_named():
    _, _, _, h = _encoders()
    with pytest.raises(de.UnknownTokenError, match="zebra"):
        de.build_zeroshot_classifier(h, ["zebra stripe"])


def test_zeroshot_columns_unit_norm_and_pure():
    _, _, _, h = _encoders()
    names = ["red square", "blue circle"]
    a = de.build_zeroshot_classifier(h, names)
    b = de.build_zeroshot_classifier(h, names)
    np.testing.assert_allclose(np.linalg.norm(a.W, axis=0), 1.0, atol=1e-5)
    assert np.array_equal(a.W, b.W)  # pure function of (h, C, template)


def test_orthonormal_columns_argmax_oracle():
    """g(x) equal to orthonormalized column j must be classified as j."""
    _, _, _, h = _encoders()
    zsc = de.build_zeroshot_classifier(h, ["red square", "blue square",
                                           "red circle", "blue circle"])
    q, _ = np.linalg.qr(zsc.W.astype(np.float64))
    zsc.W = q.astype(np.float32)
    g = FakeEncoder(d=q.shape[0])
    for j in range(4):
        conf = de.clip_confidence(g, zsc, q[:, j].astype(np.float32))
        assert int(np.argmax(conf)) == j


# -- confidence -------------------------------------------------------------

def test_clip_confidence_fixtures():
    d = 4
    g = FakeEncoder(d)
    W = np.zeros((d, 2), dtype=np.float32)
    W[0, 0] = 1.0
    W[1, 1] = 1.0
    zsc = de.ZeroShotClassifier(W=W, class_names=["a", "b"])
    # equal cosines -> [0.5, 0.5]
    x = np.array([1.0, 1.0, 0.0, 0.0], dtype=np.float32)
    np.testing.assert_allclose(de.clip_confidence(g, zsc, x), [0.5, 0.5], atol=1e-6)
    # cosines [1, 0] at temperature 2 -> softmax([2, 0])
    x = np.array([1.0, 0.0, 0.0, 0.0], dtype=np.float32)
    np.testing.assert_allclose(de.clip_confidence(g, zsc, x),
                               [0.8808, 0.1192], atol=1e-4)


def test_clip_confidence_sums_to_one_and_rejects_zero_norm():
    g = FakeEncoder(3)
    W = np.linalg.qr(np.random.default_rng(0).standard_normal((3, 3)))[0].astype(np.float32)
    zsc = de.ZeroShotClassifier(W=W, class_names=["a", "b", "c"])
    rng = np.random.default_rng(1)
    conf = de.clip_confidence(g, zsc, rng.standard_normal((10, 3)).astype(np.float32))
    np.testing.assert_allclose(conf.sum(axis=1), 1.0, atol=1e-6)
    with pytest.raises(ValueError, match="zero-norm"):
        de.clip_confidence(g, zsc, np.zeros(3, dtype=np.float32))


def test_argmax_invariant_under_positive_rescale():
    rng = np.random.default_rng(2)
    W = np.linalg.qr(rng.standard_normal((6, 4)))[0].astype(np.float32)
    zsc = de.ZeroShotClassifier(W=W, class_names=list("abcd"))
    x = rng.standard_normal((5, 6)).astype(np.float32)
    a = de.clip_confidence(FakeEncoder(6, scale=1.0), zsc, x)
    b = de.clip_confidence(FakeEncoder(6, scale=37.5), zsc, x)
    assert np.array_equal(np.argmax(a, axis=1), np.argmax(b, axis=1))


# -- contrastive pretraining ------------------------------------------------

def test_infonce_batch_of_one_is_zero():
    _, _, g, h = _encoders()
    spec = _small_world()
    s = dtx.render_world_sample(spec, 0, np.random.default_rng(0))
    img = nc.Tensor(s.image[None])
    img_emb = g.forward(img)
    txt_emb = h.forward_tokens([h.vocab.encode(s.caption)])
    loss = de._contrastive_loss(img_emb, txt_emb, 2.0)
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_infonce_initial_loss_near_log_batch():
    _, _, g, h = _encoders(seed=3)
    spec = _small_world()
    pairs = dtx.build_caption_corpus(spec, 64, seed=5)
    img_emb = g.forward(np.stack([im for im, _ in pairs]))
    txt_emb = h.forward_tokens([h.vocab.encode(c) for _, c in pairs])
    loss = de._contrastive_loss(img_emb, txt_emb, 2.0)
    assert loss.item() == pytest.approx(np.log(64), rel=0.25)


def test_untrained_retrieval_near_chance():
    _, _, g, h = _encoders(seed=4)
    spec = _small_world()
    pairs = dtx.build_caption_corpus(spec, 100, seed=6)
    top1 = de.retrieval_top1(g, h, pairs)
    assert top1 <= 0.12  # chance is 0.01; allow generous slack


def test_infonce_rejects_small_corpus():
    _, _, g, h = _encoders()
    spec = _small_world()
    pairs = dtx.build_caption_corpus(spec, 4, seed=0)
    with pytest.raises(ValueError, match="corpus"):
        de.infonce_pretrain(g, h, pairs, de.InfoNceConfig(batch_size=64),
                            np.random.default_rng(0))
    with pytest.raises(ValueError):
        de.infonce_pretrain(g, h, [], de.InfoNceConfig(), np.random.default_rng(0))


def test_infonce_trains_and_retrieves():
    _, _, g, h = _encoders(seed=7, d=32)
    spec = _small_world()
    train_pairs = dtx.build_caption_corpus(spec, 512, seed=10)
    # context-free captions make the matching target visually inferable
    held_out = [(s.image, s.caption)
                for s in dtx.render_class_set(spec, 16, seed=99).samples]
    history = de.infonce_pretrain(g, h, train_pairs,
                                  de.InfoNceConfig(epochs=8, batch_size=64, lr=2e-3),
                                  np.random.default_rng(12))
    assert np.mean(history[-4:]) < np.mean(history[:4])  # loss decreased
    assert de.retrieval_top1(g, h, held_out) >= 0.70


def test_vocab_round_trip():
    v = de.Vocab(["A", "photo", "of", "red", "square"])
    assert v.encode("a photo OF red") == [v.index["a"], v.index["photo"],
                                          v.index["of"], v.index["red"]]
    with pytest.raises(de.UnknownTokenError):
        v.encode("a purple photo")
