"""World rendering, prompts, synthesis bookkeeping, filters, Fréchet
distance, and persistence."""

import json
import os
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from synthcls import dataengine as dtx
from synthcls import dualencoder as de
from synthcls import numcore as nc
from synthcls.numcore import AdamW, Parameter, Tensor


class FakeEncoder:
    """Identity 'encoder' whose images already are feature vectors."""

    def __init__(self, d):
        self.d = d

    def encode(self, x):
        return np.asarray(x, dtype=np.float32)


def _feature_dataset(feats, labels, classes, strategy="B"):
    samples = [dtx.LabeledImage(image=np.asarray(f, dtype=np.float32), label=int(l),
                                caption=["x"], provenance=strategy)
               for f, l in zip(feats, labels)]
    return dtx.SyntheticDataset.from_samples(
        samples, world="w", strategy=strategy, seed=0, classes=classes,
        image_shape=feats.shape[1:])


# -- rendering --------------------------------------------------------------

def test_render_deterministic():
    spec = dtx.WorldSpec()
    a = dtx.render_world_sample(spec, 1, np.random.default_rng(42))
    b = dtx.render_world_sample(spec, 1, np.random.default_rng(42))
    assert np.array_equal(a.image, b.image)
    assert a.caption == b.caption
    assert a.label == 1 and a.provenance == "real"


def test_domain_background_shift():
    src = dtx.WorldSpec(background=0.2, jitter=0, texture_amp=0.0)
    shf = src.shifted(background=0.6, texture_amp=0.0)
    assert shf.name == "shifted"
    a = dtx.render_world_sample(src, 0, np.random.default_rng(0)).image
    b = dtx.render_world_sample(shf, 0, np.random.default_rng(0)).image
    # same foreground, brighter background: mean intensity rises with the
    # configured background shift scaled by the background's pixel share
    assert b.mean() > a.mean() + 0.1


def test_render_rejects_bad_class():
    spec = dtx.WorldSpec()
    with pytest.raises(ValueError):
        dtx.render_world_sample(spec, 7, np.random.default_rng(0))


def test_world_probe_separability():
    """Linear probe on raw pixels: the source world must be learnable."""
    spec = dtx.WorldSpec()
    train = dtx.render_class_set(spec, 200, seed=1)
    test = dtx.render_class_set(spec, 50, seed=2)
    X = train.images().reshape(len(train), -1)
    y = train.labels()
    W = Parameter(np.zeros((X.shape[1], spec.k), dtype=np.float32), name="probe")
    opt = AdamW([W], lr=0.05)
    rng = np.random.default_rng(0)
    for _ in range(150):
        idx = rng.integers(0, len(X), size=128)
        loss = nc.cross_entropy(nc.matmul(Tensor(X[idx]), W), y[idx])
        nc.backward(loss)
        opt.step()
    Xt = test.images().reshape(len(test), -1)
    acc = np.mean(np.argmax(Xt @ W.data, axis=1) == test.labels())
    assert acc >= 0.95


def test_world_spec_validation():
    with pytest.raises(ValueError):
        dtx.WorldSpec(shapes=("square",), colors=())


# -- prompts ----------------------------------------------------------------

def test_base_prompts():
    assert dtx.base_prompts(["airplane"]) == ["a photo of a airplane"]
    names = ["b", "a", "c"]
    out = dtx.base_prompts(names)
    assert len(out) == 3
    assert out == [f"a photo of a {n}" for n in names]  # input order kept
    with pytest.raises(ValueError):
        dtx.base_prompts([])


def test_enhance_prompts_contract():
    provider = dtx.TemplateSentenceProvider(seed=0)
    prompts, errors = dtx.enhance_prompts(["red square", "blue circle"], provider, 200)
    assert not errors
    for name, sents in prompts.items():
        assert len(sents) == 200
        assert all(name in s for s in sents)


def test_enhance_prompts_single_template_degenerate():
    provider = dtx.TemplateSentenceProvider(templates=["a photo of a {name}"])
    prompts, _ = dtx.enhance_prompts(["dot"], provider, 10)
    assert len(set(prompts["dot"])) == 1


def test_enhance_prompts_partial_failure():
    class Flaky(dtx.SentenceProvider):
        def sentences(self, name, count):
            if name == "bad":
                raise RuntimeError("boom")
            return [f"a {name} here"] * count

    prompts, errors = dtx.enhance_prompts(["ok", "bad"], Flaky(), 3)
    assert prompts["ok"] == ["a ok here"] * 3
    assert prompts["bad"] == []
    assert "boom" in errors["bad"]


def test_enhance_prompts_drops_missing_name():
    class Sloppy(dtx.SentenceProvider):
        def sentences(self, name, count):
            return [f"a {name} here", "no mention at all"]

    prompts, errors = dtx.enhance_prompts(["dog"], Sloppy(), 2)
    assert prompts["dog"] == ["a dog here"]
    assert "dog" in errors


def test_condition_from_prompt():
    names = ["red square", "blue circle"]
    rng = np.random.default_rng(0)
    assert dtx.condition_from_prompt("a red square on a field", names, rng) == 0
    assert dtx.condition_from_prompt("nothing here", names, rng) is None
    picks = {dtx.condition_from_prompt("a red square next to a blue circle",
                                       names, np.random.default_rng(i))
             for i in range(20)}
    assert picks == {0, 1}  # both mentions reachable


def test_template_provider_deterministic():
    p1 = dtx.TemplateSentenceProvider(seed=5).sentences("red square", 20)
    p2 = dtx.TemplateSentenceProvider(seed=5).sentences("red square", 20)
    assert p1 == p2


# -- HTTP sentence provider -------------------------------------------------

class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        sents = [f"a {body['class_name']} number {i}" for i in range(body["count"])]
        payload = json.dumps({"sentences": sents}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture()
def sentence_server():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/"
    server.shutdown()


def test_http_provider_round_trip(sentence_server):
    provider = dtx.HttpSentenceProvider(sentence_server)
    out = provider.sentences("red square", 3)
    assert out == ["a red square number 0", "a red square number 1",
                   "a red square number 2"]


def test_http_provider_falls_back(caplog):
    provider = dtx.HttpSentenceProvider("http://127.0.0.1:1/none", timeout=0.2,
                                        retries=0)
    with caplog.at_level("WARNING"):
        out = provider.sentences("red square", 4)
    assert len(out) == 4 and all("red square" in s for s in out)
    assert any("fallback" in r.message for r in caplog.records)


# -- filters ----------------------------------------------------------------

def _ortho_features(rng, n, d):
    f = rng.standard_normal((n, d)).astype(np.float32)
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def test_clip_filter_threshold_zero_keeps_all():
    rng = np.random.default_rng(0)
    feats = _ortho_features(rng, 20, 6)
    ds = _feature_dataset(feats, rng.integers(0, 3, 20), ["a", "b", "c"])
    W = np.linalg.qr(rng.standard_normal((6, 3)))[0].astype(np.float32)
    zsc = de.ZeroShotClassifier(W=W, class_names=["a", "b", "c"])
    out = dtx.clip_filter(ds, FakeEncoder(6), zsc, threshold=0.0)
    assert len(out) == 20
    assert out.manifest["strategy"] == "B+CF"


def test_clip_filter_monotone_and_confidences():
    rng = np.random.default_rng(1)
    feats = _ortho_features(rng, 60, 6)
    ds = _feature_dataset(feats, rng.integers(0, 4, 60), list("abcd"))
    W = np.linalg.qr(rng.standard_normal((6, 4)))[0].astype(np.float32)
    zsc = de.ZeroShotClassifier(W=W, class_names=list("abcd"))
    g = FakeEncoder(6)
    default = dtx.clip_filter(ds, g, zsc)  # threshold 1/k = 0.25
    assert all(s.confidence >= 0.25 for s in default.samples)
    lo = {id(s) for s in dtx.clip_filter(ds, g, zsc, threshold=0.25).samples}
    hi = {id(s) for s in dtx.clip_filter(ds, g, zsc, threshold=0.5).samples}
    assert hi <= lo  # survivors shrink monotonically


def test_clip_filter_warns_on_emptied_class():
    rng = np.random.default_rng(2)
    W = np.eye(2, dtype=np.float32)
    zsc = de.ZeroShotClassifier(W=W, class_names=["a", "b"])
    feats = np.tile(np.array([[1.0, 0.0]], dtype=np.float32), (6, 1))
    ds = _feature_dataset(feats, [1] * 6, ["a", "b"])  # all mislabeled as b
    with pytest.warns(UserWarning, match="zero samples"):
        out = dtx.clip_filter(ds, FakeEncoder(2), zsc, threshold=0.9)
    assert len(out) == 0


def test_real_filter_fixture_boundaries():
    classes = ["a", "b"]
    real = [dtx.LabeledImage(image=np.array([1, 0, 0, 0], dtype=np.float32),
                             label=0, caption=["x"], provenance="real"),
            dtx.LabeledImage(image=np.array([0, 1, 0, 0], dtype=np.float32),
                             label=1, caption=["x"], provenance="real")]
    # sample 0: equals the class-0 real -> kept. sample 1: equals the class-1
    # real and orthogonal to class-0 reals -> dropped (labelled 0).
    feats = np.array([[1, 0, 0, 0], [0, 1, 0, 0]], dtype=np.float32)
    ds = _feature_dataset(feats, [0, 0], classes)
    out = dtx.real_filter(ds, real, FakeEncoder(4))
    assert len(out) == 1
    assert np.array_equal(out.samples[0].image, feats[0])
    assert out.manifest["strategy"] == "B+RF"


def test_real_filter_matches_exhaustive_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        k = int(rng.integers(2, 4))
        classes = [f"c{i}" for i in range(k)]
        real_feats = _ortho_features(rng, int(rng.integers(k, 8)), 5)
        real_labels = np.concatenate([np.arange(k),
                                      rng.integers(0, k, len(real_feats) - k)])
        real = [dtx.LabeledImage(image=f, label=int(l), caption=["x"],
                                 provenance="real")
                for f, l in zip(real_feats, real_labels)]
        feats = _ortho_features(rng, 20, 5)
        labels = rng.integers(0, k, 20)
        ds = _feature_dataset(feats, labels, classes)
        kept = {id(s) for s in dtx.real_filter(ds, real, FakeEncoder(5)).samples}

        # brute-force nearest-neighbor margin rule
        for s in ds.samples:
            f = s.image / np.linalg.norm(s.image)
            sims = real_feats @ f
            same = sims[real_labels == s.label].max()
            other = sims[real_labels != s.label].max()
            assert (id(s) in kept) == (not other > same)


def test_real_filter_missing_class_passes_with_warning():
    real = [dtx.LabeledImage(image=np.array([1.0, 0.0], dtype=np.float32), label=0,
                             caption=["x"], provenance="real")]
    feats = np.array([[0.0, 1.0]], dtype=np.float32)
    ds = _feature_dataset(feats, [1], ["a", "b"])
    with pytest.warns(UserWarning, match="no real exemplar"):
        out = dtx.real_filter(ds, real, FakeEncoder(2))
    assert len(out) == 1
    with pytest.raises(ValueError):
        dtx.real_filter(ds, [], FakeEncoder(2))


# -- Fréchet distance -------------------------------------------------------

def _random_psd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.1 * np.eye(d)


def test_frechet_identical_is_zero():
    rng = np.random.default_rng(0)
    stats = dtx.fid_stats(rng.standard_normal((100, 5)))
    assert dtx.frechet_distance(stats, stats) == pytest.approx(0.0, abs=1e-6)


def test_frechet_1d_fixture():
    a = dtx.FidStats(mu=np.array([0.0]), sigma=np.array([[1.0]]), count=10)
    b = dtx.FidStats(mu=np.array([1.0]), sigma=np.array([[4.0]]), count=10)
    assert dtx.frechet_distance(a, b) == pytest.approx(2.0, abs=1e-6)


def test_frechet_symmetry_and_rotation_invariance():
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = int(rng.integers(2, 6))
        a = dtx.FidStats(mu=rng.standard_normal(d), sigma=_random_psd(rng, d), count=50)
        b = dtx.FidStats(mu=rng.standard_normal(d), sigma=_random_psd(rng, d), count=50)
        ab = dtx.frechet_distance(a, b)
        ba = dtx.frechet_distance(b, a)
        assert ab == pytest.approx(ba, abs=1e-6)
        q = np.linalg.qr(rng.standard_normal((d, d)))[0]
        ar = dtx.FidStats(mu=q @ a.mu, sigma=q @ a.sigma @ q.T, count=50)
        br = dtx.FidStats(mu=q @ b.mu, sigma=q @ b.sigma @ q.T, count=50)
        assert dtx.frechet_distance(ar, br) == pytest.approx(ab, abs=1e-4)


def test_frechet_rejects_mismatch():
    a = dtx.FidStats(mu=np.zeros(2), sigma=np.eye(2), count=5)
    b = dtx.FidStats(mu=np.zeros(3), sigma=np.eye(3), count=5)
    with pytest.raises(ValueError, match="mismatch"):
        dtx.frechet_distance(a, b)


def test_fid_stats_gaussian_fit():
    rng = np.random.default_rng(2)
    f = rng.standard_normal((5000, 2)) * [1.0, 2.0] + [3.0, -1.0]
    s = dtx.fid_stats(f)
    np.testing.assert_allclose(s.mu, [3.0, -1.0], atol=0.1)
    np.testing.assert_allclose(np.diag(s.sigma), [1.0, 4.0], rtol=0.1)


# -- persistence ------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    spec = dtx.WorldSpec()
    ds = dtx.render_class_set(spec, 5, seed=3)
    ds.samples[0].prompt = "a photo of a red square"
    ds.samples[0].confidence = 0.75
    ds.samples[0].scores = [0.1, 0.2, 0.3, 0.4]
    path = tmp_path / "ds"
    dtx.save_dataset(ds, str(path))
    back = dtx.load_dataset(str(path))
    assert len(back) == len(ds)
    for a, b in zip(ds.samples, back.samples):
        assert np.array_equal(a.image, b.image)
        assert (a.label, a.caption, a.provenance) == (b.label, b.caption, b.provenance)
    assert back.samples[0].prompt == "a photo of a red square"
    assert back.samples[0].confidence == pytest.approx(0.75)
    assert back.manifest_hash() == ds.manifest_hash()


def test_load_rejects_corrupted_blob(tmp_path):
    ds = dtx.render_class_set(dtx.WorldSpec(), 3, seed=0)
    path = tmp_path / "ds"
    dtx.save_dataset(ds, str(path))
    blob = (path / "samples.bin").read_bytes()
    (path / "samples.bin").write_bytes(blob[:-4] + b"\x00\x00\x00\x01")
    with pytest.raises(dtx.DatasetFormatError, match="blob_sha256"):
        dtx.load_dataset(str(path))


def test_load_rejects_corrupted_manifest(tmp_path):
    ds = dtx.render_class_set(dtx.WorldSpec(), 3, seed=0)
    path = tmp_path / "ds"
    dtx.save_dataset(ds, str(path))
    man = json.loads((path / "manifest.json").read_text())
    del man["counts"]
    (path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(dtx.DatasetFormatError, match="counts"):
        dtx.load_dataset(str(path))


def test_load_rejects_truncated_blob(tmp_path):
    ds = dtx.render_class_set(dtx.WorldSpec(), 3, seed=0)
    path = tmp_path / "ds"
    dtx.save_dataset(ds, str(path))
    blob = (path / "samples.bin").read_bytes()
    (path / "samples.bin").write_bytes(blob[:len(blob) // 2])
    with pytest.raises(dtx.DatasetFormatError):
        dtx.load_dataset(str(path))


def test_manifest_counts_invariant():
    s = dtx.LabeledImage(image=np.zeros((1, 2, 2), dtype=np.float32), label=0,
                         caption=["x"], provenance="B")
    good = dtx.SyntheticDataset.from_samples([s], world="w", strategy="B", seed=0,
                                             classes=["a"], image_shape=(1, 2, 2))
    bad_manifest = dict(good.manifest)
    bad_manifest["counts"] = {"0": 7}
    with pytest.raises(dtx.DatasetFormatError, match="counts"):
        dtx.SyntheticDataset(bad_manifest, [s])


def test_large_round_trip_budget(tmp_path):
    import time
    spec = dtx.WorldSpec()
    ds = dtx.render_class_set(spec, 2000, seed=4)
    t0 = time.time()
    dtx.save_dataset(ds, str(tmp_path / "big"))
    back = dtx.load_dataset(str(tmp_path / "big"))
    assert time.time() - t0 < 5.0
    assert len(back) == 8000
