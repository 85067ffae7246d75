"""Procedural toy image world, prompt construction and language enhancement,
synthesis pipelines, confidence/real filtering, Fréchet feature distance, and
manifest-backed dataset persistence."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import diffusion as dm
from . import dualencoder as de

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
BLOB_MAGIC = b"SYND"

COLOR_RGB = {
    "red": (0.95, 0.15, 0.15),
    "green": (0.15, 0.85, 0.20),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.90, 0.15),
}

CONTEXT_PHRASES = [
    ["on", "a", "plain", "field"],
    ["near", "the", "center"],
    ["on", "a", "textured", "background"],
    ["under", "soft", "light"],
    ["in", "the", "corner"],
]


class DatasetFormatError(ValueError):
    """A persisted dataset failed validation; the message names the field."""


@dataclass(frozen=True)
class WorldSpec:
    """Procedural world: classes are shape x color combinations rendered on a
    parameterized background. Distinct parameterizations are distinct named
    domains."""
    name: str = "source"
    shapes: tuple = ("square", "circle")
    colors: tuple = ("red", "blue")
    image_size: int = 16
    channels: int = 3
    background: float = 0.20
    texture_freq: float = 2.0
    texture_amp: float = 0.05
    background_jitter: float = 0.0   # per-sample uniform spread of the background level
    texture_amp_jitter: float = 0.0  # per-sample uniform spread of the texture amplitude
    jitter: int = 2
    seed: int = 0

    def __post_init__(self):
        if len(self.shapes) * len(self.colors) < 2:
            raise ValueError("world needs at least 2 classes")

    @property
    def class_names(self):
        return [f"{color} {shape}" for shape in self.shapes for color in self.colors]

    @property
    def k(self):
        return len(self.class_names)

    @property
    def image_shape(self):
        return (self.channels, self.image_size, self.image_size)

    def shifted(self, **overrides):
        overrides.setdefault("name", "shifted")
        return replace(self, **overrides)


def world_hash(spec: WorldSpec):
    return hashlib.sha256(canonical_json(asdict(spec)).encode()).hexdigest()


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class LabeledImage:
    image: np.ndarray            # (C, H, W) float32 in [0, 1]
    label: int
    caption: list                # token list
    provenance: str              # "real" or a strategy tag
    prompt: str | None = None
    confidence: float | None = None
    scores: list | None = None   # per-class similarity logits, kept for SCE


def _shape_mask(shape, size, cx, cy, r):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if shape == "square":
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if shape == "triangle":
        return (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - (cy - r)) * 0.55)
    if shape == "cross":
        arm = max(r * 0.4, 1.0)
        return ((np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= r)) | \
               ((np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= r))
    raise ValueError(f"unknown shape '{shape}'")


def render_world_sample(spec: WorldSpec, class_idx, rng, with_context=True):
    """Render one labeled image; deterministic for a fixed rng state."""
    if not 0 <= class_idx < spec.k:
        raise ValueError(f"class index {class_idx} out of range for k={spec.k}")
    name = spec.class_names[class_idx]
    color_name, shape_name = name.split()
    size = spec.image_size

    phase = rng.uniform(0, 2 * np.pi)
    level = spec.background
    if spec.background_jitter:
        level += rng.uniform(-spec.background_jitter, spec.background_jitter)
    amp = spec.texture_amp
    if spec.texture_amp_jitter:
        amp = max(0.0, amp + rng.uniform(-spec.texture_amp_jitter, spec.texture_amp_jitter))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    texture = amp * np.sin(2 * np.pi * spec.texture_freq * (xx + yy) / size + phase)
    bg = np.clip(level + texture + 0.02 * rng.standard_normal((size, size)), 0, 1)

    c = size / 2 - 0.5
    cx = c + rng.integers(-spec.jitter, spec.jitter + 1)
    cy = c + rng.integers(-spec.jitter, spec.jitter + 1)
    r = size * 0.26
    mask = _shape_mask(shape_name, size, cx, cy, r)

    img = np.repeat(bg[None], spec.channels, axis=0)
    rgb = COLOR_RGB[color_name]
    for ch in range(spec.channels):
        img[ch][mask] = rgb[ch % 3]
    img = np.clip(img, 0, 1).astype(np.float32)

    caption = ["a", "photo", "of", "a", color_name, shape_name]
    if with_context:
        caption = caption + list(CONTEXT_PHRASES[rng.integers(0, len(CONTEXT_PHRASES))])
    return LabeledImage(image=img, label=class_idx, caption=caption, provenance="real")


def render_class_set(spec: WorldSpec, per_class, seed, with_context=False):
    """Balanced real dataset: per_class renders of every class."""
    samples = []
    for ci in range(spec.k):
        rng = np.random.default_rng(np.random.SeedSequence([seed, ci]))
        for _ in range(per_class):
            samples.append(render_world_sample(spec, ci, rng, with_context=with_context))
    return SyntheticDataset.from_samples(samples, world=world_hash(spec),
                                         strategy="real", seed=seed,
                                         classes=spec.class_names,
                                         image_shape=spec.image_shape)


def build_caption_corpus(spec: WorldSpec, n, seed, background_range=(0.1, 0.7),
                         texture_amp_range=(0.0, 0.2)):
    """(image, caption-tokens) pairs across randomized domain parameters,
    standing in for diverse web-scale pretraining data."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 9151]))
    pairs = []
    for _ in range(n):
        dom = replace(spec, name="corpus",
                      background=float(rng.uniform(*background_range)),
                      texture_amp=float(rng.uniform(*texture_amp_range)),
                      texture_freq=float(rng.uniform(1.0, 6.0)))
        ci = int(rng.integers(0, spec.k))
        s = render_world_sample(dom, ci, rng, with_context=True)
        pairs.append((s.image, s.caption))
    return pairs


def world_vocabulary(specs, extra_words=()):
    """Closed vocabulary covering captions, prompt templates, and providers."""
    words = set()
    for spec in specs:
        for name in spec.class_names:
            words.update(name.split())
    for phrase in CONTEXT_PHRASES:
        words.update(phrase)
    words.update("a photo of small bright next to and together the".split())
    for t in TemplateSentenceProvider.DEFAULT_TEMPLATES:
        words.update(w for w in t.replace("{name}", "").replace("{decoy}", "").split())
    words.update(extra_words)
    return de.Vocab(words)


# -- prompts ---------------------------------------------------------------

def base_prompts(class_names):
    """Basic strategy: one bare-name prompt per class, input order preserved."""
    if not class_names:
        raise ValueError("class name list is empty")
    return [f"a photo of a {c}" for c in class_names]


class SentenceProvider:
    """Turns a class name into natural-language sentences containing it."""

    def sentences(self, class_name, count):
        raise NotImplementedError


class TemplateSentenceProvider(SentenceProvider):
    """Finite template grammar; optionally injects decoy objects, which
    reproduces the noise LE can introduce."""

    DEFAULT_TEMPLATES = [
        "a {name} on a plain field",
        "a small {name} near the center",
        "a bright {name} on a textured background",
        "a {name} under soft light",
        "a {name} next to a {decoy}",
        "a {name} and a {decoy} together",
    ]

    def __init__(self, seed=0, templates=None, decoys=("box", "dot")):
        self.seed = seed
        self.templates = list(templates) if templates is not None else list(self.DEFAULT_TEMPLATES)
        self.decoys = list(decoys)

    def _rng(self, class_name):
        digest = hashlib.sha256(class_name.encode()).digest()
        return np.random.default_rng(np.random.SeedSequence(
            [self.seed, int.from_bytes(digest[:8], "little")]))

    def sentences(self, class_name, count):
        rng = self._rng(class_name)
        out = []
        decoys = [d for d in self.decoys if d != class_name] or ["box"]
        for _ in range(count):
            t = self.templates[rng.integers(0, len(self.templates))]
            sent = t.replace("{name}", class_name)
            if "{decoy}" in sent:
                sent = sent.replace("{decoy}", decoys[rng.integers(0, len(decoys))])
            out.append(sent)
        return out


class HttpSentenceProvider(SentenceProvider):
    """Client for an external word-to-sentence service.

    POST {"class_name": str, "count": int} -> {"sentences": [str]}.
    Failures degrade to the fallback provider with a logged warning.
    """

    def __init__(self, url, timeout=5.0, retries=2, fallback=None):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.fallback = fallback if fallback is not None else TemplateSentenceProvider()

    def sentences(self, class_name, count):
        import requests
        last_err = None
        for _ in range(self.retries + 1):
            try:
                resp = requests.post(self.url, json={"class_name": class_name, "count": count},
                                     timeout=self.timeout)
                resp.raise_for_status()
                sents = resp.json()["sentences"]
                if not isinstance(sents, list):
                    raise ValueError("service returned non-list 'sentences'")
                return [str(s) for s in sents]
            except Exception as err:  # noqa: BLE001 - any transport failure degrades
                last_err = err
        log.warning("sentence service failed for %r (%s); using template fallback",
                    class_name, last_err)
        return self.fallback.sentences(class_name, count)


def enhance_prompts(class_names, provider: SentenceProvider, per_class=200):
    """Language enhancement: per_class sentences per class. Returns
    (prompts-by-class, errors-by-class); partial results are retained."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    prompts, errors = {}, {}
    for name in class_names:
        try:
            sents = provider.sentences(name, per_class)
        except Exception as err:  # noqa: BLE001
            errors[name] = str(err)
            prompts[name] = []
            continue
        good = [s for s in sents if name in s]
        if len(good) < len(sents):
            errors[name] = f"{len(sents) - len(good)} sentences missing the class name"
        prompts[name] = good
    return prompts, errors


def condition_from_prompt(prompt, class_names, rng):
    """Class index the generator conditions on: a uniformly chosen mention of
    any known class name in the prompt, or None if none is mentioned."""
    mentions = [i for i, name in enumerate(class_names) if name in prompt]
    if not mentions:
        return None
    if len(mentions) == 1:
        return mentions[0]
    return int(mentions[rng.integers(0, len(mentions))])


# -- datasets --------------------------------------------------------------

class SyntheticDataset:
    """Manifest-backed labeled image collection with per-sample provenance."""

    def __init__(self, manifest, samples):
        self.manifest = manifest
        self.samples = samples
        counts = manifest.get("counts", {})
        actual = self.class_counts()
        if {k: v for k, v in counts.items()} != actual:
            raise DatasetFormatError(f"manifest counts {counts} != stored counts {actual}")

    @classmethod
    def from_samples(cls, samples, *, world, strategy, seed, classes, image_shape):
        manifest = {
            "version": FORMAT_VERSION,
            "world": world,
            "strategy": strategy,
            "seed": seed,
            "classes": list(classes),
            "counts": {},
            "image_shape": list(image_shape),
        }
        counts = {}
        for s in samples:
            counts[str(s.label)] = counts.get(str(s.label), 0) + 1
        manifest["counts"] = counts
        return cls(manifest, list(samples))

    def __len__(self):
        return len(self.samples)

    def class_counts(self):
        counts = {}
        for s in self.samples:
            counts[str(s.label)] = counts.get(str(s.label), 0) + 1
        return counts

    def images(self):
        shape = tuple(self.manifest["image_shape"])
        if not self.samples:
            return np.zeros((0,) + shape, dtype=np.float32)
        return np.stack([s.image for s in self.samples])

    def labels(self):
        return np.asarray([s.label for s in self.samples], dtype=np.int64)

    def subset(self, indices, strategy=None):
        picked = [self.samples[i] for i in indices]
        return SyntheticDataset.from_samples(
            picked, world=self.manifest["world"],
            strategy=strategy or self.manifest["strategy"],
            seed=self.manifest["seed"], classes=self.manifest["classes"],
            image_shape=self.manifest["image_shape"])

    def manifest_hash(self):
        blob = _pack_blob(self)
        m = dict(self.manifest)
        m["blob_sha256"] = hashlib.sha256(blob).hexdigest()
        m["samples"] = _sample_records(self)
        return hashlib.sha256(canonical_json(m).encode()).hexdigest()


def _sample_records(ds):
    recs = []
    for s in ds.samples:
        recs.append({
            "label": int(s.label),
            "caption": list(s.caption),
            "provenance": s.provenance,
            "prompt": s.prompt,
            "confidence": None if s.confidence is None else round(float(s.confidence), 6),
            "scores": None if s.scores is None else [round(float(v), 6) for v in s.scores],
        })
    return recs


def _pack_blob(ds):
    shape = tuple(ds.manifest["image_shape"])
    per_sample = int(np.prod(shape)) * 4
    header = BLOB_MAGIC + struct.pack("<III", FORMAT_VERSION, len(ds.samples), per_sample)
    chunks = [header]
    for s in ds.samples:
        arr = np.ascontiguousarray(s.image, dtype="<f4")
        if arr.shape != shape:
            raise DatasetFormatError(f"sample image shape {arr.shape} != manifest {shape}")
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def save_dataset(ds: SyntheticDataset, path):
    """Write manifest.json + samples.bin under `path` (a directory)."""
    import os
    os.makedirs(path, exist_ok=True)
    blob = _pack_blob(ds)
    manifest = dict(ds.manifest)
    manifest["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    manifest["samples"] = _sample_records(ds)
    blob_path = os.path.join(path, "samples.bin")
    man_path = os.path.join(path, "manifest.json")
    for target, payload in ((blob_path, blob), (man_path, canonical_json(manifest).encode())):
        tmp = target + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, target)
    return man_path


def load_dataset(path):
    """Lossless load with manifest-hash verification."""
    import os
    man_path = os.path.join(path, "manifest.json")
    try:
        with open(man_path, "rb") as fh:
            manifest = json.loads(fh.read())
    except json.JSONDecodeError as err:
        raise DatasetFormatError(f"manifest.json is not valid JSON: {err}") from err
    for key in ("version", "world", "strategy", "seed", "classes", "counts",
                "image_shape", "blob_sha256", "samples"):
        if key not in manifest:
            raise DatasetFormatError(f"manifest missing field '{key}'")
    if manifest["version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported manifest field 'version' = {manifest['version']}")

    with open(os.path.join(path, "samples.bin"), "rb") as fh:
        blob = fh.read()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise DatasetFormatError("field 'blob_sha256' does not match samples.bin")
    if blob[:4] != BLOB_MAGIC:
        raise DatasetFormatError("blob header magic mismatch")
    version, count, per_sample = struct.unpack("<III", blob[4:16])
    shape = tuple(manifest["image_shape"])
    if per_sample != int(np.prod(shape)) * 4:
        raise DatasetFormatError("blob header per-sample length disagrees with image_shape")
    if len(blob) != 16 + count * per_sample:
        raise DatasetFormatError("blob truncated: size disagrees with header sample count")
    if count != len(manifest["samples"]):
        raise DatasetFormatError("field 'samples' length disagrees with blob header")

    data = np.frombuffer(blob, dtype="<f4", offset=16).reshape((count,) + shape)
    samples = []
    for i, rec in enumerate(manifest["samples"]):
        samples.append(LabeledImage(
            image=data[i].copy(), label=int(rec["label"]), caption=list(rec["caption"]),
            provenance=rec["provenance"], prompt=rec.get("prompt"),
            confidence=rec.get("confidence"), scores=rec.get("scores")))
    meta = {k: manifest[k] for k in ("version", "world", "strategy", "seed",
                                     "classes", "counts", "image_shape")}
    return SyntheticDataset(meta, samples)


# -- synthesis -------------------------------------------------------------

def _prompt_bucket(prompt, n):
    """Stable prompt -> bucket assignment, independent of sampling order."""
    return int(hashlib.sha256(prompt.encode()).digest()[0]) % n


def synthesize_class_set(model, sched, class_names, per_class, strategy, *,
                         guidance_scale=3.0, prompts_by_class=None,
                         rg_rho=None, references_by_class=None,
                         seed=0, batch=200, world="", image_shape=None):
    """Generate a labeled synthetic dataset.

    B uses the bare class-name prompt as condition; LE draws prompts per
    sample and conditions on whichever class the prompt mentions (decoy
    mentions therefore yield mislabeled samples); RG starts each chain from
    noised per-class reference images.
    """
    if strategy not in ("B", "LE", "RG"):
        raise ValueError(f"unknown strategy '{strategy}'")
    image_shape = tuple(image_shape) if image_shape is not None else model.image_shape
    base = base_prompts(class_names)
    samples = []
    for ci, name in enumerate(class_names):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 101, ci]))
        remaining = per_class
        while remaining > 0:
            m = min(batch, remaining)
            if strategy == "RG":
                refs = np.asarray(references_by_class[ci], dtype=np.float32)
                idx = np.arange(per_class - remaining, per_class - remaining + m) % len(refs)
                # the diffusion latent space is [-1, 1]; images live in [0, 1]
                rgc = dm.RealGuidanceConfig(rho=rg_rho, reference=refs[idx] * 2.0 - 1.0)
                imgs = dm.real_guided_sample(model, rgc, ci, guidance_scale, sched, rng)
                imgs = (imgs + 1.0) / 2.0
                prompts = [base[ci]] * m
                conds = [ci] * m
            else:
                if strategy == "B":
                    prompts = [base[ci]] * m
                else:
                    pool = prompts_by_class[name]
                    if not pool:
                        raise ValueError(f"no prompts for class '{name}'")
                    prompts = [pool[int(rng.integers(0, len(pool)))] for _ in range(m)]
                conds = []
                for p in prompts:
                    cond = condition_from_prompt(p, class_names, rng)
                    conds.append(ci if cond is None else cond)
                conds = np.asarray(conds)
                if strategy == "LE":
                    # each distinct sentence carries its own conditioning
                    # strength, so prompt variety widens image variety
                    factors = (0.75, 1.0, 1.25)
                    pick = np.array([_prompt_bucket(p, len(factors)) for p in prompts])
                    imgs = np.empty((m,) + image_shape, dtype=np.float32)
                    for fi, f in enumerate(factors):
                        sel = np.flatnonzero(pick == fi)
                        if sel.size:
                            imgs[sel] = dm.sample(model, len(sel), conds[sel],
                                                  guidance_scale * f, sched, rng,
                                                  image_shape=image_shape)
                else:
                    imgs = dm.sample(model, m, conds, guidance_scale, sched, rng,
                                     image_shape=image_shape)
                imgs = (imgs + 1.0) / 2.0
            for j in range(m):
                samples.append(LabeledImage(
                    image=np.clip(imgs[j], 0, 1).astype(np.float32), label=ci,
                    caption=base[ci].split(), provenance=strategy, prompt=prompts[j]))
            remaining -= m
    return SyntheticDataset.from_samples(samples, world=world, strategy=strategy,
                                         seed=seed, classes=class_names,
                                         image_shape=image_shape)


# -- filters ---------------------------------------------------------------

def clip_filter(ds: SyntheticDataset, g, zsc, threshold=None, per_class=None):
    """Keep a sample iff its own-class confidence reaches the threshold
    (default 1/k). With per_class set, additionally keep only the per_class
    most confident survivors of each class, so a filtered set drawn from an
    oversized pool can match an unfiltered set's size. Survivors carry their
    confidence and score vector."""
    k = zsc.k
    thr = (1.0 / k) if threshold is None else threshold
    if not ds.samples:
        return ds.subset([], strategy=ds.manifest["strategy"] + "+CF")
    probs = de.clip_confidence(g, zsc, ds.images())
    scores = de.similarity_scores(g, zsc, ds.images())
    survivors = {c: [] for c in range(k)}
    for i, s in enumerate(ds.samples):
        conf = float(probs[i, s.label])
        if conf >= thr:
            survivors[s.label].append((conf, i))
            s.confidence = conf
            s.scores = [float(v) for v in scores[i]]
    keep = []
    for c, entries in survivors.items():
        if not entries and str(c) in ds.class_counts():
            warnings.warn(f"clip_filter left class {c} with zero samples")
        if per_class is not None:
            entries = sorted(entries, key=lambda e: (-e[0], e[1]))[:per_class]
        keep.extend(i for _, i in entries)
    return ds.subset(sorted(keep), strategy=ds.manifest["strategy"] + "+CF")


def real_filter(ds: SyntheticDataset, few_shot_real, g):
    """Nearest-neighbor margin rule: drop a class-c sample iff its best cosine
    match among other-class real features strictly beats its best match among
    class-c real features."""
    if not few_shot_real:
        raise ValueError("few_shot_real is empty")
    real_feats = g.encode(np.stack([s.image for s in few_shot_real]))
    real_feats = real_feats / np.maximum(np.linalg.norm(real_feats, axis=1, keepdims=True), 1e-12)
    real_labels = np.asarray([s.label for s in few_shot_real])
    present = set(int(l) for l in real_labels)

    feats = g.encode(ds.images())
    feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    sims = feats @ real_feats.T
    keep = []
    for i, s in enumerate(ds.samples):
        if s.label not in present:
            warnings.warn(f"real_filter: class {s.label} has no real exemplar; passed unfiltered")
            keep.append(i)
            continue
        same = sims[i][real_labels == s.label].max()
        other_mask = real_labels != s.label
        other = sims[i][other_mask].max() if other_mask.any() else -np.inf
        if not other > same:
            keep.append(i)
    return ds.subset(keep, strategy=ds.manifest["strategy"] + "+RF")


# -- Fréchet feature distance ----------------------------------------------

@dataclass
class FidStats:
    mu: np.ndarray
    sigma: np.ndarray
    count: int


def fid_stats(features):
    """Gaussian fit (mean, covariance) of a feature population."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("features must be (n, d)")
    mu = f.mean(axis=0)
    sigma = np.cov(f, rowvar=False)
    sigma = np.atleast_2d(sigma)
    if f.shape[0] < f.shape[1] + 1:
        log.warning("fid_stats: %d samples for %d dims; covariance may be rank-deficient",
                    f.shape[0], f.shape[1])
    return FidStats(mu=mu, sigma=sigma, count=f.shape[0])


def _psd_sqrt(mat):
    w, v = np.linalg.eigh((mat + mat.T) / 2.0)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(a: FidStats, b: FidStats):
    """Fréchet distance between the two Gaussian fits; matrix square roots
    via symmetric eigendecomposition with negative eigenvalues clamped."""
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    for name, sig in (("a", a.sigma), ("b", b.sigma)):
        if not np.allclose(sig, sig.T, atol=1e-6):
            raise ValueError(f"sigma_{name} is not symmetric")
    diff = a.mu - b.mu
    ra = _psd_sqrt(a.sigma)
    cross = _psd_sqrt(ra @ b.sigma @ ra)
    val = diff @ diff + np.trace(a.sigma + b.sigma - 2.0 * cross)
    return float(max(val, 0.0))


def dataset_features(g, ds: SyntheticDataset, batch=256):
    imgs = ds.images()
    chunks = [g.encode(imgs[i:i + batch]) for i in range(0, len(imgs), batch)]
    return np.concatenate(chunks) if chunks else np.zeros((0, g.d), dtype=np.float32)


def pixel_summary_features(images):
    """Low-dimensional pixel statistics for distribution comparisons:
    per-channel mean/std plus a 4x4 grayscale thumbnail. Deliberately
    encoder-free, so domain gaps a domain-invariant encoder would mask
    stay visible."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError("images must be (n, c, h, w)")
    n, c, h, w = x.shape
    mean = x.reshape(n, c, -1).mean(axis=2)
    std = x.reshape(n, c, -1).std(axis=2)
    gray = x.mean(axis=1)
    thumb = gray[:, :h - h % 4, :w - w % 4] \
        .reshape(n, 4, (h - h % 4) // 4, 4, (w - w % 4) // 4).mean(axis=(2, 4))
    return np.concatenate([mean, std, thumb.reshape(n, -1)],
                          axis=1).astype(np.float32)
