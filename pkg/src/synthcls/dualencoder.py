"""Toy dual encoder: a convolutional image encoder and a token-pooling text
encoder trained contrastively into a shared space, plus zero-shot classifier
construction from class-name prompts and confidence scoring."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import nn, numcore as nc
from .numcore import AdamW, LrSchedule, Tensor, cosine_lr

SIM_TEMPERATURE = 2.0  # fixed logit temperature for cosine similarities


class UnknownTokenError(KeyError):
    pass


class Vocab:
    """Whitespace word-level tokenizer over a closed vocabulary."""

    def __init__(self, words):
        self.words = sorted(set(w.lower() for w in words))
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def encode(self, text):
        tokens = text.lower().split() if isinstance(text, str) else [t.lower() for t in text]
        ids = []
        for tok in tokens:
            if tok not in self.index:
                raise UnknownTokenError(f"token '{tok}' not in vocabulary")
            ids.append(self.index[tok])
        return ids


class ImageEncoder(nn.Module):
    """conv-bn-relu-pool x2 followed by a linear projection to d dims."""

    def __init__(self, image_shape, d, rng, c1=8, c2=16):
        c, h, w = image_shape
        self.image_shape = tuple(image_shape)
        self.d = d
        self.conv1 = nn.Conv2d(c, c1, 3, rng, pad=1, name="img.conv1")
        self.bn1 = nn.BatchNorm2d(c1, name="img.bn1")
        self.conv2 = nn.Conv2d(c1, c2, 3, rng, pad=1, name="img.conv2")
        self.bn2 = nn.BatchNorm2d(c2, name="img.bn2")
        flat = c2 * (h // 4) * (w // 4)
        self.proj = nn.Linear(flat, d, rng, name="img.proj")

    def forward(self, x, train=False):
        """Taped forward. x: (N, C, H, W) array or Tensor."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        if x.shape[1:] != self.image_shape:
            raise nc.ShapeError(f"image shape {x.shape[1:]} != expected {self.image_shape}")
        h = nc.avg_pool2d(nc.relu(self.bn1(self.conv1(x), train=train)), 2)
        h = nc.avg_pool2d(nc.relu(self.bn2(self.conv2(h), train=train)), 2)
        return self.proj(nc.reshape(h, (h.shape[0], -1)))

    def encode(self, x):
        """Inference embeddings, (N, d) array; uses running BN statistics."""
        return self.forward(x, train=False).data

    def set_freeze_stats(self, flag):
        self.bn1.freeze_stats = flag
        self.bn2.freeze_stats = flag

    def norm_state(self):
        return (self.bn1.running_mean.copy(), self.bn1.running_var.copy(),
                self.bn2.running_mean.copy(), self.bn2.running_var.copy())


class TextEncoder(nn.Module):
    """Mean-pooled token embeddings pushed through a small MLP to d dims."""

    def __init__(self, vocab: Vocab, d, rng, embed_dim=32, hidden=64):
        self.vocab = vocab
        self.d = d
        self.embed = nn.Embedding(len(vocab), embed_dim, rng, name="txt.embed")
        self.fc1 = nn.Linear(embed_dim, hidden, rng, name="txt.fc1")
        self.fc2 = nn.Linear(hidden, d, rng, name="txt.fc2")

    def forward_tokens(self, token_id_lists):
        """Taped forward over a batch of token-id lists."""
        pooled = []
        flat = []
        offsets = []
        for ids in token_id_lists:
            offsets.append((len(flat), len(ids)))
            flat.extend(ids)
        emb = self.embed(np.asarray(flat, dtype=np.int64))
        seg = nc.reshape(emb, (len(flat), -1))
        for start, count in offsets:
            rows = nc.take_rows(seg, np.arange(start, start + count))
            pooled.append(nc.tmean(rows, axis=0, keepdims=True))
        h = nc.concat(pooled, axis=0)
        return self.fc2(nc.relu(self.fc1(h)))

    def encode(self, texts):
        """Inference embeddings for a list of strings, (N, d) array."""
        ids = [self.vocab.encode(t) for t in texts]
        return self.forward_tokens(ids).data


@dataclass
class ZeroShotClassifier:
    """Classifier weights built from unit-normalized text embeddings."""
    W: np.ndarray                 # (d, k), columns unit-normalized
    class_names: list
    temperature: float = SIM_TEMPERATURE

    @property
    def k(self):
        return self.W.shape[1]


def encode_image(g: ImageEncoder, x):
    """Embed a single image or a batch; returns (d,) or (N, d)."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    out = g.encode(x)
    return out[0] if single else out


def build_zeroshot_classifier(h: TextEncoder, class_names, template="a photo of a {}"):
    """One prompt per class through the text encoder; the unit-normalized
    embeddings become the classifier columns."""
    if not class_names:
        raise ValueError("class name list is empty")
    if len(set(class_names)) != len(class_names):
        warnings.warn("duplicate class names produce identical classifier columns")
    prompts = [template.format(c) for c in class_names]
    emb = h.encode(prompts)  # raises UnknownTokenError naming the bad token
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    W = (emb / np.maximum(norms, 1e-12)).T.astype(np.float32)
    return ZeroShotClassifier(W=W, class_names=list(class_names))


def clip_confidence(g: ImageEncoder, zsc: ZeroShotClassifier, x):
    """Softmax over temperature-scaled cosine similarities. Returns (k,)
    for a single image or (N, k) for a batch."""
    emb = encode_image(g, x)
    single = emb.ndim == 1
    if single:
        emb = emb[None]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm image embedding")
    cos = (emb / norms) @ zsc.W
    logits = zsc.temperature * cos
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs[0] if single else probs


def similarity_scores(g: ImageEncoder, zsc: ZeroShotClassifier, x):
    """Temperature-scaled cosine logits (pre-softmax), (N, k)."""
    emb = np.atleast_2d(encode_image(g, x))
    norms = np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    return (zsc.temperature * (emb / norms) @ zsc.W).astype(np.float32)


@dataclass
class InfoNceConfig:
    epochs: int = 8
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 1e-4
    temperature: float = SIM_TEMPERATURE


def _contrastive_loss(img_emb, txt_emb, temperature):
    img_n = nn.normalize_rows(img_emb)
    txt_n = nn.normalize_rows(txt_emb)
    logits = nc.mul(nc.matmul(img_n, nc.transpose(txt_n)), temperature)
    labels = np.arange(logits.shape[0])
    return nc.mul(nc.add(nc.cross_entropy(logits, labels),
                         nc.cross_entropy(nc.transpose(logits), labels)), 0.5)


def infonce_pretrain(g: ImageEncoder, h: TextEncoder, corpus, cfg: InfoNceConfig, rng):
    """Symmetric InfoNCE over (image, caption-token-list) pairs.
    Returns the per-step loss history."""
    if len(corpus) == 0:
        raise ValueError("empty pretraining corpus")
    if len(corpus) < cfg.batch_size:
        raise ValueError(f"corpus size {len(corpus)} below batch size {cfg.batch_size}")
    images = np.stack([np.asarray(im, dtype=np.float32) for im, _ in corpus])
    token_ids = [h.vocab.encode(cap) for _, cap in corpus]
    params = g.parameters() + h.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = len(corpus) // cfg.batch_size
    sched = LrSchedule(cfg.lr, max(cfg.epochs * steps_per_epoch, 1), "cosine")
    history = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(corpus))
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            img_emb = g.forward(images[idx], train=True)
            txt_emb = h.forward_tokens([token_ids[i] for i in idx])
            loss = _contrastive_loss(img_emb, txt_emb, cfg.temperature)
            nc.backward(loss)
            opt.step(lr=cosine_lr(step, sched))
            history.append(loss.item())
            step += 1
    return history


def retrieval_top1(g: ImageEncoder, h: TextEncoder, pairs):
    """Fraction of images whose top-ranked caption matches their own caption
    (textual match, since procedurally generated captions repeat)."""
    images = np.stack([np.asarray(im, dtype=np.float32) for im, _ in pairs])
    captions = [list(cap) for _, cap in pairs]
    img = g.encode(images)
    txt = h.forward_tokens([h.vocab.encode(c) for c in captions]).data
    img = img / np.maximum(np.linalg.norm(img, axis=1, keepdims=True), 1e-12)
    txt = txt / np.maximum(np.linalg.norm(txt, axis=1, keepdims=True), 1e-12)
    best = np.argmax(img @ txt.T, axis=1)
    return float(np.mean([captions[j] == captions[i] for i, j in enumerate(best)]))
