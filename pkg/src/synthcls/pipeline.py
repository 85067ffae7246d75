"""Experiment configuration and the per-seed stage pipeline that the CLI
commands and report tooling drive: world rendering, encoder pretraining,
diffusion training, synthesis, filtering, tuning, and evaluation."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import replace
from functools import cached_property

import numpy as np

from . import dataengine as dtx
from . import diffusion as dm
from . import dualencoder as de
from . import trainer as tr

BROAD_SHAPES = ("square", "circle", "triangle", "cross")
BROAD_COLORS = ("red", "green", "blue", "yellow")


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "world": {
        "shapes": ["square", "circle"],
        "colors": ["red", "blue"],
        "image_size": 16,
        "background": 0.20,
        "texture_freq": 2.0,
        "texture_amp": 0.05,
        "background_jitter": 0.0,
        "texture_amp_jitter": 0.0,
        "jitter": 2,
    },
    "shifted": {
        "background": 0.55,
        "texture_freq": 5.0,
        "texture_amp": 0.15,
        "background_jitter": 0.0,
        "texture_amp_jitter": 0.0,
    },
    "data": {
        "train_per_class": 250,
        "test_per_class": 100,
    },
    "encoder": {
        "dim": 64,
        "corpus_size": 1280,
        "epochs": 8,
        "batch_size": 64,
        "lr": 0.002,
        "weight_decay": 1e-4,
    },
    "diffusion": {
        "T": 400,
        "scale": 3.0,
        "drop_prob": 0.1,
        "steps": 3000,
        "batch_size": 64,
        "lr": 0.001,
        "hidden": 256,
    },
    "synthesis": {
        "per_class": 2000,
        "per_class_rg": 800,
        "sentences_per_class": 200,
        "sample_batch": 200,
    },
    "strategies": {
        "le": False,
        "cf": False,
        "sce": False,
        "rf": False,
        "rg": False,
    },
    "tune": {
        "epochs": 30,
        "lr": 0.002,
        "weight_decay": 0.1,
        "real_batch": 32,
        "syn_batch": 512,
        "freeze_norm_stats": True,
        "phi": 0.0,
        "loss": "ce",
        "plan": "mix",
    },
    "pretrain": {
        "epochs": 8,
        "batch_size": 64,
        "lr": 1e-3,
        "weight_decay": 1e-4,
        "per_class": 150,
        "downstream_train_per_class": 25,
        "downstream_epochs": 6,
    },
    "shots": 0,
    "seeds": [0],
}


def _check_keys(cfg, ref, path=""):
    if isinstance(ref, dict):
        if not isinstance(cfg, dict):
            raise ConfigError(f"config key '{path or '<root>'}' must be an object")
        for key in cfg:
            if key not in ref:
                raise ConfigError(f"unknown config key '{path + key}'")
            _check_keys(cfg[key], ref[key], path + key + ".")


def make_config(overrides=None):
    """Full config from defaults plus a (possibly nested) override dict."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if overrides:
        _check_keys(overrides, DEFAULT_CONFIG)
        _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def _merge(dst, src):
    for key, val in src.items():
        if isinstance(val, dict) and isinstance(dst.get(key), dict):
            _merge(dst[key], val)
        else:
            dst[key] = val


def load_config(path):
    with open(path, "rb") as fh:
        try:
            raw = json.loads(fh.read())
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from err
    return make_config(raw)


def validate_config(cfg):
    _check_keys(cfg, DEFAULT_CONFIG)
    if cfg["shots"] not in (0, 1, 2, 4, 8, 16):
        raise ConfigError(f"shots must be in {{0,1,2,4,8,16}}, got {cfg['shots']}")
    if cfg["strategies"]["rg"] and cfg["shots"] == 0:
        raise ConfigError("real guidance (RG) requires shots >= 1")
    if cfg["strategies"]["rf"] and cfg["shots"] == 0:
        raise ConfigError("real filtering (RF) requires shots >= 1")
    if not cfg["seeds"]:
        raise ConfigError("seed list is empty")
    if not 0.0 <= cfg["tune"]["phi"] <= 1.0:
        raise ConfigError("tune.phi must be in [0, 1]")
    return cfg


def apply_override(cfg, assignment):
    """Apply one dot-path override, e.g. 'diffusion.T=80'. Values parse as
    JSON when possible, else as strings."""
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' is not key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    ref = DEFAULT_CONFIG
    for part in parts[:-1]:
        if not isinstance(ref, dict) or part not in ref:
            raise ConfigError(f"unknown config key '{key}'")
        ref = ref[part]
        node = node.setdefault(part, {})
    if not isinstance(ref, dict) or parts[-1] not in ref:
        raise ConfigError(f"unknown config key '{key}'")
    node[parts[-1]] = value
    return cfg


def config_hash(cfg):
    return hashlib.sha256(dtx.canonical_json(cfg).encode()).hexdigest()


def tune_config_from(cfg, seed, **kw):
    t = dict(cfg["tune"])
    t.update(kw)
    phi = t.pop("phi")
    return tr.TuneConfig(epochs=t["epochs"], lr=t["lr"], weight_decay=t["weight_decay"],
                         real_batch=t["real_batch"], syn_batch=t["syn_batch"],
                         freeze_encoder=(phi == 0.0), freeze_norm_stats=t["freeze_norm_stats"],
                         phi=phi, loss=t["loss"], plan=t["plan"], seed=seed)


class Experiment:
    """One seeded run of the whole pipeline. Stages are computed lazily and
    cached, so downstream stages can share upstream artifacts."""

    def __init__(self, cfg, seed):
        self.cfg = validate_config(copy.deepcopy(cfg))
        self.seed = int(seed)

    def _rng(self, tag):
        digest = hashlib.sha256(tag.encode()).digest()
        return np.random.default_rng(np.random.SeedSequence(
            [self.seed, int.from_bytes(digest[:8], "little")]))

    # -- worlds ------------------------------------------------------------

    @cached_property
    def source_spec(self):
        w = self.cfg["world"]
        return dtx.WorldSpec(name="source", shapes=tuple(w["shapes"]),
                             colors=tuple(w["colors"]), image_size=w["image_size"],
                             background=w["background"], texture_freq=w["texture_freq"],
                             texture_amp=w["texture_amp"], jitter=w["jitter"],
                             background_jitter=w["background_jitter"],
                             texture_amp_jitter=w["texture_amp_jitter"],
                             seed=self.seed)

    @cached_property
    def shifted_spec(self):
        s = self.cfg["shifted"]
        return self.source_spec.shifted(background=s["background"],
                                        texture_freq=s["texture_freq"],
                                        texture_amp=s["texture_amp"],
                                        background_jitter=s["background_jitter"],
                                        texture_amp_jitter=s["texture_amp_jitter"])

    @cached_property
    def broad_spec(self):
        return replace(self.source_spec, name="broad",
                       shapes=BROAD_SHAPES, colors=BROAD_COLORS)

    @property
    def class_names(self):
        return self.source_spec.class_names

    @property
    def k(self):
        return self.source_spec.k

    # -- real data ---------------------------------------------------------

    @cached_property
    def train_real(self):
        return dtx.render_class_set(self.source_spec, self.cfg["data"]["train_per_class"],
                                    seed=self.seed * 1000 + 1)

    @cached_property
    def test_source(self):
        return dtx.render_class_set(self.source_spec, self.cfg["data"]["test_per_class"],
                                    seed=self.seed * 1000 + 2)

    @cached_property
    def test_shifted(self):
        return dtx.render_class_set(self.shifted_spec, self.cfg["data"]["test_per_class"],
                                    seed=self.seed * 1000 + 3)

    def fewshot(self, m):
        return dtx.render_class_set(self.shifted_spec, m, seed=self.seed * 1000 + 4)

    @cached_property
    def downstream_train(self):
        return dtx.render_class_set(self.shifted_spec,
                                    self.cfg["pretrain"]["downstream_train_per_class"],
                                    seed=self.seed * 1000 + 5)

    # -- encoders ----------------------------------------------------------

    @cached_property
    def vocab(self):
        return dtx.world_vocabulary([self.broad_spec])

    @cached_property
    def encoders(self):
        ecfg = self.cfg["encoder"]
        rng = self._rng("encoder-init")
        g = de.ImageEncoder(self.source_spec.image_shape, ecfg["dim"], rng)
        h = de.TextEncoder(self.vocab, ecfg["dim"], rng)
        corpus = dtx.build_caption_corpus(self.broad_spec, ecfg["corpus_size"],
                                          seed=self.seed * 1000 + 6)
        de.infonce_pretrain(g, h, corpus, de.InfoNceConfig(
            epochs=ecfg["epochs"], batch_size=ecfg["batch_size"], lr=ecfg["lr"],
            weight_decay=ecfg["weight_decay"]), self._rng("encoder-train"))
        return g, h

    @property
    def image_encoder(self):
        return self.encoders[0]

    @property
    def text_encoder(self):
        return self.encoders[1]

    @cached_property
    def zsc(self):
        return de.build_zeroshot_classifier(self.text_encoder, self.class_names)

    def fresh_image_encoder(self, tag="fresh"):
        return de.ImageEncoder(self.source_spec.image_shape, self.cfg["encoder"]["dim"],
                               self._rng("fresh-encoder-" + tag))

    # -- diffusion ---------------------------------------------------------

    @cached_property
    def schedule(self):
        return dm.build_schedule(self.cfg["diffusion"]["T"])

    @cached_property
    def eps_model(self):
        dcfg = self.cfg["diffusion"]
        model = dm.EpsModel(self.source_spec.image_shape, self.k,
                            self._rng("diffusion-init"), hidden=dcfg["hidden"])
        # diffusion works in a [-1, 1] latent space; images live in [0, 1]
        dm.train_eps_model(model, self.train_real.images() * 2.0 - 1.0,
                           self.train_real.labels(), self.schedule,
                           dm.DiffusionTrainConfig(
                               steps=dcfg["steps"], batch_size=dcfg["batch_size"],
                               lr=dcfg["lr"],
                               guidance=dm.GuidanceConfig(scale=dcfg["scale"],
                                                          drop_prob=dcfg["drop_prob"])),
                           self._rng("diffusion-train"))
        return model

    # -- synthesis ---------------------------------------------------------

    @cached_property
    def le_prompts(self):
        provider = dtx.TemplateSentenceProvider(seed=self.seed,
                                                decoys=tuple(self.class_names))
        prompts, _ = dtx.enhance_prompts(self.class_names, provider,
                                         self.cfg["synthesis"]["sentences_per_class"])
        return prompts

    def synth(self, strategy, per_class=None, shots=None):
        """Synthesize a dataset: 'B', 'LE', 'LE+CF', 'RG', or 'RG+RF'."""
        scfg = self.cfg["synthesis"]
        s = self.cfg["diffusion"]["scale"]
        if strategy in ("B", "LE", "LE+CF"):
            base = strategy.split("+")[0]
            ds = dtx.synthesize_class_set(
                self.eps_model, self.schedule, self.class_names,
                per_class or scfg["per_class"], base, guidance_scale=s,
                prompts_by_class=self.le_prompts if base == "LE" else None,
                seed=self.seed, batch=scfg["sample_batch"],
                world=dtx.world_hash(self.source_spec),
                image_shape=self.source_spec.image_shape)
            if strategy.endswith("+CF"):
                ds = dtx.clip_filter(ds, self.image_encoder, self.zsc)
            return ds
        if strategy in ("RG", "RG+RF"):
            m = shots if shots is not None else self.cfg["shots"]
            refs = self.fewshot(m)
            by_class = {c: refs.images()[refs.labels() == c] for c in range(self.k)}
            ds = dtx.synthesize_class_set(
                self.eps_model, self.schedule, self.class_names,
                per_class or scfg["per_class_rg"], "RG", guidance_scale=s,
                rg_rho=dm.RG_RHO_BY_SHOT[m], references_by_class=by_class,
                seed=self.seed, batch=scfg["sample_batch"],
                world=dtx.world_hash(self.source_spec),
                image_shape=self.source_spec.image_shape)
            if strategy.endswith("+RF"):
                ds = dtx.real_filter(ds, refs.samples, self.image_encoder)
            return ds
        raise ConfigError(f"unknown synthesis strategy '{strategy}'")

    # -- evaluation helpers ------------------------------------------------

    def zero_shot_report(self, test_ds=None):
        model = tr.TunedClassifier(self.image_encoder, self.zsc)
        return tr.evaluate_top1(model, test_ds or self.test_shifted,
                                config_hash=config_hash(self.cfg))

    def tune_on(self, train_ds, test_ds=None, **kw):
        cfg = tune_config_from(self.cfg, self.seed, **kw)
        state = self.image_encoder.norm_state()
        try:
            return tr.classifier_tune(self.image_encoder, self.zsc, train_ds, cfg,
                                      test_ds=test_ds or self.test_shifted)
        finally:
            self._restore_norm_state(state)

    def _restore_norm_state(self, state):
        g = self.image_encoder
        g.bn1.running_mean, g.bn1.running_var, g.bn2.running_mean, g.bn2.running_var = \
            [s.copy() for s in state]
        g.set_freeze_stats(True)


def aggregate_reports(reports):
    """Mean/stddev over per-seed top-1 accuracies."""
    accs = [r.top1 for r in reports]
    return {
        "per_seed": accs,
        "mean": float(np.mean(accs)),
        "stddev": float(np.std(accs)),
    }
