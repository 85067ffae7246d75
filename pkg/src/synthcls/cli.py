"""Command-line driver: staged pipeline commands with persisted, hash-chained
artifacts under an output directory.

Exit codes: 0 success, 2 configuration error, 3 missing/stale dependency,
4 numeric failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import glob as globmod
import json
import logging
import os
import sys

import numpy as np

from . import dataengine as dtx
from . import diffusion as dm
from . import dualencoder as de
from . import nn, trainer as tr
from .numcore import NumericError, Parameter
from .pipeline import (ConfigError, Experiment, aggregate_reports, apply_override,
                       config_hash, load_config, make_config, tune_config_from)

log = logging.getLogger("synthcls")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_NUMERIC = 4

SENTENCE_URL_ENV = "SYNTHCLS_SENTENCE_URL"


class DependencyError(RuntimeError):
    """A required upstream artifact is missing, corrupt, or stale."""


# -- artifact bookkeeping ---------------------------------------------------

def _artifact_dir(out, role, seed):
    return os.path.join(out, f"{role}-s{seed}")


def _write_meta(path, role, seed, cfg, content_hash, upstream=None, extra=None):
    meta = {
        "role": role,
        "seed": seed,
        "config_hash": config_hash(cfg),
        "content_hash": content_hash,
        "upstream": upstream or {},
        "extra": extra or {},
    }
    tmp = os.path.join(path, "meta.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
    os.replace(tmp, os.path.join(path, "meta.json"))
    return meta


def _read_meta(out, role, seed):
    path = os.path.join(_artifact_dir(out, role, seed), "meta.json")
    if not os.path.exists(path):
        raise DependencyError(f"missing artifact '{role}' for seed {seed}; "
                              f"expected {path}")
    with open(path) as fh:
        return json.load(fh)


def _require(out, role, seed, cfg):
    """Return the artifact dir after verifying it was produced under the
    current configuration."""
    meta = _read_meta(out, role, seed)
    want = config_hash(cfg)
    if meta["config_hash"] != want:
        raise DependencyError(
            f"artifact '{role}' (seed {seed}) is stale: built under config "
            f"{meta['config_hash'][:12]}, current config is {want[:12]}")
    return _artifact_dir(out, role, seed), meta


def _save_dataset_artifact(ds, out, role, seed, cfg, upstream=None):
    path = _artifact_dir(out, role, seed)
    dtx.save_dataset(ds, path)
    _write_meta(path, role, seed, cfg, ds.manifest_hash(), upstream)
    return path


def _load_dataset_artifact(out, role, seed, cfg):
    path, meta = _require(out, role, seed, cfg)
    try:
        ds = dtx.load_dataset(path)
    except (OSError, dtx.DatasetFormatError) as err:
        raise DependencyError(f"artifact '{role}' (seed {seed}) unreadable: {err}") from err
    if ds.manifest_hash() != meta["content_hash"]:
        raise DependencyError(f"artifact '{role}' (seed {seed}) content hash mismatch")
    return ds, meta


def _save_report(out, name, payload):
    os.makedirs(os.path.join(out, "reports"), exist_ok=True)
    path = os.path.join(out, "reports", name + ".json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
    os.replace(tmp, path)
    return path


class _Head(nn.Module):
    """Checkpoint wrapper for a tuned classifier's linear head."""

    def __init__(self, W):
        self.W = Parameter(np.asarray(W, dtype=np.float32), name="head.W")


def _load_image_encoder(out, seed, cfg):
    path, meta = _require(out, "encoder", seed, cfg)
    m = meta["extra"]
    g = de.ImageEncoder(tuple(m["image_shape"]), m["d"], np.random.default_rng(0))
    try:
        tr.load_checkpoint(g, path)
    except (OSError, KeyError, ValueError) as err:
        raise DependencyError(f"encoder checkpoint (seed {seed}) unreadable: {err}") from err
    return g, meta


def _load_zeroshot(out, seed, cfg):
    path, meta = _require(out, "text-encoder", seed, cfg)
    m = meta["extra"]
    h = de.TextEncoder(de.Vocab(m["vocab"]), m["d"], np.random.default_rng(0))
    try:
        tr.load_checkpoint(h, path)
    except (OSError, KeyError, ValueError) as err:
        raise DependencyError(f"text-encoder checkpoint (seed {seed}) unreadable: {err}") from err
    return de.build_zeroshot_classifier(h, m["class_names"]), meta


def _save_module_artifact(module, out, role, seed, cfg, extra, upstream=None):
    path = _artifact_dir(out, role, seed)
    blob_hash = tr.save_checkpoint(module, path, meta=extra)
    _write_meta(path, role, seed, cfg, blob_hash, upstream, extra=extra)
    return path


def _strategy_name(cfg):
    if cfg["strategies"]["rg"]:
        base = "RG"
    elif cfg["strategies"]["le"]:
        base = "LE"
    else:
        base = "B"
    return base


def _filtered_name(cfg):
    name = _strategy_name(cfg)
    if cfg["strategies"]["cf"]:
        name += "+CF"
    if cfg["strategies"]["rf"]:
        name += "+RF"
    return name


# -- commands ---------------------------------------------------------------

def cmd_world(cfg, seed, out):
    exp = Experiment(cfg, seed)
    hashes = {}
    for role, ds in (("train-real", exp.train_real),
                     ("test-source", exp.test_source),
                     ("test-shifted", exp.test_shifted),
                     ("downstream-train", exp.downstream_train)):
        _save_dataset_artifact(ds, out, role, seed, cfg)
        hashes[role] = ds.manifest_hash()
    if cfg["shots"] > 0:
        ds = exp.fewshot(cfg["shots"])
        _save_dataset_artifact(ds, out, "fewshot", seed, cfg)
        hashes["fewshot"] = ds.manifest_hash()
    return {"datasets": hashes, "world": dtx.world_hash(exp.source_spec)}


def cmd_pretrain_encoder(cfg, seed, out):
    exp = Experiment(cfg, seed)
    up = {"train-real": _require(out, "train-real", seed, cfg)[1]["content_hash"]}
    g, h = exp.encoders
    _save_module_artifact(g, out, "encoder", seed, cfg, upstream=up, extra={
        "image_shape": list(exp.source_spec.image_shape), "d": g.d})
    _save_module_artifact(h, out, "text-encoder", seed, cfg, upstream=up, extra={
        "vocab": exp.vocab.words, "d": h.d, "class_names": exp.class_names})
    zs = exp.zero_shot_report()
    return {"zero_shot_top1": zs.top1, "encoder_checksum": g.checksum()}


def cmd_train_diffusion(cfg, seed, out):
    train_ds, meta = _load_dataset_artifact(out, "train-real", seed, cfg)
    dcfg = cfg["diffusion"]
    exp = Experiment(cfg, seed)
    model = dm.EpsModel(exp.source_spec.image_shape, exp.k,
                        exp._rng("diffusion-init"), hidden=dcfg["hidden"])
    sched = dm.build_schedule(dcfg["T"])
    history = dm.train_eps_model(
        model, train_ds.images() * 2.0 - 1.0, train_ds.labels(), sched,
        dm.DiffusionTrainConfig(steps=dcfg["steps"], batch_size=dcfg["batch_size"],
                                lr=dcfg["lr"],
                                guidance=dm.GuidanceConfig(scale=dcfg["scale"],
                                                           drop_prob=dcfg["drop_prob"])),
        exp._rng("diffusion-train"))
    _save_module_artifact(model, out, "diffusion", seed, cfg,
                          upstream={"train-real": meta["content_hash"]},
                          extra={"image_shape": list(exp.source_spec.image_shape),
                                 "k": exp.k, "hidden": dcfg["hidden"]})
    return {"final_loss": float(np.mean(history[-50:])), "steps": len(history)}


def _load_diffusion(out, seed, cfg):
    path, meta = _require(out, "diffusion", seed, cfg)
    m = meta["extra"]
    model = dm.EpsModel(tuple(m["image_shape"]), m["k"], np.random.default_rng(0),
                        hidden=m["hidden"])
    try:
        tr.load_checkpoint(model, path)
    except (OSError, KeyError, ValueError) as err:
        raise DependencyError(f"diffusion checkpoint (seed {seed}) unreadable: {err}") from err
    return model, meta


def _le_prompts(cfg, seed, class_names):
    template = dtx.TemplateSentenceProvider(seed=seed, decoys=tuple(class_names))
    url = os.environ.get(SENTENCE_URL_ENV)
    provider = dtx.HttpSentenceProvider(url, fallback=template) if url else template
    prompts, errors = dtx.enhance_prompts(class_names, provider,
                                          cfg["synthesis"]["sentences_per_class"])
    for name, err in errors.items():
        log.warning("prompt enhancement for %r: %s", name, err)
    empty = [n for n, p in prompts.items() if not p]
    if empty:
        raise DependencyError(f"no usable prompts for classes {empty}")
    return prompts


def cmd_synth(cfg, seed, out):
    model, dmeta = _load_diffusion(out, seed, cfg)
    exp = Experiment(cfg, seed)
    strategy = _strategy_name(cfg)
    scfg = cfg["synthesis"]
    upstream = {"diffusion": dmeta["content_hash"]}
    kw = dict(guidance_scale=cfg["diffusion"]["scale"], seed=seed,
              batch=scfg["sample_batch"], world=dtx.world_hash(exp.source_spec),
              image_shape=exp.source_spec.image_shape)
    if strategy == "RG":
        refs, rmeta = _load_dataset_artifact(out, "fewshot", seed, cfg)
        upstream["fewshot"] = rmeta["content_hash"]
        by_class = {c: refs.images()[refs.labels() == c] for c in range(exp.k)}
        ds = dtx.synthesize_class_set(model, exp.schedule, exp.class_names,
                                      scfg["per_class_rg"], "RG",
                                      rg_rho=dm.RG_RHO_BY_SHOT[cfg["shots"]],
                                      references_by_class=by_class, **kw)
    elif strategy == "LE":
        prompts = _le_prompts(cfg, seed, exp.class_names)
        ds = dtx.synthesize_class_set(model, exp.schedule, exp.class_names,
                                      scfg["per_class"], "LE",
                                      prompts_by_class=prompts, **kw)
    else:
        ds = dtx.synthesize_class_set(model, exp.schedule, exp.class_names,
                                      scfg["per_class"], "B", **kw)
    _save_dataset_artifact(ds, out, "synth", seed, cfg, upstream=upstream)
    return {"strategy": strategy, "count": len(ds), "hash": ds.manifest_hash()}


def cmd_filter(cfg, seed, out):
    if not (cfg["strategies"]["cf"] or cfg["strategies"]["rf"]):
        raise ConfigError("filter: neither strategies.cf nor strategies.rf is enabled")
    ds, smeta = _load_dataset_artifact(out, "synth", seed, cfg)
    upstream = {"synth": smeta["content_hash"]}
    before = len(ds)
    if cfg["strategies"]["cf"]:
        g, gmeta = _load_image_encoder(out, seed, cfg)
        zsc, zmeta = _load_zeroshot(out, seed, cfg)
        upstream["encoder"] = gmeta["content_hash"]
        upstream["text-encoder"] = zmeta["content_hash"]
        ds = dtx.clip_filter(ds, g, zsc)
    if cfg["strategies"]["rf"]:
        g, gmeta = _load_image_encoder(out, seed, cfg)
        refs, rmeta = _load_dataset_artifact(out, "fewshot", seed, cfg)
        upstream["encoder"] = gmeta["content_hash"]
        upstream["fewshot"] = rmeta["content_hash"]
        ds = dtx.real_filter(ds, refs.samples, g)
    _save_dataset_artifact(ds, out, "synth-filtered", seed, cfg, upstream=upstream)
    return {"kept": len(ds), "dropped": before - len(ds), "hash": ds.manifest_hash()}


def _tuning_inputs(cfg, seed, out):
    role = "synth-filtered" if (cfg["strategies"]["cf"] or cfg["strategies"]["rf"]) \
        else "synth"
    syn, smeta = _load_dataset_artifact(out, role, seed, cfg)
    test, tmeta = _load_dataset_artifact(out, "test-shifted", seed, cfg)
    g, gmeta = _load_image_encoder(out, seed, cfg)
    zsc, zmeta = _load_zeroshot(out, seed, cfg)
    upstream = {role: smeta["content_hash"], "test-shifted": tmeta["content_hash"],
                "encoder": gmeta["content_hash"], "text-encoder": zmeta["content_hash"]}
    return syn, test, g, zsc, upstream


def cmd_tune(cfg, seed, out):
    syn, test, g, zsc, upstream = _tuning_inputs(cfg, seed, out)
    loss = "sce" if cfg["strategies"]["sce"] else cfg["tune"]["loss"]
    tcfg = tune_config_from(cfg, seed, loss=loss)
    if cfg["shots"] > 0:
        real, rmeta = _load_dataset_artifact(out, "fewshot", seed, cfg)
        upstream["fewshot"] = rmeta["content_hash"]
        if tcfg.plan == "mix":
            model, report = tr.mix_train(g, zsc, real, syn, tcfg, test_ds=test)
        else:
            model, report = tr.phase_train(g, zsc, real, syn, tcfg, test_ds=test)
    else:
        model, report = tr.classifier_tune(g, zsc, syn, tcfg, test_ds=test)
    _save_module_artifact(_Head(model.W.data), out, "tuned-head", seed, cfg,
                          upstream=upstream,
                          extra={"class_names": model.class_names})
    return {"top1": report.top1, "per_class": report.per_class, "loss": loss,
            "plan": tcfg.plan, "count": report.count}


def cmd_pretrain(cfg, seed, out):
    role = "synth-filtered" if (cfg["strategies"]["cf"] or cfg["strategies"]["rf"]) \
        else "synth"
    syn, smeta = _load_dataset_artifact(out, role, seed, cfg)
    exp = Experiment(cfg, seed)
    pcfg = cfg["pretrain"]
    per_class = pcfg["per_class"]
    if per_class:
        rng = np.random.default_rng(seed)
        idx = []
        labels = syn.labels()
        for c in range(exp.k):
            cand = np.flatnonzero(labels == c)
            idx.extend(rng.choice(cand, size=min(per_class, len(cand)), replace=False))
        syn = syn.subset(sorted(int(i) for i in idx))
    encoder = exp.fresh_image_encoder("pretrain")
    _, history = tr.supervised_pretrain(
        encoder, syn, tr.PretrainConfig(epochs=pcfg["epochs"],
                                        batch_size=pcfg["batch_size"], lr=pcfg["lr"],
                                        weight_decay=pcfg["weight_decay"], seed=seed))
    _save_module_artifact(encoder, out, "pretrained", seed, cfg,
                          upstream={role: smeta["content_hash"]},
                          extra={"image_shape": list(exp.source_spec.image_shape),
                                 "d": encoder.d})
    return {"loss_history": history}


def cmd_transfer(cfg, seed, out):
    train, tmeta = _load_dataset_artifact(out, "downstream-train", seed, cfg)
    test, emeta = _load_dataset_artifact(out, "test-shifted", seed, cfg)
    exp = Experiment(cfg, seed)
    pcfg = cfg["pretrain"]
    fcfg = tr.PretrainConfig(epochs=pcfg["downstream_epochs"],
                             batch_size=pcfg["batch_size"], lr=pcfg["lr"],
                             weight_decay=pcfg["weight_decay"], seed=seed)
    path, pmeta = _require(out, "pretrained", seed, cfg)
    m = pmeta["extra"]
    warm = de.ImageEncoder(tuple(m["image_shape"]), m["d"], np.random.default_rng(0))
    tr.load_checkpoint(warm, path)
    _, warm_report = tr.transfer_finetune(warm, train, test, fcfg,
                                          config_hash=config_hash(cfg))
    cold = exp.fresh_image_encoder("transfer-scratch")
    _, cold_report = tr.transfer_finetune(cold, train, test, fcfg,
                                          config_hash=config_hash(cfg))
    return {"pretrained_top1": warm_report.top1, "scratch_top1": cold_report.top1,
            "upstream": {"pretrained": pmeta["content_hash"],
                         "downstream-train": tmeta["content_hash"],
                         "test-shifted": emeta["content_hash"]}}


def cmd_fid(cfg, seed, out):
    role = "synth-filtered" if (cfg["strategies"]["cf"] or cfg["strategies"]["rf"]) \
        else "synth"
    syn, _ = _load_dataset_artifact(out, role, seed, cfg)
    ref, _ = _load_dataset_artifact(out, "test-shifted", seed, cfg)
    fd = dtx.frechet_distance(
        dtx.fid_stats(dtx.pixel_summary_features(syn.images())),
        dtx.fid_stats(dtx.pixel_summary_features(ref.images())))
    return {"frechet_distance": fd, "strategy": _filtered_name(cfg)}


def cmd_eval(cfg, seed, out):
    test, _ = _load_dataset_artifact(out, "test-shifted", seed, cfg)
    g, _ = _load_image_encoder(out, seed, cfg)
    zsc, _ = _load_zeroshot(out, seed, cfg)
    model = tr.TunedClassifier(g, zsc)
    hpath, hmeta = _require(out, "tuned-head", seed, cfg)
    head = _Head(np.zeros_like(zsc.W))
    tr.load_checkpoint(head, hpath)
    model.W.data = head.W.data.copy()
    report = tr.evaluate_top1(model, test, config_hash=config_hash(cfg))
    return {"top1": report.top1, "per_class": report.per_class, "count": report.count}


PER_SEED_COMMANDS = {
    "world": cmd_world,
    "pretrain-encoder": cmd_pretrain_encoder,
    "train-diffusion": cmd_train_diffusion,
    "synth": cmd_synth,
    "filter": cmd_filter,
    "tune": cmd_tune,
    "pretrain": cmd_pretrain,
    "transfer": cmd_transfer,
    "fid": cmd_fid,
    "eval": cmd_eval,
}


def cmd_report(cfg, out):
    """Aggregate per-seed reports, verify the artifact hash chain, and emit
    JSON + CSV summaries."""
    rows = []
    chain_errors = []
    for path in sorted(globmod.glob(os.path.join(out, "*-s*", "meta.json"))):
        with open(path) as fh:
            meta = json.load(fh)
        for role, want in meta.get("upstream", {}).items():
            try:
                ref = _read_meta(out, role, meta["seed"])
            except DependencyError as err:
                chain_errors.append(str(err))
                continue
            if ref["content_hash"] != want:
                chain_errors.append(
                    f"{meta['role']} (seed {meta['seed']}) expects {role} "
                    f"{want[:12]}, found {ref['content_hash'][:12]}")
    for path in sorted(globmod.glob(os.path.join(out, "reports", "*.json"))):
        name = os.path.splitext(os.path.basename(path))[0]
        if name in ("report", "summary"):
            continue
        with open(path) as fh:
            payload = json.load(fh)
        for seed_str, result in payload.get("seeds", {}).items():
            if isinstance(result, dict) and "top1" in result:
                rows.append({"command": payload.get("command", name),
                             "seed": int(seed_str), "top1": result["top1"]})
    summary = {"config_hash": config_hash(cfg), "chain_errors": chain_errors,
               "results": rows}
    by_cmd = {}
    for row in rows:
        by_cmd.setdefault(row["command"], []).append(row["top1"])
    summary["aggregate"] = {
        cmd: {"mean": float(np.mean(v)), "stddev": float(np.std(v)), "n": len(v)}
        for cmd, v in by_cmd.items()}
    _save_report(out, "summary", summary)
    csv_path = os.path.join(out, "reports", "summary.csv")
    with open(csv_path + ".tmp", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["command", "seed", "top1"])
        writer.writeheader()
        writer.writerows(rows)
    os.replace(csv_path + ".tmp", csv_path)
    if chain_errors:
        raise DependencyError("artifact hash chain broken:\n" + "\n".join(chain_errors))
    return summary


# -- entry point ------------------------------------------------------------

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="synthcls",
        description="synthetic-data-for-recognition pipeline on a toy image world")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(PER_SEED_COMMANDS) + ["report"]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config (defaults if omitted)")
        p.add_argument("--seed", type=int, action="append", default=None,
                       help="seed to run (repeatable; overrides the config list)")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE", help="dot-path config override")
        p.add_argument("--out", default="runs", help="artifact output directory")
        p.add_argument("--jobs", type=int, default=1,
                       help="max parallel worker processes across seeds")
    return parser


def _resolve_config(args):
    cfg = load_config(args.config) if args.config else make_config()
    for assignment in args.override:
        apply_override(cfg, assignment)
    if args.seed:
        cfg["seeds"] = list(args.seed)
    from .pipeline import validate_config
    validate_config(cfg)
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
    return cfg


def _run_one(command, cfg, seed, out):
    return seed, PER_SEED_COMMANDS[command](cfg, seed, out)


def run(argv=None):
    args = _build_parser().parse_args(argv)
    cfg = _resolve_config(args)
    os.makedirs(args.out, exist_ok=True)
    if args.command == "report":
        cmd_report(cfg, args.out)
        return EXIT_OK

    results = {}
    seeds = cfg["seeds"]
    if args.jobs > 1 and len(seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_run_one, args.command, cfg, s, args.out)
                       for s in seeds]
            for fut in futures:
                seed, payload = fut.result()
                results[str(seed)] = payload
    else:
        for seed in seeds:
            _, payload = _run_one(args.command, cfg, seed, args.out)
            results[str(seed)] = payload
    path = _save_report(args.out, args.command, {
        "command": args.command, "config_hash": config_hash(cfg), "seeds": results})
    print(f"{args.command}: {len(seeds)} seed(s) done -> {path}")
    return EXIT_OK


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(argv)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DependencyError, dtx.DatasetFormatError) as err:
        print(f"dependency error: {err}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
