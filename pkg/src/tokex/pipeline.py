"""End-to-end orchestration: tokenize, train one model per seed, attribute,
evaluate, and emit a single report with figures and CSV exports.

Intermediate artifacts are cached in content-addressed directories keyed by
the hash of everything that determines them (upstream stage keys, stage
configuration, seeds), so re-running after an attribution parameter change
recomputes only attributions and evaluation.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from . import plots
from .attribution import AttributionVector, compute_attribution
from .classifier import (
    ClassifierModel,
    TrainConfig,
    accuracy,
    load_model,
    parameter_hash,
    predict_class,
    save_model,
    train,
)
from .data import (
    label_histogram,
    load_attributions,
    load_dataset,
    load_tokens,
    save_attributions,
    save_tokens,
)
from .evaluation import (
    auc,
    auc_gap,
    deletion_curve,
    invariance_from_attributions,
    macro_f1,
    random_rankings,
    rankings_from_attributions,
    ssa_sweep,
    xai_agreement,
)
from .synth import SyntheticSpec, generate_synthetic
from .tokenizer import TokenizerConfig, TokenSequence, preprocess, tokenize
from .util import config_hash, derive_rng, file_fingerprint, write_atomic

log = logging.getLogger("tokex")

DEFAULT_METHODS = {
    "saliency": {},
    "ig": {"steps": 64},
    "rise": {"n_masks": 4000, "p_keep": 0.5},
    "lime": {"n_samples": 1000},
}

CACHE_ENV_VAR = "TOKEX_CACHE_DIR"


@dataclass
class PipelineConfig:
    data: dict
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: list[int] = field(default_factory=lambda: [11, 12, 13, 14, 15])
    master_seed: int = 1234
    methods: dict = field(default_factory=lambda: {k: dict(v) for k, v in
                                                   DEFAULT_METHODS.items()})
    ssa_lengths: list[int] = field(default_factory=lambda: [1, 2, 3])
    ssa_use_abs: bool = False
    rnd_deletion_draws: int = 5
    cs_normalize: str = "none"
    invariance_max_instances: int | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seed list must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if not self.ssa_lengths:
            raise ValueError("ssa_lengths must be non-empty")
        if self.rnd_deletion_draws < 1:
            raise ValueError("rnd_deletion_draws must be >= 1")
        for name in self.methods:
            if name not in ("saliency", "ig", "rise", "lime"):
                raise ValueError(f"unknown attribution method {name!r}")
        keys = [k for k in ("synthetic", "series", "tokens") if k in self.data]
        if len(keys) != 1:
            raise ValueError(
                "data section must contain exactly one of synthetic/series/tokens"
            )

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        known = {"data", "tokenizer", "train", "seeds", "master_seed",
                 "methods", "ssa_lengths", "ssa_use_abs",
                 "rnd_deletion_draws", "cs_normalize",
                 "invariance_max_instances"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "data" not in raw:
            raise ValueError("config needs a data section")
        kwargs = dict(raw)
        if "tokenizer" in kwargs:
            kwargs["tokenizer"] = TokenizerConfig(**kwargs["tokenizer"])
        if "train" in kwargs:
            kwargs["train"] = TrainConfig(**kwargs["train"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "data": self.data,
            "tokenizer": {
                "patch_length": self.tokenizer.patch_length,
                "alphabet_size": self.tokenizer.alphabet_size,
                "channels": self.tokenizer.channels,
                "pad_policy": self.tokenizer.pad_policy,
            },
            "train": {
                "p_unk": self.train.p_unk, "epochs": self.train.epochs,
                "batch_size": self.train.batch_size,
                "learning_rate": self.train.learning_rate,
                "beta1": self.train.beta1, "beta2": self.train.beta2,
                "embed_dim": self.train.embed_dim,
                "hidden_sizes": list(self.train.hidden_sizes),
                "class_weighted": self.train.class_weighted,
            },
            "seeds": list(self.seeds),
            "master_seed": self.master_seed,
            "methods": {k: dict(v) for k, v in self.methods.items()},
            "ssa_lengths": list(self.ssa_lengths),
            "ssa_use_abs": self.ssa_use_abs,
            "rnd_deletion_draws": self.rnd_deletion_draws,
            "cs_normalize": self.cs_normalize,
            "invariance_max_instances": self.invariance_max_instances,
        }

    def hash(self) -> str:
        return config_hash(self.to_dict())


def load_config(path: str) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return PipelineConfig.from_dict(json.load(fh))


def _ensure_stage(cache_dir: str, stage: str, key: str, builder) -> str:
    """Return the directory of a completed stage, building it atomically
    (write to a temp dir, rename into place) when absent."""
    final = os.path.join(cache_dir, stage, key)
    marker = os.path.join(final, ".complete")
    if os.path.exists(marker):
        return final
    tmp = final + f".tmp-{os.getpid()}"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    builder(tmp)
    with open(os.path.join(tmp, ".complete"), "w", encoding="utf-8") as fh:
        fh.write("ok")
    try:
        os.rename(tmp, final)
    except OSError:
        if os.path.exists(marker):  # a concurrent run won the race
            shutil.rmtree(tmp)
        else:
            raise
    return final


def _target_classes(model: ClassifierModel, sequences: list[TokenSequence],
                    target: str) -> list[int]:
    if target == "pred":
        return [int(c) for c in
                predict_class(model, np.stack([s.tokens for s in sequences]))]
    if target == "true":
        for seq in sequences:
            if seq.label is None:
                raise ValueError(f"sequence {seq.id!r} has no label; cannot "
                                 f"explain the ground-truth class")
        return [seq.label for seq in sequences]
    return [int(target)] * len(sequences)


def explain_dataset(model: ClassifierModel, sequences: list[TokenSequence],
                    method: str, params: dict, master_seed: int,
                    target: str = "pred") -> list[AttributionVector]:
    """Attribute every sequence for its target class ("pred", "true", or an
    explicit index). Randomness is keyed by (master seed, method, instance
    id) and deliberately not by the model or the target, so seed-variant
    models of one run see identical masks and samples."""
    classes = _target_classes(model, sequences, target)
    out = []
    for seq, cls in zip(sequences, classes):
        rng = derive_rng(master_seed, "attr", method, seq.id)
        out.append(compute_attribution(model, seq, method, cls, params, rng))
    return out


def _stats(values) -> dict:
    arr = np.asarray(list(values), dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()),
            "per_seed": [float(v) for v in arr]}


def _resolve_data(config: PipelineConfig):
    """Produce token splits plus corpus metadata from whichever data source
    the config names."""
    info = {"fingerprints": {}}
    if "synthetic" in config.data:
        spec = SyntheticSpec(**config.data["synthetic"])
        rng = derive_rng(config.master_seed, "synth")
        series_splits = dict(zip(("train", "val", "test"),
                                 generate_synthetic(spec, rng)))
        fingerprint = config_hash({"synthetic": spec.to_dict(),
                                   "master_seed": config.master_seed})
        info["fingerprints"] = {name: fingerprint for name in series_splits}
        info["n_classes"] = spec.n_classes
        return series_splits, None, info
    if "series" in config.data:
        section = config.data["series"]
        fmt = section.get("format", "auto")
        series_splits = {}
        for name in ("train", "val", "test"):
            if name not in section:
                if name == "val":
                    continue
                raise ValueError(f"data.series needs a {name!r} path")
            path = section[name]
            if not os.path.exists(path):
                raise ValueError(f"data.series.{name}: no such file {path!r}")
            pad_raw = config.tokenizer.pad_policy == "repeat-last"
            series_splits[name] = load_dataset(path, fmt=fmt, pad_to_max=pad_raw)
            info["fingerprints"][name] = file_fingerprint(path)
        labels = [s.label for split in series_splits.values() for s in split]
        if any(lab is None for lab in labels):
            raise ValueError("pipeline corpora must be fully labeled")
        info["n_classes"] = max(labels) + 1
        return series_splits, None, info
    section = config.data["tokens"]
    if "vocab_size" not in section:
        raise ValueError("data.tokens needs the declared vocab_size")
    vocab_size = int(section["vocab_size"])
    token_splits = {}
    for name in ("train", "val", "test"):
        if name not in section:
            if name == "val":
                continue
            raise ValueError(f"data.tokens needs a {name!r} path")
        path = section[name]
        if not os.path.exists(path):
            raise ValueError(f"data.tokens.{name}: no such file {path!r}")
        token_splits[name] = load_tokens(path, vocab_size)
        info["fingerprints"][name] = file_fingerprint(path)
    lengths = {len(seq) for split in token_splits.values() for seq in split}
    if len(lengths) != 1:
        raise ValueError(f"token splits disagree on sequence length: {sorted(lengths)}")
    labels = [seq.label for split in token_splits.values() for seq in split]
    if any(lab is None for lab in labels):
        raise ValueError("pipeline corpora must be fully labeled")
    info["n_classes"] = int(section.get("n_classes", max(labels) + 1))
    info["vocab_size"] = vocab_size
    return None, token_splits, info


def _tokenize_stage(config, series_splits, info, cache_dir):
    cfg = config.tokenizer
    key = config_hash({"stage": "tokens", "tokenizer": config.to_dict()["tokenizer"],
                       "fingerprints": info["fingerprints"]})
    target = max(s.length for split in series_splits.values() for s in split)

    def build(directory):
        for name, split in series_splits.items():
            sequences = [tokenize(preprocess(s, cfg, target), cfg) for s in split]
            save_tokens(sequences, os.path.join(directory, f"{name}.ndjson"))

    stage_dir = _ensure_stage(cache_dir, "tokens", key, build)
    token_splits = {
        name: load_tokens(os.path.join(stage_dir, f"{name}.ndjson"), cfg.vocab_size)
        for name in series_splits
    }
    return token_splits, key


def _model_stage(config, tokens_key, token_splits, vocab_size, n_classes,
                 seed, cache_dir):
    train_dict = dict(config.to_dict()["train"])
    key = config_hash({"stage": "model", "tokens": tokens_key,
                       "train": train_dict, "seed": seed,
                       "vocab_size": vocab_size, "n_classes": n_classes})

    def build(directory):
        cfg = TrainConfig(**{**train_dict,
                             "hidden_sizes": tuple(train_dict["hidden_sizes"]),
                             "seed": seed})
        result = train(token_splits["train"], vocab_size, n_classes, cfg)
        model = result.model
        model.config_hash = key
        meta = {
            "seed": seed,
            "epoch_losses": result.epoch_losses,
            "parameter_hash": parameter_hash(model),
            "test_accuracy": accuracy(model, token_splits["test"]),
            "test_macro_f1": macro_f1(
                np.array([s.label for s in token_splits["test"]]),
                predict_class(model, np.stack([s.tokens for s in token_splits["test"]])),
                n_classes),
        }
        if "val" in token_splits:
            meta["val_accuracy"] = accuracy(model, token_splits["val"])
        save_model(model, os.path.join(directory, "model.json"))
        write_atomic(os.path.join(directory, "meta.json"),
                     json.dumps(meta, sort_keys=True))

    stage_dir = _ensure_stage(cache_dir, "models", key, build)
    model = load_model(os.path.join(stage_dir, "model.json"))
    if model.config_hash != key:
        raise ValueError(f"cached model provenance mismatch under {stage_dir}")
    with open(os.path.join(stage_dir, "meta.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    return model, meta, key


def _attribution_stage(config, model, model_key, token_splits, method,
                       cache_dir):
    """Attributions for both target policies in one stage. Instances whose
    predicted class equals their label share the attribution (same class,
    same instance-keyed rng), so only disagreements cost a second pass."""
    params = dict(config.methods[method])
    key = config_hash({"stage": "attributions", "model": model_key,
                       "method": method, "params": params,
                       "master_seed": config.master_seed})
    test = token_splits["test"]

    def build(directory):
        pred_classes = _target_classes(model, test, "pred")
        true_classes = _target_classes(model, test, "true")
        attrs_pred = explain_dataset(model, test, method, params,
                                     config.master_seed, target="pred")
        attrs_true = []
        for seq, attr, pred_cls, true_cls in zip(test, attrs_pred,
                                                 pred_classes, true_classes):
            if pred_cls == true_cls:
                attrs_true.append(attr)
            else:
                rng = derive_rng(config.master_seed, "attr", method, seq.id)
                attrs_true.append(compute_attribution(model, seq, method,
                                                      true_cls, params, rng))
        save_attributions(attrs_pred, os.path.join(directory, "pred.ndjson"))
        save_attributions(attrs_true, os.path.join(directory, "true.ndjson"))

    stage_dir = _ensure_stage(cache_dir, "attributions", key, build)
    return (load_attributions(os.path.join(stage_dir, "pred.ndjson")),
            load_attributions(os.path.join(stage_dir, "true.ndjson")))


def _perturbation_section(config, models_by_seed, token_splits, attrs_pred):
    test = token_splits["test"]
    seq_len = len(test[0])
    auc_rnd_per_seed = []
    rnd_curves = {}
    method_aucs = {m: [] for m in config.methods}
    method_curves = {m: {} for m in config.methods}
    for seed, model in models_by_seed.items():
        draws = []
        curves = []
        for draw in range(config.rnd_deletion_draws):
            rng = derive_rng(config.master_seed, "rnd-del", seed, draw)
            curve = deletion_curve(model, test,
                                   random_rankings(len(test), seq_len, rng),
                                   source="random")
            draws.append(auc(curve))
            curves.append(curve.f1_scores)
        auc_rnd_per_seed.append(float(np.mean(draws)))
        rnd_curves[seed] = np.mean(curves, axis=0)
        for method in config.methods:
            rankings = rankings_from_attributions(attrs_pred[seed][method], test)
            curve = deletion_curve(model, test, rankings, source=method)
            method_aucs[method].append(auc(curve))
            method_curves[method][seed] = curve.f1_scores
    section = {
        "n_rnd_draws": config.rnd_deletion_draws,
        "auc_rnd": _stats(auc_rnd_per_seed),
        "methods": {
            m: {
                "auc": _stats(method_aucs[m]),
                "auc_gap": _stats([auc_gap(r, x) for r, x in
                                   zip(auc_rnd_per_seed, method_aucs[m])]),
            }
            for m in config.methods
        },
    }
    return section, rnd_curves, method_curves


def _invariance_section(config, attrs_pred):
    if len(config.seeds) < 2:
        return None
    cap = config.invariance_max_instances
    section = {}
    for method in config.methods:
        per_model = [attrs_pred[seed][method][:cap] if cap else
                     attrs_pred[seed][method] for seed in config.seeds]
        result = invariance_from_attributions(per_model,
                                              normalize=config.cs_normalize)
        section[method] = {
            "mean": result.mean, "std": result.std,
            "n_model_pairs": result.n_model_pairs,
            "n_comparisons": result.n_comparisons,
            "n_skipped": result.n_skipped,
        }
    return section


def _agreement_section(config, attrs_pred):
    if len(config.methods) < 2:
        return None
    matrices = []
    summaries = []
    methods = list(config.methods)
    skipped = 0
    for seed in config.seeds:
        agreement = xai_agreement({m: attrs_pred[seed][m] for m in methods},
                                  normalize=config.cs_normalize)
        matrices.append(agreement.matrix)
        summaries.append(agreement.summary)
        skipped += agreement.n_skipped
    stack = np.stack(matrices)
    return {
        "methods": methods,
        "matrix_mean": stack.mean(axis=0).tolist(),
        "matrix_std": stack.std(axis=0).tolist(),
        "summary": _stats(summaries),
        "n_skipped": skipped,
    }


def _ssa_section(config, token_splits, attrs_true, n_classes):
    lengths = list(config.ssa_lengths)
    per_method_runs = {}
    for seed in config.seeds:
        rnd_rng = derive_rng(config.master_seed, "ssa-rnd")
        sweeps = ssa_sweep(token_splits["train"], token_splits["test"],
                           {m: attrs_true[seed][m] for m in config.methods},
                           lengths, n_classes, rnd_rng=rnd_rng,
                           use_abs=config.ssa_use_abs)
        for method, by_length in sweeps.items():
            per_method_runs.setdefault(method, []).append(by_length)
    section = {"lengths": lengths, "use_abs": config.ssa_use_abs, "methods": {}}
    for method, runs in per_method_runs.items():
        entry = {}
        for length in lengths:
            results = [run[length] for run in runs]
            defined = [r.mean_ssa for r in results if r.mean_ssa is not None]
            per_class = {}
            for c in range(n_classes):
                vals = [r.per_class[c].ssa for r in results
                        if r.per_class[c].ssa is not None]
                per_class[str(c)] = (_stats(vals) if vals else None)
            entry[str(length)] = {
                "mean_ssa": _stats(defined) if defined else None,
                "mean_neighbors": _stats([r.mean_neighbors for r in results]),
                "per_class": per_class,
                "undefined_classes": max(r.n_undefined_classes for r in results),
            }
        section["methods"][method] = entry
    return section


def _write_deletion_csv(path, config, rnd_curves, method_curves):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["method", "seed", "k", "macro_f1"])
    for seed in config.seeds:
        for k, f1 in enumerate(rnd_curves[seed]):
            writer.writerow(["random", seed, k, repr(float(f1))])
        for method in config.methods:
            for k, f1 in enumerate(method_curves[method][seed]):
                writer.writerow([method, seed, k, repr(float(f1))])
    write_atomic(path, buf.getvalue())


def _write_ssa_csv(path, ssa_section):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["method", "length", "mean_ssa", "ssa_std",
                     "mean_neighbors"])
    for method, entry in ssa_section["methods"].items():
        for length in ssa_section["lengths"]:
            cell = entry[str(length)]
            mean_ssa = cell["mean_ssa"]
            writer.writerow([
                method, length,
                "" if mean_ssa is None else repr(mean_ssa["mean"]),
                "" if mean_ssa is None else repr(mean_ssa["std"]),
                repr(cell["mean_neighbors"]["mean"]),
            ])
    write_atomic(path, buf.getvalue())


def run_pipeline(config: PipelineConfig, out_dir: str,
                 cache_dir: str | None = None) -> dict:
    """Execute every stage, write report.json, CSV exports, and figures into
    out_dir, and return the report. Deterministic: identical configs produce
    byte-identical reports."""
    if cache_dir is None:
        cache_dir = os.environ.get(CACHE_ENV_VAR) or os.path.join(out_dir, "cache")
    os.makedirs(out_dir, exist_ok=True)
    cfg_hash = config.hash()

    series_splits, token_splits, info = _resolve_data(config)
    if token_splits is None:
        log.info("tokenizing %d series splits", len(series_splits))
        token_splits, tokens_key = _tokenize_stage(config, series_splits, info,
                                                   cache_dir)
        vocab_size = config.tokenizer.vocab_size
    else:
        vocab_size = info["vocab_size"]
        tokens_key = config_hash({"stage": "tokens-external",
                                  "fingerprints": info["fingerprints"]})
    n_classes = info["n_classes"]
    seq_len = len(token_splits["train"][0])

    models_by_seed = {}
    meta_by_seed = {}
    for seed in config.seeds:
        log.info("training model for seed %d", seed)
        model, meta, model_key = _model_stage(config, tokens_key, token_splits,
                                              vocab_size, n_classes, seed,
                                              cache_dir)
        meta["model_key"] = model_key
        models_by_seed[seed] = model
        meta_by_seed[seed] = meta

    attrs_pred = {seed: {} for seed in config.seeds}
    attrs_true = {seed: {} for seed in config.seeds}
    for seed in config.seeds:
        for method in config.methods:
            log.info("attributing seed %d method %s", seed, method)
            pred, true = _attribution_stage(
                config, models_by_seed[seed], meta_by_seed[seed]["model_key"],
                token_splits, method, cache_dir)
            attrs_pred[seed][method] = pred
            attrs_true[seed][method] = true

    log.info("evaluating")
    perturbation, rnd_curves, method_curves = _perturbation_section(
        config, models_by_seed, token_splits, attrs_pred)
    invariance = _invariance_section(config, attrs_pred)
    agreement = _agreement_section(config, attrs_pred)
    ssa_part = _ssa_section(config, token_splits, attrs_true, n_classes)

    report = {
        "schema_version": 1,
        "config_hash": cfg_hash,
        "config": config.to_dict(),
        "corpus": {
            "fingerprints": info["fingerprints"],
            "vocab_size": vocab_size,
            "seq_len": seq_len,
            "n_classes": n_classes,
            "sizes": {name: len(split) for name, split in token_splits.items()},
            "label_histogram": {
                name: {str(k): v for k, v in label_histogram(split).items()}
                for name, split in token_splits.items()
            },
        },
        "seeds": list(config.seeds),
        "master_seed": config.master_seed,
        "classifier": {str(seed): meta_by_seed[seed] for seed in config.seeds},
        "perturbation": perturbation,
        "invariance": invariance,
        "agreement": agreement,
        "ssa": ssa_part,
    }

    write_atomic(os.path.join(out_dir, "report.json"),
                 json.dumps(report, sort_keys=True, indent=2) + "\n")
    _write_deletion_csv(os.path.join(out_dir, "deletion_curves.csv"),
                        config, rnd_curves, method_curves)
    _write_ssa_csv(os.path.join(out_dir, "ssa_sweep.csv"), ssa_part)

    figures_dir = os.path.join(out_dir, "figures")
    mean_curves = {"random": np.mean([rnd_curves[s] for s in config.seeds], axis=0)}
    for method in config.methods:
        mean_curves[method] = np.mean([method_curves[method][s]
                                       for s in config.seeds], axis=0)
    plots.plot_deletion_curves(mean_curves,
                               os.path.join(figures_dir, "deletion_curves.png"))
    plots.plot_ssa_sweep(ssa_part, os.path.join(figures_dir, "ssa_sweep.png"))
    if invariance is not None:
        plots.plot_invariance(invariance,
                              os.path.join(figures_dir, "invariance.png"))
    if agreement is not None:
        plots.plot_agreement(agreement["methods"],
                             np.asarray(agreement["matrix_mean"]),
                             os.path.join(figures_dir, "agreement.png"))
    log.info("report written to %s", os.path.join(out_dir, "report.json"))
    return report
