"""Command line interface.

Subcommands mirror the pipeline stages: synth, tokenize, train, explain,
evaluate, ssa, and pipeline. Exit codes: 0 success, 1 validation failure
(bad arguments or malformed inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import plots
from .attribution import METHODS
from .classifier import TrainConfig, accuracy, load_model, save_model, train
from .data import (
    label_histogram,
    load_attributions,
    load_dataset,
    load_tokens,
    save_attributions,
    save_series,
    save_tokens,
)
from .evaluation import (
    auc,
    auc_gap,
    deletion_curve,
    random_rankings,
    rankings_from_attributions,
    ssa_sweep,
    xai_agreement,
)
from .pipeline import PipelineConfig, explain_dataset, run_pipeline
from .synth import SyntheticSpec, generate_synthetic
from .tokenizer import TokenizerConfig, preprocess, tokenize
from .util import derive_rng, write_atomic


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad arguments; the CLI contract reserves 2 for
    runtime failures, so argument errors are remapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(raw: str) -> list[int]:
    return [int(part) for part in raw.split(",") if part != ""]


def _float_list(raw: str) -> list[float]:
    return [float(part) for part in raw.split(",") if part != ""]


def _attr_pairs(values) -> dict[str, str]:
    out = {}
    for item in values or []:
        if "=" not in item:
            raise ValueError(f"--attributions expects method=path, got {item!r}")
        method, path = item.split("=", 1)
        out[method] = path
    if not out:
        raise ValueError("at least one --attributions method=path is required")
    return out


def _cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_instances=args.n, length=args.length, channels=args.channels,
        n_classes=args.classes, motif_start=args.motif_start,
        motif_patches=args.motif_patches, patch_length=args.patch_length,
        noise_std=args.noise_std, motif_amplitude=args.amplitude,
        class_balance=tuple(args.balance) if args.balance else None)
    rng = np.random.default_rng(args.seed)
    splits = dict(zip(("train", "val", "test"), generate_synthetic(spec, rng)))
    os.makedirs(args.out_dir, exist_ok=True)
    for name, split in splits.items():
        path = os.path.join(args.out_dir, f"{name}.ndjson")
        save_series(split, path)
        print(f"{name}: {len(split)} instances, labels {label_histogram(split)} "
              f"-> {path}")
    return 0


def _cmd_tokenize(args) -> int:
    cfg = TokenizerConfig(patch_length=args.patch_length,
                          alphabet_size=args.alphabet_size,
                          channels=args.channels, pad_policy=args.pad_policy)
    pad_raw = cfg.pad_policy == "repeat-last"
    dataset = load_dataset(args.input, fmt=args.format, pad_to_max=pad_raw)
    target = max(s.length for s in dataset)
    sequences = [tokenize(preprocess(s, cfg, target), cfg) for s in dataset]
    save_tokens(sequences, args.out)
    print(f"{len(sequences)} sequences of {len(sequences[0])} tokens "
          f"(vocab {cfg.vocab_size}, UNK id {cfg.unk_id}), labels "
          f"{label_histogram(sequences)} -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    sequences = load_tokens(args.tokens, args.vocab_size)
    cfg = TrainConfig(p_unk=args.p_unk, epochs=args.epochs,
                      batch_size=args.batch_size, learning_rate=args.lr,
                      embed_dim=args.embed_dim,
                      hidden_sizes=tuple(args.hidden),
                      seed=args.seed, class_weighted=args.class_weighted)
    result = train(sequences, args.vocab_size, args.classes, cfg)
    save_model(result.model, args.out)
    if result.epoch_losses:
        print(f"final training loss {result.epoch_losses[-1]:.4f}")
    if args.val:
        val = load_tokens(args.val, args.vocab_size)
        print(f"validation accuracy {accuracy(result.model, val):.4f}")
    if args.curve_out:
        lines = ["epoch,loss"] + [f"{i},{loss!r}" for i, loss in
                                  enumerate(result.epoch_losses)]
        write_atomic(args.curve_out, "\n".join(lines) + "\n")
    print(f"model -> {args.out}")
    return 0


def _cmd_explain(args) -> int:
    model = load_model(args.model)
    sequences = load_tokens(args.tokens, model.vocab_size)
    params = {}
    if args.steps is not None:
        params["steps"] = args.steps
    if args.n_masks is not None:
        params["n_masks"] = args.n_masks
    if args.p_keep is not None:
        params["p_keep"] = args.p_keep
    if args.n_samples is not None:
        params["n_samples"] = args.n_samples
    if args.kernel_width is not None:
        params["kernel_width"] = args.kernel_width
    if args.ridge is not None:
        params["ridge"] = args.ridge
    if args.use_abs:
        params["use_abs"] = True
    if args.normalize_by_pkeep:
        params["normalize_by_pkeep"] = True
    attrs = explain_dataset(model, sequences, args.method, params,
                            args.master_seed, target=args.target)
    save_attributions(attrs, args.out)
    print(f"{len(attrs)} attributions ({args.method}, target {args.target}) "
          f"-> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    model = load_model(args.model)
    test = load_tokens(args.tokens, model.vocab_size)
    seq_len = len(test[0])
    attr_paths = _attr_pairs(args.attributions)
    attrs = {m: load_attributions(p) for m, p in attr_paths.items()}

    rnd_aucs = []
    rnd_curves = []
    for draw in range(args.rnd_draws):
        rng = derive_rng(args.master_seed, "rnd-del", 0, draw)
        curve = deletion_curve(model, test,
                               random_rankings(len(test), seq_len, rng),
                               source="random")
        rnd_aucs.append(auc(curve))
        rnd_curves.append(curve.f1_scores)
    auc_rnd = float(np.mean(rnd_aucs))

    curves = {"random": np.mean(rnd_curves, axis=0)}
    result = {"auc_rnd": auc_rnd, "n_rnd_draws": args.rnd_draws, "methods": {}}
    for method, attr_list in attrs.items():
        curve = deletion_curve(model, test,
                               rankings_from_attributions(attr_list, test),
                               source=method)
        method_auc = auc(curve)
        curves[method] = curve.f1_scores
        result["methods"][method] = {"auc": method_auc,
                                     "auc_gap": auc_gap(auc_rnd, method_auc)}
        print(f"{method}: auc {method_auc:.4f}, gap {auc_gap(auc_rnd, method_auc):.4f}")

    if len(attrs) >= 2:
        agreement = xai_agreement(attrs)
        result["agreement"] = {"methods": agreement.methods,
                               "matrix": agreement.matrix.tolist(),
                               "summary": agreement.summary,
                               "n_skipped": agreement.n_skipped}
        print(f"agreement summary {agreement.summary:.4f}")

    os.makedirs(args.out_dir, exist_ok=True)
    write_atomic(os.path.join(args.out_dir, "evaluation.json"),
                 json.dumps(result, sort_keys=True, indent=2) + "\n")
    lines = ["method,k,macro_f1"]
    for method, values in curves.items():
        lines += [f"{method},{k},{v!r}" for k, v in enumerate(values)]
    write_atomic(os.path.join(args.out_dir, "deletion_curves.csv"),
                 "\n".join(lines) + "\n")
    plots.plot_deletion_curves(
        curves, os.path.join(args.out_dir, "figures", "deletion_curves.png"))
    print(f"evaluation -> {args.out_dir}")
    return 0


def _cmd_ssa(args) -> int:
    train_seqs = load_tokens(args.train_tokens, args.vocab_size)
    test_seqs = load_tokens(args.test_tokens, args.vocab_size)
    labels = [s.label for s in list(train_seqs) + list(test_seqs)]
    if any(lab is None for lab in labels):
        raise ValueError("ssa needs fully labeled corpora")
    n_classes = args.classes or max(labels) + 1
    attrs = {m: load_attributions(p)
             for m, p in _attr_pairs(args.attributions).items()}
    rnd_rng = derive_rng(args.master_seed, "ssa-rnd")
    sweeps = ssa_sweep(train_seqs, test_seqs, attrs, args.lengths, n_classes,
                       rnd_rng=rnd_rng, use_abs=args.use_abs)

    section = {"lengths": args.lengths, "use_abs": args.use_abs, "methods": {}}
    for method, by_length in sweeps.items():
        entry = {}
        for length, res in by_length.items():
            entry[str(length)] = {
                "mean_ssa": (None if res.mean_ssa is None else
                             {"mean": res.mean_ssa, "std": 0.0,
                              "per_seed": [res.mean_ssa]}),
                "mean_neighbors": {"mean": res.mean_neighbors, "std": 0.0,
                                   "per_seed": [res.mean_neighbors]},
                "per_class": {
                    str(c): (None if cs.ssa is None else
                             {"mean": cs.ssa, "std": 0.0, "per_seed": [cs.ssa]})
                    for c, cs in res.per_class.items()
                },
                "undefined_classes": res.n_undefined_classes,
            }
            shown = "undefined" if res.mean_ssa is None else f"{res.mean_ssa:.4f}"
            print(f"{method} l={length}: mean SSA {shown}, "
                  f"mean neighbors {res.mean_neighbors:.2f}")
        section["methods"][method] = entry

    os.makedirs(args.out_dir, exist_ok=True)
    write_atomic(os.path.join(args.out_dir, "ssa.json"),
                 json.dumps(section, sort_keys=True, indent=2) + "\n")
    lines = ["method,length,mean_ssa,mean_neighbors"]
    for method, by_length in sweeps.items():
        for length, res in by_length.items():
            ssa_cell = "" if res.mean_ssa is None else repr(res.mean_ssa)
            lines.append(f"{method},{length},{ssa_cell},{res.mean_neighbors!r}")
    write_atomic(os.path.join(args.out_dir, "ssa_sweep.csv"),
                 "\n".join(lines) + "\n")
    plots.plot_ssa_sweep(section,
                         os.path.join(args.out_dir, "figures", "ssa_sweep.png"))
    print(f"ssa -> {args.out_dir}")
    return 0


def _deep_merge(base: dict, overlay: dict) -> dict:
    """Nested dict merge where overlay wins on conflicts."""
    merged = dict(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _flag_overrides(args) -> dict:
    """PipelineConfig fragments from mirrored flags. The config file stays
    the source of truth: these only fill in what the file leaves unset."""
    out: dict = {}
    tokenizer = {}
    if args.patch_length is not None:
        tokenizer["patch_length"] = args.patch_length
    if args.alphabet_size is not None:
        tokenizer["alphabet_size"] = args.alphabet_size
    if args.channels is not None:
        tokenizer["channels"] = args.channels
    if tokenizer:
        out["tokenizer"] = tokenizer
    train_part = {}
    if args.epochs is not None:
        train_part["epochs"] = args.epochs
    if args.p_unk is not None:
        train_part["p_unk"] = args.p_unk
    if args.lr is not None:
        train_part["learning_rate"] = args.lr
    if train_part:
        out["train"] = train_part
    if args.seeds is not None:
        out["seeds"] = args.seeds
    if args.master_seed is not None:
        out["master_seed"] = args.master_seed
    if args.ssa_lengths is not None:
        out["ssa_lengths"] = args.ssa_lengths
    if args.rnd_deletion_draws is not None:
        out["rnd_deletion_draws"] = args.rnd_deletion_draws
    return out


def _cmd_pipeline(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        file_dict = json.load(fh)
    config = PipelineConfig.from_dict(_deep_merge(_flag_overrides(args), file_dict))
    report = run_pipeline(config, args.out_dir, cache_dir=args.cache_dir)
    print(f"config hash {report['config_hash']}")
    for seed, meta in report["classifier"].items():
        val = meta.get("val_accuracy")
        val_part = "" if val is None else f", val acc {val:.4f}"
        print(f"seed {seed}: test acc {meta['test_accuracy']:.4f}{val_part}")
    print(f"report -> {os.path.join(args.out_dir, 'report.json')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tokex",
                     description="Token-level attribution workbench for "
                                 "discretized time series classifiers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-motif corpus")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--length", type=int, default=600)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--motif-start", type=int, default=200)
    p.add_argument("--motif-patches", type=int, default=4)
    p.add_argument("--patch-length", type=int, default=25)
    p.add_argument("--noise-std", type=float, default=0.25)
    p.add_argument("--amplitude", type=float, default=2.0)
    p.add_argument("--balance", type=_float_list, default=None,
                   help="comma separated class proportions")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("tokenize", help="SAX-tokenize a series file")
    p.add_argument("--input", required=True)
    p.add_argument("--format", default="auto", choices=("auto", "csv", "ndjson"))
    p.add_argument("--patch-length", type=int, default=25)
    p.add_argument("--alphabet-size", type=int, default=4)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--pad-policy", default="repeat-last",
                   choices=("repeat-last", "zero-after-znorm"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_tokenize)

    p = sub.add_parser("train", help="train the token classifier")
    p.add_argument("--tokens", required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--val")
    p.add_argument("--p-unk", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--hidden", type=_int_list, default=[128, 64],
                   help="comma separated hidden sizes")
    p.add_argument("--class-weighted", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--curve-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("explain", help="attribute test sequences")
    p.add_argument("--model", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--target", default="pred",
                   help="pred, true, or an explicit class index")
    p.add_argument("--master-seed", type=int, default=1234)
    p.add_argument("--steps", type=int)
    p.add_argument("--n-masks", type=int)
    p.add_argument("--p-keep", type=float)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--kernel-width", type=float)
    p.add_argument("--ridge", type=float)
    p.add_argument("--use-abs", action="store_true")
    p.add_argument("--normalize-by-pkeep", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("evaluate",
                       help="deletion AUCs and method agreement for one model")
    p.add_argument("--model", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--attributions", action="append", metavar="METHOD=PATH")
    p.add_argument("--rnd-draws", type=int, default=5)
    p.add_argument("--master-seed", type=int, default=1234)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ssa", help="similar subsequence accuracy sweep")
    p.add_argument("--train-tokens", required=True)
    p.add_argument("--test-tokens", required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--attributions", action="append", metavar="METHOD=PATH")
    p.add_argument("--lengths", type=_int_list, default=[1, 2, 3])
    p.add_argument("--use-abs", action="store_true")
    p.add_argument("--master-seed", type=int, default=1234)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_ssa)

    p = sub.add_parser("pipeline", help="run the full workflow from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--cache-dir", default=None,
                   help="defaults to $TOKEX_CACHE_DIR or OUT_DIR/cache")
    p.add_argument("--seeds", type=_int_list, default=None,
                   help="used only when the config file leaves seeds unset")
    p.add_argument("--master-seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--p-unk", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--patch-length", type=int, default=None)
    p.add_argument("--alphabet-size", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--ssa-lengths", type=_int_list, default=None)
    p.add_argument("--rnd-deletion-draws", type=int, default=None)
    p.set_defaults(func=_cmd_pipeline)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
