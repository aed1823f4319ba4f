"""Command-line entry point: ``ildvit <subcommand> [options]``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
import tempfile

import numpy as np

from . import __version__
from .benchmark import benchmark_inference, classify_recording
from .config import RunConfig, load_config
from .dsp import Label, RawRecording
from .features import Featurizer, FeatureCache, build_dataset
from .manifest import load_manifest
from .metrics import compute_metrics, roc_auc, write_metrics_csv, write_metrics_json, write_roc_csv
from .model import ModelConfig, checkpoint_bytes, count_parameters, init_params, load_checkpoint
from .noise import format_robustness_table, load_noise_bank, noise_robustness, write_robustness_csv
from .synth import generate_synthetic_dataset, synth_breath_sound, _subject_traits
from .training import (PARTITIONS, evaluate, kfold_random_split, split_subject_level, train,
                       write_history_csv)
from .wavio import read_wav

logger = logging.getLogger("ildvit")

REFERENCE_TOTAL = 349506


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@contextlib.contextmanager
def staged_output(out_dir):
    """Write into a scratch directory and move files into ``out_dir`` only on success."""
    os.makedirs(out_dir, exist_ok=True)
    stage = tempfile.mkdtemp(dir=out_dir, prefix=".partial-")
    try:
        yield stage
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    for name in os.listdir(stage):
        os.replace(os.path.join(stage, name), os.path.join(out_dir, name))
    os.rmdir(stage)


def _resolve_config(args, ckpt_meta=None):
    if args.config:
        cfg = load_config(args.config)
    elif ckpt_meta and "run_config" in ckpt_meta:
        cfg = RunConfig(**ckpt_meta["run_config"])
    else:
        cfg = RunConfig()
    changes = {"seed": args.seed} if args.seed is not None else {}
    for key in ("epochs", "n_blocks", "precision"):
        if getattr(args, key, None) is not None:
            changes[key] = getattr(args, key)
    cfg = cfg.replace(**changes) if changes else cfg
    logger.info("config: %s", " ".join(line.replace(" = ", "=") for line in cfg.dumps().splitlines()))
    return cfg


def _load_model(path, cfg):
    params, meta = load_checkpoint(path)
    return params.astype(cfg.dtype), meta


def _default_cache(manifest_path):
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), ".tfr_cache")


def _select_partition(manifest, args):
    if not getattr(args, "split", None):
        return manifest
    with open(args.split, encoding="utf-8") as fh:
        split = json.load(fh)
    return manifest.select(split[args.partition])


def _evaluation_outputs(stage, ev, prefix=""):
    report = ev.report()
    rec_cm = ev.recording_level()
    extra = {"n_segments": int(len(ev.labels)),
             "recording_level_majority_vote": compute_metrics(rec_cm).to_dict()}
    write_metrics_json(os.path.join(stage, f"{prefix}metrics.json"), report, extra)
    write_metrics_csv(os.path.join(stage, f"{prefix}metrics.csv"), report)
    if len(np.unique(ev.labels)) == 2:
        fpr, tpr, thr, _ = roc_auc(ev.scores, ev.labels == 1)
        write_roc_csv(os.path.join(stage, f"{prefix}roc.csv"), fpr, tpr, thr)
    with open(os.path.join(stage, f"{prefix}scores.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["recording_id", "label", "p_healthy", "p_ild", "predicted"])
        for rid, lab, p, pred in zip(ev.recording_ids, ev.labels, ev.probs, ev.predictions):
            w.writerow([rid, Label(int(lab)).display, f"{p[0]:.6f}", f"{p[1]:.6f}", Label(int(pred)).display])
    return report


def _fmt(v):
    return "undefined" if v is None else f"{100 * v:.2f}%"


def _print_report(report, title):
    cm = report.confusion
    print(f"{title}: TP={cm.tp} TN={cm.tn} FP={cm.fp} FN={cm.fn}")
    print("  " + "  ".join(f"{k.upper()}={_fmt(getattr(report, k))}"
                           for k in ("acc", "sns", "spf", "pre", "icbhi", "f1")))
    if report.auc:
        print("  " + "  ".join(f"AUC[{k}]={v:.4f}" for k, v in report.auc.items()))


# ---------------------------------------------------------------- subcommands

def cmd_params(args):
    cfg = _resolve_config(args)
    mc = cfg.model_config()
    ledger = count_parameters(mc)
    rows = [("Mel spectrogram", f"{mc.image_size}x{mc.image_size}x3", 0),
            ("Patchification", f"{mc.n_patches}x{mc.patch_dim}", 0),
            ("Patch encoder", f"{mc.n_patches}x{mc.proj_len}", ledger["patch_encoder"])]
    rows += [(f"Transformer block {b + 1}", f"{mc.n_patches}x{mc.proj_len}", ledger[f"block{b + 1}"])
             for b in range(mc.n_blocks)]
    rows += [("LN", f"{mc.n_patches}x{mc.proj_len}", ledger["final_ln"]),
             ("GAP", f"{mc.proj_len}x1", 0),
             ("Dense (sigmoid)", f"{mc.n_classes}x1", ledger["head"])]
    for name, dim, count in rows:
        print(f"{name:<22}{dim:>12}{count:>10}")
    print(f"{'total':<22}{'':>12}{ledger['total']:>10}")
    if ledger["total"] != REFERENCE_TOTAL and mc == ModelConfig(n_blocks=mc.n_blocks):
        print(f"note: n_blocks={mc.n_blocks} gives {ledger['total']}; the reference total {REFERENCE_TOTAL} "
              f"requires n_blocks=4")
    return 0


def cmd_synth(args):
    cfg = _resolve_config(args)
    m = generate_synthetic_dataset(args.out, args.subjects_per_class, args.recordings_per_subject, cfg.seed)
    print(f"wrote {len(m)} recordings to {os.path.join(args.out, 'manifest.csv')}")
    return 0


def cmd_featurize(args):
    cfg = _resolve_config(args)
    manifest = load_manifest(args.manifest, strict=args.strict)
    cache_dir = args.cache or _default_cache(args.manifest)
    cache = FeatureCache(cache_dir, cfg)
    reused = sum(cache.get(e.recording_id) is not None for e in manifest)
    ds = build_dataset(manifest, cfg, cache_dir)
    print(f"segments={len(ds)} recordings={len(manifest)} reused={reused} "
          f"cache={cache.dir} content_sha256={cache.content_hash()}")
    return 0


def _save_model(path, params, cfg, extra=None):
    meta = {"run_config": cfg.to_dict()}
    meta.update(extra or {})
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, meta))


def cmd_train(args):
    cfg = _resolve_config(args)
    manifest = load_manifest(args.manifest, strict=args.strict)
    ds = build_dataset(manifest, cfg, args.cache or _default_cache(args.manifest))
    parts = split_subject_level(manifest, cfg.fractions, cfg.seed, ds.segment_counts())
    sets = [ds.select_recordings(p.recording_ids()) for p in parts]
    print("split (subject level): " + ", ".join(
        f"{name}={len(s)} segments/{len(p.subjects())} subjects" for name, s, p in zip(PARTITIONS, sets, parts)))
    params = init_params(cfg.model_config(), cfg.seed, cfg.dtype)
    result = train(params, sets[0], sets[1], cfg.epochs, cfg.lr, cfg.batch_size, cfg.seed, cfg.optimizer)
    with staged_output(args.out) as stage:
        _save_model(os.path.join(stage, "checkpoint.ildv"), result.params, cfg,
                    {"best_epoch": result.best_epoch})
        write_history_csv(os.path.join(stage, "history.csv"), result.history)
        with open(os.path.join(stage, "split.json"), "w", encoding="utf-8") as fh:
            json.dump({name: p.recording_ids() for name, p in zip(PARTITIONS, parts)}, fh, indent=1)
        with open(os.path.join(stage, "config.txt"), "w", encoding="utf-8") as fh:
            fh.write(cfg.dumps())
        if len(sets[2]):
            report = _evaluation_outputs(stage, evaluate(result.params, sets[2]), prefix="test_")
    last = result.history[-1] if result.history else {}
    print(f"best epoch {result.best_epoch}; final val_acc={last.get('val_acc', float('nan')):.4f}")
    if len(sets[2]):
        _print_report(report, "blind test (segment level)")
    print(f"wrote {os.path.join(args.out, 'checkpoint.ildv')}")
    return 0


def cmd_evaluate(args):
    params, meta = load_checkpoint(args.checkpoint)
    cfg = _resolve_config(args, meta)
    params = params.astype(cfg.dtype)
    manifest = _select_partition(load_manifest(args.manifest, strict=args.strict), args)
    ds = build_dataset(manifest, cfg, args.cache or _default_cache(args.manifest))
    ev = evaluate(params, ds)
    with staged_output(args.out) as stage:
        report = _evaluation_outputs(stage, ev)
    _print_report(report, "segment level")
    rates = report.confusion.class_error_rates()
    print("  misclassification: " + "  ".join(f"{k}={_fmt(v)}" for k, v in rates.items()))
    _print_report(compute_metrics(ev.recording_level()), "recording level (supplementary majority vote)")
    return 0


def cmd_crossval(args):
    cfg = _resolve_config(args)
    manifest = load_manifest(args.manifest, strict=args.strict)
    ds = build_dataset(manifest, cfg, args.cache or _default_cache(args.manifest))
    folds = kfold_random_split(len(ds), cfg.folds, cfg.seed)
    rows = []
    with staged_output(args.out) as stage:
        for i, test_idx in enumerate(folds):
            rest = np.concatenate([f for j, f in enumerate(folds) if j != i])
            rest = np.random.default_rng([cfg.seed, i]).permutation(rest)
            n_val = int(round(cfg.val_frac * len(ds)))
            val_idx, train_idx = np.sort(rest[:n_val]), np.sort(rest[n_val:])
            params = init_params(cfg.model_config(), cfg.seed + i, cfg.dtype)
            res = train(params, ds.subset(train_idx), ds.subset(val_idx), cfg.epochs, cfg.lr,
                        cfg.batch_size, cfg.seed + i, cfg.optimizer)
            report = _evaluation_outputs(stage, evaluate(res.params, ds.subset(test_idx)), f"fold{i + 1}_")
            write_history_csv(os.path.join(stage, f"fold{i + 1}_history.csv"), res.history)
            rows.append(report)
            _print_report(report, f"fold {i + 1}")
        keys = ("acc", "sns", "spf", "pre", "icbhi", "f1")
        with open(os.path.join(stage, "crossval.csv"), "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold"] + list(keys))
            for i, r in enumerate(rows):
                w.writerow([i + 1] + ["undefined" if getattr(r, k) is None else f"{getattr(r, k):.6f}" for k in keys])
            means = [np.mean([getattr(r, k) for r in rows if getattr(r, k) is not None] or [np.nan]) for k in keys]
            w.writerow(["mean"] + [f"{m:.6f}" for m in means])
    print("mean: " + "  ".join(f"{k.upper()}={100 * m:.2f}%" for k, m in zip(keys, means)))
    return 0


def cmd_noise_eval(args):
    params, meta = load_checkpoint(args.checkpoint)
    cfg = _resolve_config(args, meta)
    params = params.astype(cfg.dtype)
    kind = args.kind or cfg.noise_kind
    grid = [float(v) for v in args.snr_grid.split(",")] if args.snr_grid else list(cfg.snr_grid)
    bank_path = args.noise_bank or cfg.noise_bank
    bank = load_noise_bank(bank_path) if kind == "heart" else None
    manifest = _select_partition(load_manifest(args.manifest, strict=args.strict), args)
    rows = noise_robustness(params, manifest, cfg, kind, grid, bank, cfg.seed)
    out = args.out
    tmp = out + ".tmp"
    try:
        write_robustness_csv(tmp, rows)
        os.replace(tmp, out)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    print(format_robustness_table(rows))
    return 0


def cmd_infer(args):
    params, meta = load_checkpoint(args.checkpoint)
    cfg = _resolve_config(args, meta)
    params = params.astype(cfg.dtype)
    rec = read_wav(args.wav)
    label, probs = classify_recording(params, rec, Featurizer(cfg))
    for k, p in enumerate(probs):
        print(f"segment {k}: p_healthy={p[0]:.4f} p_ild={p[1]:.4f}")
    mean = probs.mean(axis=0)
    print(f"label={label} p_healthy={mean[0]:.4f} p_ild={mean[1]:.4f} segments={len(probs)}")
    return 0


def cmd_benchmark(args):
    if args.checkpoint:
        params, meta = load_checkpoint(args.checkpoint)
        size = os.path.getsize(args.checkpoint)
    else:
        params, meta, size = None, {}, None
    cfg = _resolve_config(args, meta)
    if params is None:
        params = init_params(cfg.model_config(), cfg.seed)
    params = params.astype(np.float32)
    if args.wav:
        rec = read_wav(args.wav)
    else:
        rng = np.random.default_rng(cfg.seed)
        x = synth_breath_sound(args.duration, _subject_traits(rng, Label.ILD), rng)
        rec = RawRecording(x, recording_id=f"synthetic_{args.duration:g}s")
    if size is None:
        size = len(checkpoint_bytes(params))
    report = benchmark_inference(params, rec, args.runs, cfg, model_size_bytes=size)
    if args.out:
        with open(args.out + ".tmp", "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        os.replace(args.out + ".tmp", args.out)
    print(f"segments={report.segments} latency={report.latency_mean_sec:.4f}+/-{report.latency_std_sec:.4f} s "
          f"peak_memory={report.peak_memory_mean_bytes / 1e6:.3f}+/-{report.peak_memory_std_bytes / 1e6:.3f} MB "
          f"model_size={report.model_size_bytes} bytes runs={report.runs}")
    return 0


def cmd_export_embeddings(args):
    params, meta = load_checkpoint(args.checkpoint)
    cfg = _resolve_config(args, meta)
    params = params.astype(cfg.dtype)
    manifest = _select_partition(load_manifest(args.manifest, strict=args.strict), args)
    ds = build_dataset(manifest, cfg, args.cache or _default_cache(args.manifest))
    ev = evaluate(params, ds)
    write_embeddings_csv(args.out, ds, ev.embeddings)
    print(f"wrote {len(ds)} embeddings of width {ev.embeddings.shape[1]} to {args.out}")
    return 0


def write_embeddings_csv(path, ds, embeddings):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["recording_id", "k", "label"] + [f"e{i}" for i in range(embeddings.shape[1])])
        for rid, k, lab, e in zip(ds.recording_ids, ds.segment_index, ds.labels, embeddings):
            w.writerow([rid, int(k), Label(int(lab)).display] + [repr(float(v)) for v in e])
    os.replace(tmp, path)


# ---------------------------------------------------------------- parser

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    data = _Parser(add_help=False)
    data.add_argument("--manifest", required=True)
    data.add_argument("--cache", help="TFR image cache directory (default: <manifest dir>/.tfr_cache)")
    data.add_argument("--strict", action="store_true", help="fail early on missing audio files")

    part = _Parser(add_help=False)
    part.add_argument("--split", help="split.json written by `train`")
    part.add_argument("--partition", default="test", choices=PARTITIONS)

    parser = _Parser(prog="ildvit", description="Respiratory-sound ILD detection with a small vision transformer")
    parser.add_argument("--version", action="version", version=f"ildvit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("params", parents=[common], help="print the parameter ledger")
    p.add_argument("--n-blocks", type=int)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects-per-class", type=int, default=20)
    p.add_argument("--recordings-per-subject", type=int, default=2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", parents=[common, data], help="WAV -> cached TFR images")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", parents=[common, data], help="subject-level split, train, blind test")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--precision", choices=["float32", "float64"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common, data, part], help="metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("crossval", parents=[common, data], help="segment-level k-fold cross-validation")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--precision", choices=["float32", "float64"])
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("noise-eval", parents=[common, data, part], help="per-SNR per-class accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", choices=["gaussian", "heart"])
    p.add_argument("--noise-bank", help="directory of 4 kHz mono PCM16 WAVs (heart-sound noise)")
    p.add_argument("--snr-grid", help="comma-separated SNR values in dB "
                   "(use --snr-grid=-5,0,5,10 when the first value is negative)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_noise_eval)

    p = sub.add_parser("infer", parents=[common], help="classify one WAV recording")
    p.add_argument("wav")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("benchmark", parents=[common], help="latency / peak-memory benchmark")
    p.add_argument("--checkpoint")
    p.add_argument("--wav")
    p.add_argument("--duration", type=float, default=20.0, help="synthetic recording length if no --wav")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("export-embeddings", parents=[common, data, part], help="GAP embeddings to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # one machine-parsable line per failure
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        logger.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
