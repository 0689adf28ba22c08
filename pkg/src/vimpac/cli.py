"""``vimpac`` command line. Exit codes: 0 success, 1 runtime failure, 2 usage or config error."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from dataclasses import replace
from fractions import Fraction

import numpy as np

from . import config as C
from .engine import CheckpointFormatError, load_params, save_params
from .masking import (LENGTH_RULES, METRICS, MaskingConfig, apply_mask, calibration_table, fill_match_rate, make_rng,
                      neighbor_fill, sample_mask)
from .model import VimpacModel
from .pipeline import (CropConfig, TrainingDiverged, Trainer, evaluate, run_finetune, write_metrics)
from .raster import read_videos, token_map_image, write_pgm
from .tokens import (StoreFormatError, ToyQuantizerConfig, VideoTokenStore, Vocabulary, load_store, quantize_video,
                     save_store)

log = logging.getLogger("vimpac")

MODEL_FILE = "model.vprm"
METRICS_FILE = "metrics.csv"
CONFIG_FILE = "resolved.cfg"


class UsageError(Exception):
    """Bad arguments, configs or inputs; exits with status 2."""


def _parse_dims(text):
    try:
        dims = tuple(int(x) for x in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"dims must look like TxHxW, got {text!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise UsageError(f"dims must be three positive integers, got {text!r}")
    return dims


def _parse_range(text):
    lo, sep, hi = text.partition("..")
    try:
        lo, hi = int(lo), int(hi) if sep else int(lo)
    except ValueError:
        raise UsageError(f"block range must look like a..b, got {text!r}") from None
    if lo < 1 or hi < lo:
        raise UsageError(f"invalid block range {text!r}")
    return range(lo, hi + 1)


def _load_store(path):
    try:
        return load_store(path)
    except (OSError, StoreFormatError) as exc:
        raise UsageError(f"cannot read store {path}: {exc}") from None


def _load_config(args):
    try:
        cfg = C.load(args.config) if args.config else C.RunConfig()
        pairs = []
        for item in args.set or ():
            key, sep, value = item.partition("=")
            if not sep:
                raise C.ConfigError(f"--set expects key=value, got {item!r}")
            pairs.append((key.strip(), value))
        return C.apply_overrides(cfg, pairs)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from None
    except C.ConfigError as exc:
        raise UsageError(f"config error: {exc}") from None


def _read_labels(path, store: VideoTokenStore):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise UsageError(f"cannot read labels: {exc}") from None
    if rows and not {"video_id", "label"} <= set(rows[0]):
        raise UsageError("labels CSV needs video_id and label columns")
    try:
        labels = {r["video_id"]: int(r["label"]) for r in rows}
    except ValueError as exc:
        raise UsageError(f"bad label value: {exc}") from None
    missing = [v.video_id for v in store.videos if v.video_id not in labels]
    if missing:
        raise UsageError(f"labels missing for {len(missing)} video(s), e.g. {missing[0]}")
    if any(v < 0 for v in labels.values()):
        raise UsageError("labels must be non-negative integers")
    return labels


def _check_compatible(cfg: C.RunConfig, store: VideoTokenStore, clip_len, spatial=True):
    """``spatial=False`` allows token maps larger than the model (they are cropped)."""
    if len(store) == 0:
        raise UsageError("store is empty")
    if store.vocab.vq_size != cfg.model.vq_size:
        raise UsageError(f"store vq_size {store.vocab.vq_size} != model.vq_size {cfg.model.vq_size}")
    h, w = store[0].grid.dims[1:]
    if clip_len > cfg.model.max_t or (spatial and (h > cfg.model.max_h or w > cfg.model.max_w)):
        raise UsageError(
            f"clips of {(clip_len, h, w)} exceed model.max_t/max_h/max_w {(cfg.model.max_t, cfg.model.max_h, cfg.model.max_w)}"
        )


def _write_run(out, model: VimpacModel, cfg: C.RunConfig, reports):
    os.makedirs(out, exist_ok=True)
    save_params(os.path.join(out, MODEL_FILE), model.state_arrays())
    write_metrics(reports, os.path.join(out, METRICS_FILE))
    with open(os.path.join(out, CONFIG_FILE), "w", encoding="utf-8") as fh:
        fh.write(C.dump(replace(cfg, model=model.config)))


def load_checkpoint(directory):
    """Model and resolved config from a run directory."""
    try:
        cfg = C.load(os.path.join(directory, CONFIG_FILE))
        arrays = load_params(os.path.join(directory, MODEL_FILE))
    except (OSError, C.ConfigError, CheckpointFormatError) as exc:
        raise UsageError(f"cannot load checkpoint {directory}: {exc}") from None
    model = VimpacModel(cfg.model)
    try:
        model.load_state_arrays(arrays)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"checkpoint {directory} does not match its config: {exc}") from None
    return model, cfg


# ---------------------------------------------------------------------------
# commands

def cmd_quantize(args):
    try:
        videos = read_videos(args.frames)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read frames: {exc}") from None
    try:
        fps = Fraction(args.fps)
        qcfg = ToyQuantizerConfig(patch=args.patch, vq_size=args.vq_size)
    except (ValueError, ZeroDivisionError) as exc:
        raise UsageError(str(exc)) from None
    entries = []
    for vid, frames in videos:
        if len(frames) == 0:
            raise UsageError(f"video {vid} has no frames")
        try:
            grid = quantize_video(frames, qcfg)
        except ValueError as exc:
            raise UsageError(f"video {vid}: {exc}") from None
        entries.append((vid, fps, grid))
        print(f"{vid}\t{'x'.join(map(str, grid.dims))}")
    try:
        store = VideoTokenStore(Vocabulary(args.vq_size), tuple(entries))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_store(store, args.out)
    print(f"wrote {len(store)} video(s) to {args.out}")
    return 0


def cmd_calibrate(args):
    dims = _parse_dims(args.dims)
    counts = _parse_range(args.blocks)
    if args.samples < 2:
        raise UsageError("--samples must be >= 2")
    rows = calibration_table(dims, counts, args.samples, make_rng(args.seed), args.length_rule)
    best = min(rows, key=lambda r: abs(r[1] - args.target))[0]
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["blocks", "mean_ratio", "stderr", "closest"])
        for k, mean, se in rows:
            w.writerow([k, f"{mean:.6f}", f"{se:.6f}", int(k == best)])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def _train_common(args, mode):
    cfg = _load_config(args)
    store = _load_store(args.store)
    clip_len = cfg.train.sampler.clip_len if mode == "pretrain" else cfg.finetune.clip_len
    _check_compatible(cfg, store, clip_len, spatial=(mode == "pretrain"))
    labels = _read_labels(args.labels, store) if mode != "pretrain" else None
    if mode == "pretrain" and cfg.train.group_size // 2 > len(store):
        raise UsageError(f"train.group_size {cfg.train.group_size} needs {cfg.train.group_size // 2} videos; "
                         f"store has {len(store)}")
    model = VimpacModel(cfg.model)
    if args.init:
        init, _ = load_checkpoint(args.init)
        arrays = {k: v for k, v in init.state_arrays().items() if not k.startswith("classifier.")}
        try:
            model.load_state_arrays(arrays, strict=False)
        except ValueError as exc:
            raise UsageError(f"--init does not fit the configured model: {exc}") from None
    reports = []
    try:
        if mode == "pretrain":
            Trainer(model, store, cfg.train).run(callback=reports.append)
        else:
            ft = replace(cfg.finetune, linear_probe=(mode == "probe") or cfg.finetune.linear_probe)
            cfg = replace(cfg, finetune=ft)
            reports = run_finetune(store, labels, model, ft)
    except TrainingDiverged as exc:
        os.makedirs(args.out, exist_ok=True)
        write_metrics(reports, os.path.join(args.out, METRICS_FILE))
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _write_run(args.out, model, cfg, reports)
    last = reports[-1]
    print(f"{mode}: {len(reports)} steps, final loss {last.combined_loss:.6f}"
          + (f", mask_acc {last.mask_acc:.4f}" if last.mask_acc is not None else ""))
    return 0


def cmd_reconstruct(args):
    store = _load_store(args.store)
    cfg = MaskingConfig(strategy=args.strategy, num_blocks=args.blocks, xi=args.xi, length_rule=args.length_rule)
    rng = make_rng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    rates = []
    with open(os.path.join(args.out, "fill.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "strategy", "metric", "masked", "match_rate", "status"])
        for entry in store.videos:
            grid = entry.grid
            mask = sample_mask(grid.dims, cfg, rng)
            masked, _ = apply_mask(grid, mask, store.vocab)
            base = os.path.join(args.out, entry.video_id)
            write_pgm(base + "_original.pgm", token_map_image(grid.tokens))
            write_pgm(base + "_masked.pgm", token_map_image(grid.tokens, mask.array))
            try:
                filled = neighbor_fill(masked, mask, args.metric, store.vocab.pad_id)
            except ValueError as exc:
                w.writerow([entry.video_id, args.strategy, args.metric, len(mask), "", f"degenerate: {exc}"])
                print(f"{entry.video_id}: {exc}", file=sys.stderr)
                continue
            rate = fill_match_rate(filled, grid, mask)
            rates.append(rate)
            write_pgm(base + "_filled.pgm", token_map_image(filled.tokens))
            w.writerow([entry.video_id, args.strategy, args.metric, len(mask), f"{rate:.6f}", "ok"])
    mean = float(np.mean(rates)) if rates else math.nan
    print(f"mean fill match rate {mean:.6f} over {len(rates)} video(s)")
    return 0


def cmd_eval(args):
    model, cfg = load_checkpoint(args.ckpt)
    if model.config.num_classes == 0:
        raise UsageError(f"checkpoint {args.ckpt} has no classifier")
    store = _load_store(args.store)
    labels = _read_labels(args.labels, store)
    if max(labels[v.video_id] for v in store.videos) >= model.config.num_classes:
        raise UsageError("a label exceeds the classifier's class count")
    crops = cfg.crops
    if args.crops:
        try:
            crops = C.load(args.crops, base=cfg).crops
        except (OSError, C.ConfigError) as exc:
            raise UsageError(f"crop config error: {exc}") from None
    try:
        crops = CropConfig(
            spatial_crops=args.spatial_crops if args.spatial_crops is not None else crops.spatial_crops,
            temporal_crops=args.temporal_crops if args.temporal_crops is not None else crops.temporal_crops,
            flip=args.flip or crops.flip,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _check_compatible(cfg, store, cfg.finetune.clip_len, spatial=False)
    top1, scores = evaluate(model, store, labels, crops, cfg.finetune.clip_len)
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            k = model.config.num_classes
            w.writerow(["video_id", "label", "pred"] + [f"score_{c}" for c in range(k)])
            for vid, s in scores.items():
                w.writerow([vid, labels[vid], int(np.argmax(s))] + [f"{x:.6f}" for x in s])
    print(f"top1 {top1:.6f}")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="vimpac", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="turn RGB frames into a token store")
    q.add_argument("--frames", required=True, help="directory of frames / video sub-directories, or a .npy array")
    q.add_argument("--out", required=True)
    q.add_argument("--fps", default="2", help="frame rate recorded in the store (may be a fraction)")
    q.add_argument("--patch", type=int, default=8)
    q.add_argument("--vq-size", type=int, default=8192)
    q.set_defaults(func=cmd_quantize)

    c = sub.add_parser("calibrate-masks", help="Monte-Carlo induced masking ratio per block count")
    c.add_argument("--dims", required=True, help="TxHxW")
    c.add_argument("--blocks", default="1..10", help="a..b")
    c.add_argument("--samples", type=int, default=2000)
    c.add_argument("--target", type=float, default=0.15)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--length-rule", choices=LENGTH_RULES, default="calibrated")
    c.add_argument("--out", help="CSV path (stdout if omitted)")
    c.set_defaults(func=cmd_calibrate)

    for name, help_ in (("pretrain", "masked-token + contrastive pre-training"),
                        ("finetune", "train a classifier on the whole network"),
                        ("probe", "train a classifier on frozen features")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--config", help="key=value config file")
        t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        t.add_argument("--store", required=True)
        t.add_argument("--out", required=True, help="output run directory")
        t.add_argument("--init", help="run directory to initialise weights from")
        if name != "pretrain":
            t.add_argument("--labels", required=True, help="CSV with video_id,label")
        t.set_defaults(func=lambda a, mode=name: _train_common(a, mode))

    r = sub.add_parser("reconstruct", help="nearest-visible-neighbour fill diagnostics")
    r.add_argument("--store", required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--strategy", choices=("block", "iid"), default="block")
    r.add_argument("--metric", choices=METRICS, default="spatiotemporal")
    r.add_argument("--blocks", type=int, default=5)
    r.add_argument("--xi", type=float, default=0.15)
    r.add_argument("--length-rule", choices=LENGTH_RULES, default="calibrated")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="multi-crop classification accuracy")
    e.add_argument("--ckpt", required=True, help="fine-tuned run directory")
    e.add_argument("--store", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--crops", help="config file whose crops.* keys set the crop protocol")
    e.add_argument("--spatial-crops", type=int, choices=(1, 3))
    e.add_argument("--temporal-crops", type=int)
    e.add_argument("--flip", action="store_true")
    e.add_argument("--out", help="per-video scores CSV")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001  (report, don't dump a traceback)
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
