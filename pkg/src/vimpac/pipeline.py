"""Clip-pair sampling, batch construction, the accumulating training loop,
fine-tuning, multi-crop evaluation and the ablation harness."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import engine as E
from .engine import AdamState, LrSchedule, adam_step, clip_global_norm, global_norm, lr_at
from .masking import MaskingConfig, apply_mask, make_rng, sample_mask
from .model import VimpacModel
from .objectives import ObjectiveConfig, combined_loss, info_nce, mask_nll
from .tokens import TokenGrid, VideoTokenStore, slice_grid

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "lr", "mask_loss", "mask_acc", "cl_loss", "combined_loss", "grad_norm", "scale")


class TrainingDiverged(RuntimeError):
    def __init__(self, step, last_good):
        super().__init__(f"non-finite loss at step {step}; last good step was {last_good}")
        self.step = step
        self.last_good = last_good


# ---------------------------------------------------------------------------
# positive pairs and batches

@dataclass(frozen=True)
class PairSamplerConfig:
    """``d_max`` is in seconds (``inf`` for no limit); ``fps`` overrides the stored frame rate."""

    clip_len: int = 5
    d_max: float = math.inf
    fps: Fraction | None = None
    seed: int = 0

    def __post_init__(self):
        if self.clip_len < 1:
            raise ValueError(f"clip_len must be >= 1, got {self.clip_len}")
        if not self.d_max >= 0:
            raise ValueError(f"d_max must be >= 0 or inf, got {self.d_max}")


def sample_starts(n_frames, cfg: PairSamplerConfig, fps, rng):
    """Two clip starts drawn uniformly, redrawn together until ``|a - b| <= d_max * fps``."""
    hi = max(0, n_frames - cfg.clip_len)
    rate = float(cfg.fps if cfg.fps is not None else fps)
    limit = cfg.d_max * rate
    if hi == 0:
        return 0, 0
    if limit < 1:
        s = int(rng.integers(0, hi + 1))
        return s, s
    while True:
        a, b = (int(x) for x in rng.integers(0, hi + 1, size=2))
        if abs(a - b) <= limit:
            return a, b


def sample_positive_pair(grid: TokenGrid, fps, cfg: PairSamplerConfig, rng, pad_id):
    a, b = sample_starts(grid.t_len, cfg, fps, rng)
    return slice_grid(grid, a, cfg.clip_len, pad_id), slice_grid(grid, b, cfg.clip_len, pad_id), (a, b)


@dataclass
class ClipPairBatch:
    """``2n`` clips: rows ``i`` and ``i + n`` come from the same video."""

    masked: np.ndarray
    mask: np.ndarray
    raw: np.ndarray
    video_ids: list
    starts: list
    cl_input_masked: bool = True

    @property
    def n(self):
        return self.raw.shape[0] // 2

    @property
    def cl_inputs(self):
        return self.masked if self.cl_input_masked else self.raw

    @property
    def targets(self):
        """One ``{(t, i, j): original id}`` map per clip."""
        return [
            {tuple(int(x) for x in p): int(self.raw[k][tuple(p)]) for p in np.argwhere(self.mask[k])}
            for k in range(self.raw.shape[0])
        ]

    def masked_fraction(self):
        return self.mask.reshape(self.mask.shape[0], -1).mean(axis=1)


def build_batch(store: VideoTokenStore, video_indices, sampler: PairSamplerConfig, masking: MaskingConfig, rng,
                cl_input_masked=True):
    video_indices = [int(v) for v in video_indices]
    if len(video_indices) < 2:
        raise ValueError("a contrastive batch needs at least 2 videos")
    if len(set(video_indices)) != len(video_indices):
        raise ValueError(f"duplicate video indices {video_indices}: a video cannot be its own negative")
    vocab = store.vocab
    first, second, starts = [], [], []
    for v in video_indices:
        entry = store[v]
        a, b, s = sample_positive_pair(entry.grid, entry.fps, sampler, rng, vocab.pad_id)
        first.append(a)
        second.append(b)
        starts.append(s)
    clips = first + second
    masked, masks = [], []
    for clip in clips:
        m = sample_mask(clip.dims, masking, rng)
        mg, _ = apply_mask(clip, m, vocab)
        masked.append(mg.tokens)
        masks.append(m.array & (clip.tokens != vocab.pad_id))
    ids = [store[v].video_id for v in video_indices]
    return ClipPairBatch(
        masked=np.stack(masked), mask=np.stack(masks), raw=np.stack([c.tokens for c in clips]),
        video_ids=ids + ids, starts=starts, cl_input_masked=cl_input_masked,
    )


# ---------------------------------------------------------------------------
# losses over contrastive groups

@dataclass
class GroupLoss:
    combined: E.Tensor
    mask_loss: E.Tensor | None
    mask_acc: float | None
    cl_loss: E.Tensor | None


def group_losses(model: VimpacModel, batches, objective: ObjectiveConfig, training=True, rng=None,
                 freeze_bn=False, update_stats=True):
    """Forward every batch in one pass and return one :class:`GroupLoss` per batch.

    Each batch is one contrastive group. The mask loss averages over the
    group's masked positions. When the contrastive branch sees unmasked
    clips while the mask branch is active, a second forward pass feeds it.
    """
    use_mask, use_cl = objective.uses_mask, objective.uses_cl
    sizes = [b.raw.shape[0] for b in batches]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    bn_train = training and not freeze_bn
    masked = np.concatenate([b.masked for b in batches])
    shared = all(b.cl_input_masked for b in batches)

    logits = feats = None
    if use_mask:
        mask = np.concatenate([b.mask for b in batches])
        positions = np.flatnonzero(mask.reshape(-1))
        h, cls = model.backbone(masked, training, rng)
        if positions.size:
            logits = model.token_head(h, positions)
        if use_cl and shared:
            feats = model.cl_head(cls, bn_train, update_stats)
    if use_cl and feats is None:
        cl_in = np.concatenate([b.cl_inputs for b in batches])
        _, cls = model.backbone(cl_in, training, rng)
        feats = model.cl_head(cls, bn_train, update_stats)

    out = []
    row = 0
    for k, b in enumerate(batches):
        ml = acc = cl = None
        if use_mask:
            count = int(b.mask.sum())
            if count:
                targets = b.raw[b.mask]
                ml, acc = mask_nll(logits[row:row + count], targets)
            row += count
        if use_cl:
            n = sizes[k] // 2
            f = feats[offsets[k]:offsets[k] + n]
            f2 = feats[offsets[k] + n:offsets[k + 1]]
            cl = info_nce(f, f2, objective.contrastive.temperature)
        if ml is None and not objective.pure_cl:
            # a group with no maskable cell contributes only its contrastive term
            total = cl * (objective.alpha * objective.contrastive.temperature)
        else:
            total = combined_loss(ml, cl, objective)
        out.append(GroupLoss(total, ml, acc, cl))
    return out


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 4
    accumulation_target: int = 1024
    steps: int = 100
    peak_lr: float = 3e-4
    warmup_ratio: float = 0.05
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    sampler: PairSamplerConfig = field(default_factory=PairSamplerConfig)
    cl_input_masked: bool = True
    freeze_bn: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 4 or self.group_size % 2:
            raise ValueError(f"group_size (2n clips) must be even and >= 4, got {self.group_size}")
        if self.accumulation_target % self.group_size:
            raise ValueError(
                f"accumulation_target {self.accumulation_target} is not a multiple of group_size {self.group_size}"
            )
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    @property
    def micro_batches(self):
        return self.accumulation_target // self.group_size

    @property
    def schedule(self):
        return LrSchedule(self.peak_lr, self.steps, self.warmup_ratio)


def decays(name):
    """Weight decay applies to weight matrices only, not to biases, gains or positional tables."""
    return not (name.endswith(("bias", "gain")) or ".pos_" in name)


@dataclass
class LossReport:
    step: int
    lr: float
    mask_loss: float | None
    mask_acc: float | None
    cl_loss: float | None
    combined_loss: float
    grad_norm: float
    scale: float

    def row(self):
        def fmt(x):
            return "" if x is None else repr(float(x)) if not isinstance(x, int) else str(x)
        return [fmt(getattr(self, k)) for k in METRICS_HEADER]


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


class Trainer:
    """Owns the model's optimiser state and the data RNG for one run."""

    def __init__(self, model: VimpacModel, store: VideoTokenStore, cfg: TrainConfig, params=None):
        self.model = model
        self.store = store
        self.cfg = cfg
        n = cfg.group_size // 2
        if n > len(store):
            raise ValueError(f"group_size {cfg.group_size} needs {n} videos but the store has {len(store)}")
        data_seed, drop_seed = np.random.SeedSequence(cfg.seed).spawn(2)
        self.rng = make_rng(data_seed)
        self.drop_rng = make_rng(drop_seed)
        self.params = params if params is not None else model.named_parameters()
        self.adam = AdamState(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
        self.step_count = 0

    def sample_batches(self):
        n = self.cfg.group_size // 2
        batches = []
        for _ in range(self.cfg.micro_batches):
            idx = self.rng.choice(len(self.store), size=n, replace=False)
            batches.append(build_batch(self.store, idx, self.cfg.sampler, self.cfg.masking, self.rng,
                                       self.cfg.cl_input_masked))
        return batches

    def _zero(self):
        for p in self.model.parameters():
            p.zero_grad()

    def accumulate(self, batches, fused=False):
        """Sum gradients of every micro-batch loss, then average them.

        ``fused=True`` evaluates all micro-batches in one forward pass and
        back-propagates their mean loss; with frozen batch norm and no
        dropout both routes give the same gradients.
        """
        self._zero()
        k = len(batches)
        kwargs = dict(training=True, rng=self.drop_rng, freeze_bn=self.cfg.freeze_bn)
        if fused:
            groups = group_losses(self.model, batches, self.cfg.objective, **kwargs)
            total = groups[0].combined
            for g in groups[1:]:
                total = total + g.combined
            E.backward(total * (1.0 / k))
        else:
            groups = []
            for b in batches:
                (g,) = group_losses(self.model, [b], self.cfg.objective, **kwargs)
                E.backward(g.combined)
                groups.append(g)
            for p in self.model.parameters():
                p.grad /= k
        return groups

    def apply_update(self, groups):
        self.step_count += 1
        step = self.step_count
        combined = _mean([g.combined.item() for g in groups])
        if not math.isfinite(combined):
            raise TrainingDiverged(step, step - 1)
        tensors = list(self.params.values())
        norm = global_norm([p.grad for p in tensors])
        scale = clip_global_norm(tensors, self.cfg.clip_norm)
        lr = lr_at(min(step, self.cfg.steps), self.cfg.schedule)
        adam_step(self.params, self.adam, lr, decays)
        return LossReport(
            step=step, lr=lr,
            mask_loss=_mean([g.mask_loss.item() if g.mask_loss is not None else None for g in groups]),
            mask_acc=_mean([g.mask_acc for g in groups]),
            cl_loss=_mean([g.cl_loss.item() if g.cl_loss is not None else None for g in groups]),
            combined_loss=combined, grad_norm=norm, scale=scale,
        )

    def train_step(self, batches=None, fused=False):
        if batches is None:
            batches = self.sample_batches()
        return self.apply_update(self.accumulate(batches, fused))

    def run(self, steps=None, callback=None):
        reports = []
        for _ in range(steps if steps is not None else self.cfg.steps):
            rep = self.train_step()
            reports.append(rep)
            if callback is not None:
                callback(rep)
        return reports


def write_metrics(reports, path=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in reports:
        w.writerow(r.row())
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def run_pretrain(store: VideoTokenStore, model: VimpacModel, cfg: TrainConfig, log_every=0):
    """Pre-train ``model`` in place; returns the per-step reports."""
    clip_dims = (cfg.sampler.clip_len,) + store[0].grid.dims[1:]
    limits = (model.config.max_t, model.config.max_h, model.config.max_w)
    if any(c > m for c, m in zip(clip_dims, limits)):
        raise ValueError(f"clip dims {clip_dims} exceed the model's positional tables {limits}")
    if store.vocab.vq_size != model.config.vq_size:
        raise ValueError(f"store vq_size {store.vocab.vq_size} != model vq_size {model.config.vq_size}")
    trainer = Trainer(model, store, cfg)

    def progress(rep):
        if log_every and rep.step % log_every == 0:
            log.info("step %d lr %.3g loss %.4f mask_acc %s", rep.step, rep.lr, rep.combined_loss, rep.mask_acc)

    return trainer.run(callback=progress)


# ---------------------------------------------------------------------------
# fine-tuning, crops and evaluation

@dataclass(frozen=True)
class FinetuneConfig:
    batch_size: int = 8
    steps: int = 100
    peak_lr: float = 1e-4
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    beta2: float = 0.999
    clip_norm: float = 1.0
    clip_len: int = 5
    linear_probe: bool = False
    seed: int = 0


def center_crop(grid_tokens, crop_h, crop_w):
    _, h, w = grid_tokens.shape
    i, j = (h - crop_h) // 2, (w - crop_w) // 2
    return grid_tokens[:, i:i + crop_h, j:j + crop_w]


def run_finetune(store: VideoTokenStore, labels, model: VimpacModel, cfg: FinetuneConfig, num_classes=None):
    """Train a zero-initialised classifier on ``labels`` (video id -> class index).

    In linear-probe mode only the classifier is optimised and the backbone
    runs without building a graph.
    """
    missing = [v.video_id for v in store.videos if v.video_id not in labels]
    if missing:
        raise KeyError(f"no label for videos {missing[:5]}")
    classes = num_classes if num_classes is not None else max(labels.values()) + 1
    model.add_classifier(classes)
    params = ({k: v for k, v in model.params.items() if k.startswith("classifier.")}
              if cfg.linear_probe else model.named_parameters())
    adam = AdamState(0.9, cfg.beta2, 1e-8, cfg.weight_decay)
    sched = LrSchedule(cfg.peak_lr, cfg.steps, cfg.warmup_ratio)
    rng = make_rng(cfg.seed)
    ch = min(model.config.max_h, store[0].grid.h_len) if len(store) else model.config.max_h
    cw = min(model.config.max_w, store[0].grid.w_len) if len(store) else model.config.max_w
    pad = store.vocab.pad_id
    y_all = np.array([labels[v.video_id] for v in store.videos])
    reports = []
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(len(store), size=min(cfg.batch_size, len(store)), replace=False)
        clips = []
        for v in idx:
            g = store[v].grid
            s = int(rng.integers(0, max(0, g.t_len - cfg.clip_len) + 1))
            clips.append(center_crop(slice_grid(g, s, cfg.clip_len, pad).tokens, ch, cw))
        ids = np.stack(clips)
        for p in model.parameters():
            p.zero_grad()
        if cfg.linear_probe:
            with E.no_grad():
                _, cls = model.backbone(ids, training=False)
            cls = E.Tensor(cls.data)
        else:
            _, cls = model.backbone(ids, training=True, rng=rng)
        loss = E.cross_entropy(model.classify_head(cls), y_all[idx])
        if not math.isfinite(loss.item()):
            raise TrainingDiverged(step, step - 1)
        E.backward(loss)
        tensors = list(params.values())
        norm = global_norm([p.grad for p in tensors])
        scale = clip_global_norm(tensors, cfg.clip_norm)
        lr = lr_at(step, sched)
        adam_step(params, adam, lr, decays)
        reports.append(LossReport(step, lr, None, None, None, loss.item(), norm, scale))
    return reports


SPATIAL_CROPS = {1: ("center",), 3: ("top-left", "center", "bottom-right")}


@dataclass(frozen=True)
class CropConfig:
    spatial_crops: int = 1
    temporal_crops: int = 10
    flip: bool = False

    def __post_init__(self):
        if self.spatial_crops not in SPATIAL_CROPS:
            raise ValueError(f"spatial_crops must be 1 or 3, got {self.spatial_crops}")
        if self.temporal_crops < 1:
            raise ValueError("temporal_crops must be >= 1")


def temporal_crop_starts(n_frames, clip_len, count):
    """Evenly spaced starts from 0 to ``n_frames - clip_len`` (one start if the video is short)."""
    last = n_frames - clip_len
    if last <= 0:
        return [0]
    if count == 1:
        return [last // 2]
    return sorted({int(round(x)) for x in np.linspace(0, last, count)})


def spatial_crops(tokens, crop_h, crop_w, which):
    _, h, w = tokens.shape
    if crop_h > h or crop_w > w:
        raise ValueError(f"crop {crop_h}x{crop_w} larger than token map {h}x{w}")
    corner = {
        "top-left": (0, 0),
        "center": ((h - crop_h) // 2, (w - crop_w) // 2),
        "bottom-right": (h - crop_h, w - crop_w),
    }
    return [tokens[:, i:i + crop_h, j:j + crop_w] for i, j in (corner[c] for c in which)]


def crop_views(grid: TokenGrid, crop: CropConfig, clip_len, crop_h, crop_w, pad_id):
    views = []
    for s in temporal_crop_starts(grid.t_len, clip_len, crop.temporal_crops):
        clip = slice_grid(grid, s, clip_len, pad_id).tokens
        for view in spatial_crops(clip, crop_h, crop_w, SPATIAL_CROPS[crop.spatial_crops]):
            views.append(view)
            if crop.flip:
                views.append(view[:, :, ::-1])
    return np.stack(views)


def multi_crop_predict(model: VimpacModel, grid: TokenGrid, crop: CropConfig, clip_len, pad_id=None):
    """Mean of the per-crop softmax class scores."""
    pad_id = model.config.vocab.pad_id if pad_id is None else pad_id
    crop_h, crop_w = min(model.config.max_h, grid.h_len), min(model.config.max_w, grid.w_len)
    views = crop_views(grid, crop, clip_len, crop_h, crop_w, pad_id)
    with E.no_grad():
        _, logits = model.forward(views, mode="finetune", training=False)
        probs = E.softmax(logits, axis=-1).data
    return probs.mean(axis=0)


def evaluate(model: VimpacModel, store: VideoTokenStore, labels, crop: CropConfig, clip_len):
    """Top-1 accuracy and per-video score vectors under multi-crop inference."""
    missing = [v.video_id for v in store.videos if v.video_id not in labels]
    if missing:
        raise KeyError(f"no label for videos {missing[:5]}")
    scores = {v.video_id: multi_crop_predict(model, v.grid, crop, clip_len, store.vocab.pad_id) for v in store.videos}
    correct = [int(np.argmax(s)) == labels[vid] for vid, s in scores.items()]
    return float(np.mean(correct)) if correct else float("nan"), scores


def clip_features(model: VimpacModel, ids, training_bn=False):
    """Contrastive-head features without recording a graph or touching running statistics."""
    with E.no_grad():
        _, cls = model.backbone(ids, training=False)
        return model.cl_head(cls, training=training_bn, update_stats=False).data


def pair_retrieval_top1(model: VimpacModel, batch: ClipPairBatch, training_bn=False):
    """Fraction of the ``2n`` clips whose highest dot-product partner is their positive."""
    feats = clip_features(model, batch.cl_inputs, training_bn)
    sims = feats @ feats.T
    np.fill_diagonal(sims, -np.inf)
    n = batch.n
    partner = (np.arange(2 * n) + n) % (2 * n)
    return float((sims.argmax(axis=1) == partner).mean())


def mask_accuracy(model: VimpacModel, batch: ClipPairBatch):
    with E.no_grad():
        positions = np.flatnonzero(batch.mask.reshape(-1))
        if positions.size == 0:
            return float("nan")
        h, _ = model.backbone(batch.masked, training=False)
        logits = model.token_head(h, positions).data
    return float((logits.argmax(axis=-1) == batch.raw[batch.mask]).mean())


# ---------------------------------------------------------------------------
# ablation harness

def ablation_variants(axis, base: TrainConfig):
    """Named training-config variants along one ablation axis."""
    obj = base.objective
    if axis == "masking":
        return [(f"block-{k}", replace(base, masking=replace(base.masking, strategy="block", num_blocks=k)))
                for k in (4, 5, 6)] + [
               (f"iid-{xi}", replace(base, masking=replace(base.masking, strategy="iid", xi=xi)))
               for xi in (0.119, 0.145, 0.170)]
    if axis == "d_max":
        return [(f"d_max={d}", replace(base, sampler=replace(base.sampler, d_max=d))) for d in (math.inf, 30, 10, 0)]
    if axis == "negatives":
        return [(f"group={g}", replace(base, group_size=g, accumulation_target=g * base.micro_batches))
                for g in (4, 8, 16)]
    if axis == "cl_mask":
        out = []
        for mp in (False, True):
            for cl_mask in (False, True):
                o = replace(obj, pure_cl=not mp, alpha=obj.alpha if mp else 1.0)
                out.append((f"MP={int(mp)},CL-Mask={int(cl_mask)}", replace(base, objective=o, cl_input_masked=cl_mask)))
        return out
    if axis == "alpha":
        return [(f"alpha={a}", replace(base, objective=replace(obj, alpha=a, pure_cl=False))) for a in (0.0, 0.5, 1.0, 2.0)] + [
            ("alpha=inf*", replace(base, objective=replace(obj, alpha=1.0, pure_cl=True)))]
    raise ValueError(f"unknown ablation axis {axis!r}")


LAYOUT_VARIANTS = [("TxHxW", "post"), ("T,HxW", "post"), ("T,H,W", "pre"), ("T,H,W", "post"), ("T,H|W", "pre"),
                   ("T,H|W", "post")]


def run_ablation(store, model_config, base: TrainConfig, axis, eval_batches=4):
    """Train one model per variant; return ``(label, last report, retrieval top-1)`` rows."""
    rows = []
    if axis == "layout":
        variants = [(f"{lay}/{ln}", replace(model_config, layout=lay, ln_position=ln), base)
                    for lay, ln in LAYOUT_VARIANTS]
    else:
        variants = [(label, model_config, cfg) for label, cfg in ablation_variants(axis, base)]
    for label, mcfg, tcfg in variants:
        model = VimpacModel(mcfg)
        reports = run_pretrain(store, model, tcfg)
        rng = make_rng(tcfg.seed + 1)
        n = tcfg.group_size // 2
        top1 = np.mean([
            pair_retrieval_top1(model, build_batch(store, rng.choice(len(store), n, replace=False), tcfg.sampler,
                                                   tcfg.masking, rng, tcfg.cl_input_masked))
            for _ in range(eval_batches)
        ])
        rows.append((label, reports[-1], float(top1)))
    return rows
