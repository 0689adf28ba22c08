"""scikit-learn style wrappers around pre-training and classification.

``X`` is a :class:`~vimpac.tokens.VideoTokenStore` or an integer array of
token grids shaped ``(n_videos, T, H, W)``.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import engine as E
from .model import ModelConfig, VimpacModel
from .pipeline import CropConfig, FinetuneConfig, TrainConfig, Trainer, multi_crop_predict, run_finetune
from .tokens import TokenGrid, VideoTokenStore, Vocabulary, slice_grid


def check_store(X, vq_size=None) -> VideoTokenStore:
    """Coerce ``X`` into a non-empty token store, checking the vocabulary size."""
    if isinstance(X, VideoTokenStore):
        store = X
    else:
        arr = np.asarray(X)
        if arr.ndim != 4 or not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"expected a VideoTokenStore or an integer (n, T, H, W) array, got {arr.dtype} {arr.shape}")
        if vq_size is None:
            raise ValueError("vq_size is needed to interpret a raw token array")
        store = VideoTokenStore(Vocabulary(vq_size), tuple(
            (f"video{k:05d}", Fraction(1), TokenGrid(g)) for k, g in enumerate(arr)))
    if len(store) == 0:
        raise ValueError("X holds no videos")
    if vq_size is not None and store.vocab.vq_size != vq_size:
        raise ValueError(f"X has vq_size {store.vocab.vq_size}, the model expects {vq_size}")
    return store


def check_labels(y, store: VideoTokenStore):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != len(store):
        raise ValueError(f"y must be 1-D with one label per video ({len(store)}), got shape {y.shape}")
    return y


def _clip_ids(store: VideoTokenStore, clip_len, max_h, max_w):
    """Centre clip of every video, cropped to the model's spatial size."""
    out = []
    for v in store.videos:
        g = v.grid
        start = max(0, g.t_len - clip_len) // 2
        tokens = slice_grid(g, start, clip_len, store.vocab.pad_id).tokens
        h, w = min(max_h, g.h_len), min(max_w, g.w_len)
        i, j = (g.h_len - h) // 2, (g.w_len - w) // 2
        out.append(tokens[:, i:i + h, j:j + w])
    return np.stack(out)


class VimpacPretrainer(TransformerMixin, BaseEstimator):
    """Pre-trains a model on ``fit``; ``transform`` returns backbone CLS features."""

    def __init__(self, model_config: ModelConfig | None = None, train_config: TrainConfig | None = None):
        self.model_config = model_config
        self.train_config = train_config

    def fit(self, X, y=None):
        mcfg = self.model_config or ModelConfig()
        store = check_store(X, mcfg.vq_size)
        tcfg = self.train_config or TrainConfig()
        self.model_ = VimpacModel(mcfg)
        self.history_ = Trainer(self.model_, store, tcfg).run()
        self.n_features_out_ = mcfg.hidden
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        store = check_store(X, self.model_.config.vq_size)
        cfg = self.model_.config
        clip_len = (self.train_config or TrainConfig()).sampler.clip_len
        ids = _clip_ids(store, min(clip_len, cfg.max_t), cfg.max_h, cfg.max_w)
        with E.no_grad():
            _, cls = self.model_.backbone(ids, training=False)
        return cls.data


class VimpacClassifier(ClassifierMixin, BaseEstimator):
    """Fine-tunes (or linearly probes) a classifier; predictions use multi-crop averaging.

    ``init_model`` optionally supplies pre-trained weights; it is copied,
    never modified.
    """

    def __init__(self, model_config: ModelConfig | None = None, finetune_config: FinetuneConfig | None = None,
                 crop_config: CropConfig | None = None, init_model: VimpacModel | None = None, linear_probe=False):
        self.model_config = model_config
        self.finetune_config = finetune_config
        self.crop_config = crop_config
        self.init_model = init_model
        self.linear_probe = linear_probe

    def fit(self, X, y):
        mcfg = self.model_config or (self.init_model.config if self.init_model is not None else ModelConfig())
        store = check_store(X, mcfg.vq_size)
        y = check_labels(y, store)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        model = VimpacModel(mcfg)
        if self.init_model is not None:
            arrays = {k: v.copy() for k, v in self.init_model.state_arrays().items() if not k.startswith("classifier.")}
            model.load_state_arrays(arrays, strict=False)
        cfg = self.finetune_config or FinetuneConfig()
        if self.linear_probe:
            cfg = FinetuneConfig(**{**cfg.__dict__, "linear_probe": True})
        labels = {v.video_id: int(c) for v, c in zip(store.videos, encoded)}
        self.history_ = run_finetune(store, labels, model, cfg, num_classes=len(self.classes_))
        self.model_ = model
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        store = check_store(X, self.model_.config.vq_size)
        crop = self.crop_config or CropConfig()
        clip_len = (self.finetune_config or FinetuneConfig()).clip_len
        return np.stack([multi_crop_predict(self.model_, v.grid, crop, clip_len, store.vocab.pad_id)
                         for v in store.videos])

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
