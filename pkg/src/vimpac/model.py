"""Divided spatio-temporal transformer over token grids, with the token,
contrastive and classification heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import engine as E
from .engine import Tensor
from .tokens import Vocabulary

LAYOUTS = ("TxHxW", "T,HxW", "T,H,W", "T,H|W")
LN_POSITIONS = ("post", "pre")

# attention blocks used by each layout, in order
_BLOCKS = {
    "TxHxW": ("full",),
    "T,HxW": ("time", "space"),
    "T,H,W": ("time", "height", "width"),
    "T,H|W": ("time", "space"),
}


@dataclass(frozen=True)
class ModelConfig:
    vq_size: int = 8192
    layers: int = 6
    hidden: int = 512
    heads: int = 8
    head_dim: int = 64
    mlp_dim: int = 2048
    max_t: int = 5
    max_h: int = 16
    max_w: int = 16
    dropout: float = 0.1
    layout: str = "T,H|W"
    ln_position: str = "post"
    cl_layers: int = 3
    cl_hidden: int = 4096
    cl_out: int = 256
    num_classes: int = 0
    scale_attention: bool = True
    normalize_features: bool = False
    mask_pad_attention: bool = False
    init_std: float = 0.02
    ln_eps: float = 1e-12
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown attention layout {self.layout!r}; expected one of {LAYOUTS}")
        if self.ln_position not in LN_POSITIONS:
            raise ValueError(f"unknown layer-norm position {self.ln_position!r}")
        for name in ("vq_size", "hidden", "heads", "head_dim", "mlp_dim", "max_t", "max_h", "max_w",
                     "cl_hidden", "cl_out"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.layers < 0 or self.cl_layers < 1 or self.num_classes < 0:
            raise ValueError("layers >= 0, cl_layers >= 1 and num_classes >= 0 are required")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def vocab(self):
        return Vocabulary(self.vq_size)

    @property
    def inner(self):
        return self.heads * self.head_dim

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# attention primitives

def _split_heads(x, heads):
    *lead, n, inner = x.shape
    x = x.reshape(tuple(lead) + (n, heads, inner // heads))
    nd = x.ndim
    return x.transpose(tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def _merge_heads(x):
    nd = x.ndim
    x = x.transpose(tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    *lead, n, h, d = x.shape
    return x.reshape(tuple(lead) + (n, h * d))


def multi_head_attention(queries, context, wq, wk, wv, heads, scale=True, key_bias=None,
                         dropout=0.0, rng=None, training=False):
    """Attention of ``(..., n_q, d)`` queries over a ``(..., n_k, d)`` context.

    Leading dimensions broadcast. Returns the concatenated head outputs
    ``(..., n_q, heads * head_dim)``; ``key_bias`` is a constant ``(..., n_k)``
    additive score offset.
    """
    if context.shape[-2] == 0:
        raise ValueError("attention context must be non-empty")
    q = _split_heads(queries @ wq, heads)
    k = _split_heads(context @ wk, heads)
    v = _split_heads(context @ wv, heads)
    scores = q @ k.transpose(tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    if scale:
        scores = scores * (1.0 / math.sqrt(wq.shape[1] // heads))
    if key_bias is not None:
        scores = scores + key_bias[..., None, None, :]
    probs = E.softmax(scores, axis=-1)
    probs = E.dropout(probs, dropout, rng, training)
    return _merge_heads(probs @ v)


def attn(x, context, w, heads, scale=True):
    """Single-query attention: ``x`` is ``(d,)``, ``context`` is ``(n, d)``."""
    x, context = E.tensor.as_tensor(x), E.tensor.as_tensor(context)
    if context.ndim != 2 or context.shape[0] == 0:
        raise ValueError("attention context must be a non-empty (n, d) array")
    out = multi_head_attention(x.reshape(1, -1), context, w["query"], w["key"], w["value"], heads, scale)
    return out.reshape(-1)


def attn_block_single(x, context, w, heads, scale=True, eps=1e-12):
    """``LayerNorm(x + W_out Attn(x, context))``."""
    a = attn(x, context, w, heads, scale)
    return E.layer_norm(E.tensor.as_tensor(x) + a.reshape(1, -1) @ w["out"], w["ln.gain"], w["ln.bias"], eps).reshape(-1)


def attn_block_dual(x, context_a, context_b, w, heads, scale=True, eps=1e-12):
    """``LayerNorm(x + W_out [Attn(x, context_a), Attn(x, context_b)])`` with shared query/key/value."""
    a = attn(x, context_a, w, heads, scale)
    b = attn(x, context_b, w, heads, scale)
    cat = E.concat([a, b], axis=0).reshape(1, -1)
    return E.layer_norm(E.tensor.as_tensor(x) + cat @ w["out"], w["ln.gain"], w["ln.bias"], eps).reshape(-1)


# ---------------------------------------------------------------------------
# context arrangements: (B, T, H, W, d) <-> (B, groups..., n, d)

# permutation bringing the attended axes last (before d), per context kind
_ARRANGE = {
    "time": (0, 2, 3, 1, 4),    # (B, H, W, T, d)
    "height": (0, 1, 3, 2, 4),  # (B, T, W, H, d)
    "width": (0, 1, 2, 3, 4),   # (B, T, H, W, d)
}


def _to_groups(h, kind):
    """Return (grouped tensor, group-dims, inverse-permutation)."""
    B, T, H, W, d = h.shape
    if kind == "full":
        return h.reshape(B, 1, T * H * W, d)
    if kind == "frame":
        return h.reshape(B, T, H * W, d)
    return h.transpose(_ARRANGE[kind])


def _from_groups(g, kind, shape):
    B, T, H, W, _ = shape
    d = g.shape[-1]
    if kind in ("full", "frame"):
        return g.reshape(B, T, H, W, d)
    perm = _ARRANGE[kind]
    return g.transpose(tuple(np.argsort(perm)))


def _pad_bias(pad, kind):
    """Additive key bias hiding PAD keys, except in all-PAD contexts."""
    if pad is None:
        return None
    B, T, H, W = pad.shape
    if kind == "full":
        p = pad.reshape(B, 1, T * H * W)
    elif kind == "frame":
        p = pad.reshape(B, T, H * W)
    else:
        p = np.transpose(pad, _ARRANGE[kind][:4])
    all_pad = p.all(axis=-1, keepdims=True)
    return np.where(p & ~all_pad, -1e30, 0.0)


class VimpacModel:
    """Backbone plus heads. ``params`` maps names to leaf tensors.

    The token head's output projection is the token embedding itself, so
    there is no separate parameter for it.
    """

    def __init__(self, config: ModelConfig, params=None):
        self.config = config
        self.bn = {f"cl_head.bn{k}": E.BatchNormState(config.cl_hidden, config.bn_momentum, config.bn_eps)
                   for k in range(config.cl_layers - 1)}
        self.params = params if params is not None else init_params(config)

    # -- parameters ---------------------------------------------------------
    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return dict(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self):
        out = {name: p.data for name, p in self.params.items()}
        for name, st in self.bn.items():
            out[name + ".running_mean"] = st.running_mean
            out[name + ".running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays, strict=True):
        arrays = dict(arrays)
        for name, st in self.bn.items():
            if name + ".running_mean" in arrays:
                st.running_mean = np.array(arrays.pop(name + ".running_mean"))
                st.running_var = np.array(arrays.pop(name + ".running_var"))
        missing = set(self.params) - set(arrays)
        unknown = set(arrays) - set(self.params)
        if strict and (missing or unknown):
            raise KeyError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(unknown)}")
        for name, arr in arrays.items():
            if name in self.params:
                if self.params[name].shape != arr.shape:
                    raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {self.params[name].shape}")
                self.params[name].data[...] = arr
        return self

    def block_weights(self, layer, block):
        prefix = f"layer{layer}.{block}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    # -- embedding ---------------------------------------------------------------
    def embed(self, ids):
        """``LayerNorm(token + pos_t + pos_h + pos_w)`` and the CLS start state."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 3:
            ids = ids[None]
        B, T, H, W = ids.shape
        p = self.params
        limits = (p["embed.pos_t"].shape[0], p["embed.pos_h"].shape[0], p["embed.pos_w"].shape[0])
        if T > limits[0] or H > limits[1] or W > limits[2]:
            raise ValueError(
                f"grid dims {(T, H, W)} exceed positional tables {limits}; resize them with interpolate_pos"
            )
        d = self.config.hidden
        x = E.embedding(p["embed.token"], ids)
        pos = (p["embed.pos_t"][:T].reshape(T, 1, 1, d) + p["embed.pos_h"][:H].reshape(1, H, 1, d)
               + p["embed.pos_w"][:W].reshape(1, 1, W, d))
        cls = E.embedding(p["embed.token"], np.full(B, self.config.vocab.cls_id))
        eps = self.config.ln_eps
        h = E.layer_norm(x + pos, p["embed.ln.gain"], p["embed.ln.bias"], eps)
        cls = E.layer_norm(cls, p["embed.ln.gain"], p["embed.ln.bias"], eps)
        return h, cls

    # -- transformer layers -------------------------------------------------------
    def _ln(self, x, name):
        return E.layer_norm(x, self.params[name + ".gain"], self.params[name + ".bias"], self.config.ln_eps)

    def _attend(self, queries, context, w, key_bias, training, rng):
        cfg = self.config
        return multi_head_attention(queries, context, w["query"], w["key"], w["value"], cfg.heads,
                                    cfg.scale_attention, key_bias, cfg.dropout, rng, training)

    def _residual(self, x, delta, ln_name, training, rng):
        delta = E.dropout(delta, self.config.dropout, rng, training)
        if self.config.ln_position == "post":
            return self._ln(x + delta, ln_name)
        return x + delta

    def _single_block(self, h, cls, layer, block, kind, pad, training, rng):
        """Token and CLS outputs of one single-context attention block."""
        name = f"layer{layer}.{block}"
        w = self.block_weights(layer, block)
        pre = self.config.ln_position == "pre"
        src = self._ln(h, name + ".ln") if pre else h
        csrc = self._ln(cls, name + ".ln") if pre else cls
        groups = _to_groups(src, kind)
        bias = _pad_bias(pad, kind)
        out = self._attend(groups, groups, w, bias, training, rng) @ w["out"]
        h_new = self._residual(h, _from_groups(out, kind, h.shape), name + ".ln", training, rng)
        # CLS attends each context group separately; the block outputs are averaged
        B, d = cls.shape
        q = csrc.reshape((B,) + (1,) * (groups.ndim - 2) + (d,))
        c_out = self._attend(q, groups, w, bias, training, rng) @ w["out"]
        c_blocks = self._residual(cls.reshape((B,) + (1,) * (groups.ndim - 2) + (d,)), c_out,
                                  name + ".ln", training, rng)
        cls_new = c_blocks.reshape(B, -1, d).mean(axis=1)
        return h_new, cls_new

    def _dual_block(self, h, cls, layer, pad, training, rng):
        """Spatial block attending the column (height) and row (width) contexts in parallel."""
        name = f"layer{layer}.space"
        w = self.block_weights(layer, "space")
        pre = self.config.ln_position == "pre"
        src = self._ln(h, name + ".ln") if pre else h
        csrc = self._ln(cls, name + ".ln") if pre else cls
        B, T, H, W, d = h.shape
        inner = self.config.inner
        w_a, w_b = w["out"][:inner], w["out"][inner:]
        col = _to_groups(src, "height")  # (B, T, W, H, d)
        row = _to_groups(src, "width")   # (B, T, H, W, d)
        a = _from_groups(self._attend(col, col, w, _pad_bias(pad, "height"), training, rng), "height", h.shape)
        b = self._attend(row, row, w, _pad_bias(pad, "width"), training, rng)
        delta = a @ w_a + b @ w_b
        h_new = self._residual(h, delta, name + ".ln", training, rng)
        # CLS: one output per (t, i, j) pairing column context (t, j) with row context (t, i)
        q = csrc.reshape(B, 1, 1, 1, d)
        ca = self._attend(q, col, w, _pad_bias(pad, "height"), training, rng) @ w_a  # (B, T, W, 1, d)
        cb = self._attend(q, row, w, _pad_bias(pad, "width"), training, rng) @ w_b   # (B, T, H, 1, d)
        c_delta = ca.reshape(B, T, 1, W, d) + cb.reshape(B, T, H, 1, d)
        c_blocks = self._residual(cls.reshape(B, 1, 1, 1, d), c_delta, name + ".ln", training, rng)
        cls_new = c_blocks.reshape(B, -1, d).mean(axis=1)
        return h_new, cls_new

    def _mlp(self, x, layer, training, rng):
        name = f"layer{layer}.mlp"
        p = self.params
        src = self._ln(x, name + ".ln") if self.config.ln_position == "pre" else x
        hid = E.gelu(src @ p[name + ".fc1.weight"] + p[name + ".fc1.bias"])
        out = hid @ p[name + ".fc2.weight"] + p[name + ".fc2.bias"]
        return self._residual(x, out, name + ".ln", training, rng)

    def layer_forward(self, h, cls, layer, pad=None, training=False, rng=None):
        layout = self.config.layout
        if layout == "TxHxW":
            h, cls = self._single_block(h, cls, layer, "full", "full", pad, training, rng)
        else:
            h, cls = self._single_block(h, cls, layer, "time", "time", pad, training, rng)
            if layout == "T,HxW":
                h, cls = self._single_block(h, cls, layer, "space", "frame", pad, training, rng)
            elif layout == "T,H,W":
                h, cls = self._single_block(h, cls, layer, "height", "height", pad, training, rng)
                h, cls = self._single_block(h, cls, layer, "width", "width", pad, training, rng)
            else:
                h, cls = self._dual_block(h, cls, layer, pad, training, rng)
        return self._mlp(h, layer, training, rng), self._mlp(cls, layer, training, rng)

    def backbone(self, ids, training=False, rng=None):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 3:
            ids = ids[None]
        h, cls = self.embed(ids)
        h = E.dropout(h, self.config.dropout, rng, training)
        pad = (ids == self.config.vocab.pad_id) if self.config.mask_pad_attention else None
        for layer in range(self.config.layers):
            h, cls = self.layer_forward(h, cls, layer, pad, training, rng)
        if self.config.ln_position == "pre":
            h, cls = self._ln(h, "final_ln"), self._ln(cls, "final_ln")
        return h, cls

    # -- heads -----------------------------------------------------------------------
    def token_head(self, h, positions=None):
        """Logits over content tokens, ``(..., vq_size)``.

        ``positions`` optionally selects rows of the flattened hidden states
        first, so only those positions are projected.
        """
        p = self.params
        d = self.config.hidden
        flat = h.reshape(-1, d)
        if positions is not None:
            flat = flat[np.asarray(positions, dtype=np.int64)]
        u = E.gelu(flat @ p["token_head.dense.weight"] + p["token_head.dense.bias"])
        u = self._ln(u, "token_head.ln")
        word = p["embed.token"][: self.config.vq_size]
        logits = u @ word.T + p["token_head.word_bias"]
        if positions is None:
            logits = logits.reshape(h.shape[:-1] + (self.config.vq_size,))
        return logits

    def cl_head(self, cls, training=False, update_stats=True):
        """MLP with batch norm and GELU between affine layers; the last layer has a bias."""
        if cls.shape[0] == 0:
            raise ValueError("cl_head needs a non-empty batch")
        p = self.params
        x = cls
        n = self.config.cl_layers
        for k in range(n - 1):
            x = x @ p[f"cl_head.fc{k}.weight"]
            name = f"cl_head.bn{k}"
            x = E.batch_norm(x, p[name + ".gain"], p[name + ".bias"], self.bn[name], training, update_stats)
            x = E.gelu(x)
        x = x @ p[f"cl_head.fc{n - 1}.weight"] + p[f"cl_head.fc{n - 1}.bias"]
        if self.config.normalize_features:
            x = x * E.power(E.tsum(x * x, axis=-1, keepdims=True), -0.5)
        return x

    def classify_head(self, cls):
        if "classifier.weight" not in self.params:
            raise ValueError("model has no classifier; call add_classifier(num_classes) first")
        return cls @ self.params["classifier.weight"] + self.params["classifier.bias"]

    def add_classifier(self, num_classes):
        """Attach a zero-initialised classifier."""
        d = self.config.hidden
        self.params["classifier.weight"] = Tensor(np.zeros((d, num_classes)), requires_grad=True, name="classifier.weight")
        self.params["classifier.bias"] = Tensor(np.zeros(num_classes), requires_grad=True, name="classifier.bias")
        self.config = replace(self.config, num_classes=num_classes)
        return self

    def forward(self, ids, mode="pretrain", training=False, rng=None, positions=None, update_stats=True):
        """Pretrain: ``(token logits, CL features)``. Finetune: ``(None, class logits)``."""
        h, cls = self.backbone(ids, training, rng)
        if mode == "pretrain":
            return self.token_head(h, positions), self.cl_head(cls, training, update_stats)
        if mode == "finetune":
            return None, self.classify_head(cls)
        if mode == "features":
            return h, cls
        raise ValueError(f"unknown mode {mode!r}")

    __call__ = forward


def init_params(config: ModelConfig):
    rng = np.random.default_rng(config.seed)
    std = config.init_std
    d, inner, m = config.hidden, config.inner, config.mlp_dim
    params = {}

    def normal(name, *shape):
        params[name] = rng.normal(0.0, std, shape)

    def zeros(name, *shape):
        params[name] = np.zeros(shape)

    def ln(name, dim=d):
        params[name + ".gain"] = np.ones(dim)
        params[name + ".bias"] = np.zeros(dim)

    normal("embed.token", config.vocab.size, d)
    normal("embed.pos_t", config.max_t, d)
    normal("embed.pos_h", config.max_h, d)
    normal("embed.pos_w", config.max_w, d)
    ln("embed.ln")
    for layer in range(config.layers):
        for block in _BLOCKS[config.layout]:
            prefix = f"layer{layer}.{block}"
            for w in ("query", "key", "value"):
                normal(f"{prefix}.{w}", d, inner)
            dual = config.layout == "T,H|W" and block == "space"
            normal(f"{prefix}.out", 2 * inner if dual else inner, d)
            ln(prefix + ".ln")
        normal(f"layer{layer}.mlp.fc1.weight", d, m)
        zeros(f"layer{layer}.mlp.fc1.bias", m)
        normal(f"layer{layer}.mlp.fc2.weight", m, d)
        zeros(f"layer{layer}.mlp.fc2.bias", d)
        ln(f"layer{layer}.mlp.ln")
    if config.ln_position == "pre":
        ln("final_ln")
    normal("token_head.dense.weight", d, d)
    zeros("token_head.dense.bias", d)
    ln("token_head.ln")
    zeros("token_head.word_bias", config.vq_size)
    width = d
    for k in range(config.cl_layers - 1):
        normal(f"cl_head.fc{k}.weight", width, config.cl_hidden)
        ln(f"cl_head.bn{k}", config.cl_hidden)
        width = config.cl_hidden
    normal(f"cl_head.fc{config.cl_layers - 1}.weight", width, config.cl_out)
    zeros(f"cl_head.fc{config.cl_layers - 1}.bias", config.cl_out)
    if config.num_classes:
        zeros("classifier.weight", d, config.num_classes)
        zeros("classifier.bias", config.num_classes)
    return {name: Tensor(arr, requires_grad=True, name=name) for name, arr in params.items()}


def interpolate_table(table, new_len):
    """Linearly resample a ``(n, d)`` table along its index axis, keeping both endpoints."""
    table = np.asarray(table, dtype=np.float64)
    n = table.shape[0]
    if new_len < 1:
        raise ValueError(f"new length must be >= 1, got {new_len}")
    if new_len == n:
        return table.copy()
    if n == 1:
        return np.repeat(table, new_len, axis=0)
    src = np.array([(n - 1) / 2.0]) if new_len == 1 else np.arange(new_len) * (n - 1) / (new_len - 1)
    lo = np.minimum(np.floor(src).astype(int), n - 2)
    frac = (src - lo)[:, None]
    return table[lo] * (1.0 - frac) + table[lo + 1] * frac


def interpolate_pos(model: VimpacModel, new_dims):
    """Resize the three positional tables in place to ``(t, h, w)`` and update the config."""
    new_dims = tuple(int(x) for x in new_dims)
    if len(new_dims) != 3 or min(new_dims) < 1:
        raise ValueError(f"new dims must be three positive integers, got {new_dims}")
    for axis, n in zip(("t", "h", "w"), new_dims):
        name = f"embed.pos_{axis}"
        model.params[name] = Tensor(interpolate_table(model.params[name].data, n), requires_grad=True, name=name)
    model.config = replace(model.config, max_t=new_dims[0], max_h=new_dims[1], max_w=new_dims[2])
    return model
