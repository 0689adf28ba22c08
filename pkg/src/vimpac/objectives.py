"""Masked-token NLL, symmetric InfoNCE over clip pairs, and their combination."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .engine import Tensor


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    n: int = 2

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.n < 2:
            raise ValueError(f"n must be >= 2, got {self.n}")


@dataclass(frozen=True)
class ObjectiveConfig:
    """``alpha`` weights the contrastive term; ``pure_cl`` drops the mask term
    and uses ``alpha = 1`` (the "alpha = infinity" ablation)."""

    alpha: float = 1.0
    pure_cl: bool = False
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")

    @property
    def uses_mask(self):
        return not self.pure_cl

    @property
    def uses_cl(self):
        return self.pure_cl or self.alpha > 0


def _targets_to_arrays(logits, targets):
    if isinstance(targets, dict):
        if not targets:
            raise ValueError("mask_nll needs at least one target")
        keys = sorted(targets)
        lead = logits.shape[:-1]
        rows = np.ravel_multi_index(tuple(np.array(keys).T), lead)
        ids = np.array([targets[k] for k in keys], dtype=np.int64)
        return logits.reshape(-1, logits.shape[-1])[rows], ids
    ids = np.asarray(targets, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise ValueError("mask_nll needs at least one target")
    return logits.reshape(-1, logits.shape[-1]), ids


def mask_nll(logits, targets):
    """Mean negative log-likelihood of the original tokens at masked positions.

    ``targets`` is either a ``{position: id}`` map indexing the leading axes
    of ``logits`` or an id array aligned with the rows of ``logits``. Returns
    ``(loss tensor, accuracy)``; accuracy breaks argmax ties toward the lowest id.
    """
    logits = E.tensor.as_tensor(logits)
    rows, ids = _targets_to_arrays(logits, targets)
    vocab = rows.shape[-1]
    if ids.min() < 0 or ids.max() >= vocab:
        raise ValueError(f"target ids must lie in [0, {vocab})")
    loss = E.nll(E.log_softmax(rows, axis=-1), ids)
    acc = float((rows.data.argmax(axis=-1) == ids).mean())
    return loss, acc


def info_nce(f, f_prime, temperature=0.1):
    """Symmetric InfoNCE: clip ``i`` of ``f`` is positive with ``f_prime[i]``.

    The denominator of each term holds the ``2n - 1`` other clips of the
    batch: the other ``n - 1`` same-side clips and all ``n`` opposite-side
    clips (the positive included). Returns the sum of the two directional
    means.
    """
    f, f_prime = E.tensor.as_tensor(f), E.tensor.as_tensor(f_prime)
    if f.shape != f_prime.shape or f.ndim != 2:
        raise E.ShapeError(f"info_nce: feature shapes {f.shape} and {f_prime.shape} must match (n, k)")
    n = f.shape[0]
    if n < 2:
        raise ValueError(f"info_nce needs n >= 2 pairs, got {n}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    inv = 1.0 / temperature
    cross = (f @ f_prime.T) * inv          # cross[i, k] = f_i . f'_k
    same = (f @ f.T) * inv
    same_p = (f_prime @ f_prime.T) * inv
    no_self = np.where(np.eye(n, dtype=bool), -np.inf, 0.0)
    targets = np.arange(n)
    fwd = E.log_softmax(E.concat([cross, same + no_self], axis=1), axis=1)
    bwd = E.log_softmax(E.concat([cross.T, same_p + no_self], axis=1), axis=1)
    return E.nll(fwd, targets) + E.nll(bwd, targets)


def combined_loss(mask_loss, cl_loss, cfg: ObjectiveConfig):
    """``mask + alpha * temperature * cl``; pure-CL mode returns ``temperature * cl``."""
    gamma = cfg.contrastive.temperature
    if cfg.pure_cl:
        return cl_loss * gamma
    if cfg.alpha == 0 or cl_loss is None:
        return mask_loss
    return mask_loss + cl_loss * (cfg.alpha * gamma)
