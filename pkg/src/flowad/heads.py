"""Projection and prediction heads plus masked spatial pooling.

Both heads are two linear layers and are shared verbatim between the
positive and negative pathways during training (one object, one set of
parameter tensors). `access_count` increments on every forward call so
inference paths can prove they never touch head parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from flowad import tensor as T
from flowad.tensor import Tensor


@dataclass
class AnomalyMask:
    """Binary rectangle mask at some resolution, with its box coords."""
    mask: np.ndarray                      # (H, W) of {0, 1}
    box: tuple = None                     # (row0, col0, height, width)

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask values must be 0/1")
        if self.mask.sum() < 1:
            raise ValueError("mask must cover at least one position")
        if self.box is not None:
            r, c, h, w = self.box
            rect = np.zeros_like(self.mask)
            rect[r:r + h, c:c + w] = 1
            if not np.array_equal(rect, self.mask):
                raise ValueError("mask is not exactly the box rectangle")

    @property
    def popcount(self):
        return int(self.mask.sum())


def full_mask(H, W):
    return AnomalyMask(np.ones((H, W), dtype=np.uint8), box=(0, 0, H, W))


def masked_pool(Z, mask):
    """Per-channel mean of Z (C, H, W) over mask==1 positions."""
    if isinstance(mask, AnomalyMask):
        m = mask.mask
    else:
        m = np.asarray(mask)
    if not isinstance(Z, Tensor):
        Z = Tensor(Z)
    C, H, W = Z.shape
    if m.shape != (H, W):
        raise ValueError(f"mask shape {m.shape} does not match feature map {(H, W)}")
    count = float(m.sum())
    if count < 1:
        raise ValueError("empty mask")
    weights = Tensor((m.reshape(H * W, 1) / count).astype(np.float64))
    pooled = T.reshape(Z, (C, H * W)) @ weights
    return T.reshape(pooled, (C,))


def global_pool(Z):
    """Spatial mean per channel (all-ones mask)."""
    C, H, W = Z.shape
    return masked_pool(Z, np.ones((H, W)))


def pool_batch(Z_batch, masks):
    """Pool each sample of a (B, C, H, W) tensor with its own mask; returns (B, C)."""
    B, C, H, W = Z_batch.shape
    rows = []
    for i, mask in enumerate(masks):
        zi = T.reshape(T.narrow(Z_batch, 0, i, 1), (C, H, W))
        rows.append(T.reshape(masked_pool(zi, mask), (1, C)))
    return T.concat(rows, axis=0)


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, (fan_in, fan_out))


class _TwoLayerHead:
    def __init__(self, c_in, hidden, c_out, seed):
        rng = np.random.default_rng(seed)
        self.dims = (c_in, hidden, c_out)
        self.W1 = Tensor(_glorot(rng, c_in, hidden), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.W2 = Tensor(_glorot(rng, hidden, c_out), requires_grad=True)
        self.b2 = Tensor(np.zeros(c_out), requires_grad=True)
        self.access_count = 0

    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def __call__(self, v):
        """Apply to a (C,) vector or a (K, C) batch."""
        self.access_count += 1
        if not isinstance(v, Tensor):
            v = Tensor(v)
        single = v.ndim == 1
        if single:
            v = T.reshape(v, (1, v.shape[0]))
        if v.shape[1] != self.dims[0]:
            raise ValueError(f"input dim {v.shape[1]} != head dim {self.dims[0]}")
        h = T.relu(T.add_bias(v @ self.W1, self.b1))
        out = T.add_bias(h @ self.W2, self.b2)
        return T.reshape(out, (self.dims[2],)) if single else out


class ProjectionHead(_TwoLayerHead):
    """linear -> ReLU -> linear, C -> C_p -> C_p."""

    def __init__(self, c_in, hidden=None, out=None, seed=0):
        hidden = c_in if hidden is None else hidden
        out = hidden if out is None else out
        super().__init__(c_in, hidden, out, seed)


class PredictionHead(_TwoLayerHead):
    """Two-layer binary classifier, C -> C -> 2 raw logits."""

    def __init__(self, c_in, hidden=None, classes=2, seed=0):
        hidden = c_in if hidden is None else hidden
        super().__init__(c_in, hidden, classes, seed)


def project(head, v):
    return head(v)


def predict(head, v):
    return head(v)
