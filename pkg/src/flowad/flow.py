"""Invertible flow over C x H x W feature maps with exact log-det tracking.

The model alternates two block kinds:

* ChannelMix: an invertible C x C matrix applied as a 1x1 convolution at
  every spatial position. Parameterized as W = P L (U + diag(sign*exp(d))) P^T
  with a fixed permutation P sampled at init, unit lower-triangular L and
  strictly upper-triangular U, so log|det W| = sum(d) and invertibility is
  guaranteed. The P...P^T conjugation keeps the fresh model an exact
  identity map while still varying the triangular basis per block.
* CouplingBlock: transforms one channel half conditioned on the other
  through a two-layer 1x1-conv subnet emitting scale logits s and
  translation t. Effective log-scale is soft-clamped to alpha*tanh(s/alpha).
  The transformed half alternates between consecutive blocks.

A fresh model (zero-initialized subnet output layers, identity mixes) is
the identity transform with logdet 0.

Checkpoint file layout (little-endian), shared with the projection /
prediction heads:

    magic   b"CLFW"
    u32     format version (1)
    u32 x4  C, H, W, n_blocks
    u32     subnet hidden width
    f64     clamp alpha
    u8      has_heads flag
    [u32x3  projection dims, u32x3 prediction dims]   if has_heads
    per mix block: u32 x C permutation, i8 x C diagonal signs
    u64     parameter count
    f64 x n parameters, in block order (mix: L, U, d; coupling: W1, b1,
            W2, b2), then head parameters (projection W1, b1, W2, b2,
            prediction W1, b1, W2, b2) if present

Round-trips are bit-exact.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from flowad import tensor as T
from flowad.tensor import Tensor

CHECKPOINT_MAGIC = b"CLFW"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class FlowOutput:
    """z = f(x) plus per-sample log|det dz/dx|."""
    z: Tensor          # (B, C, H, W)
    logdet: Tensor     # (B,)


def _to_channels_last_2d(x, B, C, H, W):
    # (B, C, H, W) -> (B*H*W, C)
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (B * H * W, C))


def _from_channels_last_2d(x2d, B, C, H, W):
    # (B*H*W, C) -> (B, C, H, W)
    return T.transpose(T.reshape(x2d, (B, H, W, C)), (0, 3, 1, 2))


class ChannelMix:
    def __init__(self, C, rng):
        self.C = C
        self.perm = rng.permutation(C)
        self.sign = np.ones(C)
        self.L = Tensor(np.zeros((C, C)), requires_grad=True)
        self.U = Tensor(np.zeros((C, C)), requires_grad=True)
        self.logdiag = Tensor(np.zeros(C), requires_grad=True)
        self._lower_mask = np.tril(np.ones((C, C)), -1)
        self._upper_mask = np.triu(np.ones((C, C)), 1)
        self._eye = np.eye(C)
        P = np.zeros((C, C))
        P[np.arange(C), self.perm] = 1.0
        self._P = Tensor(P)
        self._Pt = Tensor(P.T)

    def params(self):
        return [self.L, self.U, self.logdiag]

    def weight(self):
        """Assemble W as a differentiable expression."""
        C = self.C
        L = self.L * Tensor(self._lower_mask) + Tensor(self._eye)
        d = T.exp(self.logdiag) * Tensor(self.sign)
        diag = (T.reshape(d, (C, 1)) @ Tensor(np.ones((1, C)))) * Tensor(self._eye)
        U = self.U * Tensor(self._upper_mask) + diag
        return self._P @ (L @ U) @ self._Pt

    def weight_np(self):
        C = self.C
        L = self.L.data * self._lower_mask + self._eye
        U = self.U.data * self._upper_mask + np.diag(self.sign * np.exp(self.logdiag.data))
        P = self._P.data
        return P @ (L @ U) @ P.T

    def forward(self, x, B, C, H, W):
        W_t = self.weight()
        x2d = _to_channels_last_2d(x, B, C, H, W)
        y2d = x2d @ T.transpose(W_t)
        y = _from_channels_last_2d(y2d, B, C, H, W)
        # spatially uniform: H*W * log|det W| for every sample
        ld = T.affine(self.logdiag.sum(), float(H * W), 0.0)
        ones = Tensor(np.ones((B, 1)))
        logdet = T.reshape(ones @ T.reshape(ld, (1, 1)), (B,))
        return y, logdet

    def inverse_np(self, z):
        Wm = self.weight_np()
        det = np.linalg.det(Wm)
        assert abs(det) > 0.0, "ChannelMix weight became singular"
        B, C, H, W = z.shape
        z2d = z.transpose(0, 2, 3, 1).reshape(-1, C)
        x2d = np.linalg.solve(Wm, z2d.T).T
        return x2d.reshape(B, H, W, C).transpose(0, 3, 1, 2)


class CouplingBlock:
    def __init__(self, C, hidden, alpha, swap, rng):
        self.C = C
        self.alpha = float(alpha)
        self.swap = bool(swap)          # which half is transformed
        self.n_cond = math.ceil(C / 2) if not swap else C - math.ceil(C / 2)
        self.n_trans = C - self.n_cond
        scale = 1.0 / math.sqrt(self.n_cond)
        self.W1 = Tensor(rng.standard_normal((self.n_cond, hidden)) * scale, requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        # zero-initialized output layer: the block starts as identity
        self.W2 = Tensor(np.zeros((hidden, 2 * self.n_trans)), requires_grad=True)
        self.b2 = Tensor(np.zeros(2 * self.n_trans), requires_grad=True)

    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def _split_sizes(self):
        first = math.ceil(self.C / 2)
        if self.swap:
            return first, self.C - first, True   # transform first, condition on rest
        return first, self.C - first, False      # condition on first, transform rest

    def _subnet(self, cond2d):
        h = T.relu(T.add_bias(cond2d @ self.W1, self.b1))
        st = T.add_bias(h @ self.W2, self.b2)
        s = T.narrow(st, 1, 0, self.n_trans)
        t = T.narrow(st, 1, self.n_trans, self.n_trans)
        # soft clamp keeps log-scales in (-alpha, alpha)
        s = T.affine(T.tanh(T.affine(s, 1.0 / self.alpha, 0.0)), self.alpha, 0.0)
        return s, t

    def forward(self, x, B, C, H, W):
        first, rest, transform_first = self._split_sizes()
        xa = T.narrow(x, 1, 0, first)
        xb = T.narrow(x, 1, first, rest)
        cond, trans = (xb, xa) if transform_first else (xa, xb)
        n_c, n_t = (rest, first) if transform_first else (first, rest)

        cond2d = _to_channels_last_2d(cond, B, n_c, H, W)
        trans2d = _to_channels_last_2d(trans, B, n_t, H, W)
        s, t = self._subnet(cond2d)
        y2d = trans2d * T.exp(s) + t
        y_t = _from_channels_last_2d(y2d, B, n_t, H, W)

        y = T.concat([y_t, cond] if transform_first else [cond, y_t], axis=1)
        logdet = T.reshape(s, (B, H * W * n_t)).sum(axes=1)
        return y, logdet

    def _subnet_np(self, cond2d):
        h = np.maximum(cond2d @ self.W1.data + self.b1.data, 0.0)
        st = h @ self.W2.data + self.b2.data
        s, t = st[:, :self.n_trans], st[:, self.n_trans:]
        s = self.alpha * np.tanh(s / self.alpha)
        return s, t

    def inverse_np(self, z):
        B, C, H, W = z.shape
        first, rest, transform_first = self._split_sizes()
        za, zb = z[:, :first], z[:, first:]
        cond, trans = (zb, za) if transform_first else (za, zb)
        n_t = first if transform_first else rest
        cond2d = cond.transpose(0, 2, 3, 1).reshape(-1, cond.shape[1])
        trans2d = trans.transpose(0, 2, 3, 1).reshape(-1, n_t)
        s, t = self._subnet_np(cond2d)
        x2d = (trans2d - t) * np.exp(-s)
        x_t = x2d.reshape(B, H, W, n_t).transpose(0, 3, 1, 2)
        if transform_first:
            return np.concatenate([x_t, cond], axis=1)
        return np.concatenate([cond, x_t], axis=1)


class FlowModel:
    """Alternating ChannelMix / CouplingBlock stack over (C, H, W) maps."""

    def __init__(self, blocks, input_shape, n_blocks, hidden, alpha):
        self.blocks = blocks
        self.input_shape = tuple(input_shape)    # (C, H, W)
        self.n_blocks = n_blocks
        self.hidden = hidden
        self.alpha = alpha

    def params(self):
        out = []
        for b in self.blocks:
            out.extend(b.params())
        return out

    def forward(self, x):
        return flow_forward(self, x)

    def inverse(self, z):
        return flow_inverse(self, z)


def init_flow(C, H, W, n_blocks=8, hidden_ratio=1.0, alpha=1.9, seed=0):
    """Build a fresh model (identity map, logdet 0), deterministic in seed."""
    if C < 2:
        raise ValueError("flow needs C >= 2 for channel coupling")
    if n_blocks < 1:
        raise ValueError("n_blocks must be >= 1")
    rng = np.random.default_rng(seed)
    hidden = max(2, int(round(hidden_ratio * C)))
    blocks = []
    for i in range(n_blocks):
        blocks.append(ChannelMix(C, rng))
        blocks.append(CouplingBlock(C, hidden, alpha, swap=(i % 2 == 1), rng=rng))
    return FlowModel(blocks, (C, H, W), n_blocks, hidden, alpha)


def flow_forward(model, x):
    """Map x (B, C, H, W) to latent z with per-sample logdet, differentiably."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 4 or x.shape[1:] != model.input_shape:
        raise ValueError(f"input shape {x.shape} does not match model {model.input_shape}")
    B = x.shape[0]
    C, H, W = model.input_shape
    logdet = Tensor(np.zeros(B))
    for block in model.blocks:
        x, ld = block.forward(x, B, C, H, W)
        logdet = logdet + ld
    return FlowOutput(z=x, logdet=logdet)


def flow_inverse(model, z):
    """Invert the flow on numpy data (no gradients)."""
    z = np.asarray(z, dtype=np.float64)
    squeeze = False
    if z.ndim == 3:
        z = z[None]
        squeeze = True
    if z.shape[1:] != model.input_shape:
        raise ValueError(f"latent shape {z.shape} does not match model {model.input_shape}")
    x = z
    for block in reversed(model.blocks):
        x = block.inverse_np(x)
    return x[0] if squeeze else x


# -- checkpoint I/O ------------------------------------------------------------

def save_checkpoint(path, model, heads=None):
    """Write the flow (and optionally projection/prediction heads) to disk.

    heads: (ProjectionHead, PredictionHead) or None.
    """
    C, H, W = model.input_shape
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    chunks.append(struct.pack("<IIII", C, H, W, model.n_blocks))
    chunks.append(struct.pack("<I", model.hidden))
    chunks.append(struct.pack("<d", model.alpha))
    chunks.append(struct.pack("<B", 1 if heads is not None else 0))
    if heads is not None:
        proj, pred = heads
        chunks.append(struct.pack("<III", *proj.dims))
        chunks.append(struct.pack("<III", *pred.dims))
    for block in model.blocks:
        if isinstance(block, ChannelMix):
            chunks.append(np.asarray(block.perm, dtype="<u4").tobytes())
            chunks.append(np.asarray(block.sign, dtype="<i1").tobytes())
    params = list(model.params())
    if heads is not None:
        params.extend(heads[0].params())
        params.extend(heads[1].params())
    n = sum(p.size for p in params)
    chunks.append(struct.pack("<Q", n))
    for p in params:
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    """Read a checkpoint; returns (model, heads_or_None)."""
    from flowad.heads import PredictionHead, ProjectionHead

    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError("checkpoint truncated")
        out = blob[off:off + n]
        off += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    C, H, W, n_blocks = struct.unpack("<IIII", take(16))
    (hidden,) = struct.unpack("<I", take(4))
    (alpha,) = struct.unpack("<d", take(8))
    (has_heads,) = struct.unpack("<B", take(1))
    heads = None
    if has_heads:
        proj_dims = struct.unpack("<III", take(12))
        pred_dims = struct.unpack("<III", take(12))

    model = init_flow(C, H, W, n_blocks=n_blocks, hidden_ratio=hidden / C, alpha=alpha, seed=0)
    model.hidden = hidden
    for block in model.blocks:
        if isinstance(block, ChannelMix):
            block.perm = np.frombuffer(take(4 * C), dtype="<u4").astype(np.int64)
            block.sign = np.frombuffer(take(C), dtype="<i1").astype(np.float64)
            P = np.zeros((C, C))
            P[np.arange(C), block.perm] = 1.0
            block._P = Tensor(P)
            block._Pt = Tensor(P.T)

    (n,) = struct.unpack("<Q", take(8))
    params = list(model.params())
    if has_heads:
        proj = ProjectionHead(proj_dims[0], hidden=proj_dims[1], out=proj_dims[2], seed=0)
        pred = PredictionHead(pred_dims[0], hidden=pred_dims[1], classes=pred_dims[2], seed=0)
        heads = (proj, pred)
        params.extend(proj.params())
        params.extend(pred.params())
    if n != sum(p.size for p in params):
        raise CheckpointError(f"parameter count mismatch: file has {n}")
    for p in params:
        raw = np.frombuffer(take(8 * p.size), dtype="<f8")
        p.data = raw.reshape(p.shape).copy()
    if off != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return model, heads
