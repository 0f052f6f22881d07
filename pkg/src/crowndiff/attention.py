"""Inter-tooth attention with ordinal relative positional encodings.

Teeth are laid out along the fixed zig-zag arch order, so the signed index
difference between two teeth is a proxy for their anatomical distance.
Each ordered pair (i, j) maps to a 3-vector feature (log-compressed
positive distance, log-compressed negative distance, self-relation flag); a
small MLP turns that feature into per-head query/key/value bias vectors
that enter the attention scores and the value aggregation.  The layer adds
its multi-head output (after the output projection) as a residual to the
input features.

Rows are internally canonicalized by ordinal index before the attention
math runs, which makes the layer exactly equivariant to permutations of
(rows, indices, mask) — identical outputs bit for bit, not just to rounding.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, masked_softmax

RPE_HIDDEN = 16


def rpe_feature(i: int, j: int) -> np.ndarray:
    """Relative-position feature for ordinal indices i, j in [0, 27]."""
    if not (0 <= i <= 27 and 0 <= j <= 27):
        raise ValueError(f"ordinal index out of range: ({i}, {j})")
    delta = float(i - j)
    return np.array(
        [
            math.log1p(max(delta, 0.0)),
            math.log1p(max(-delta, 0.0)),
            1.0 if delta == 0.0 else 0.0,
        ]
    )


def rpe_feature_matrix(indices) -> np.ndarray:
    """(K, K, 3) relative-position features for every ordered index pair."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("indices must be one-dimensional")
    if np.any((idx < 0) | (idx > 27)):
        raise ValueError("ordinal indices must lie in [0, 27]")
    delta = idx[:, None] - idx[None, :]
    pos = np.log1p(np.maximum(delta, 0))
    neg = np.log1p(np.maximum(-delta, 0))
    same = (delta == 0).astype(np.float64)
    return np.stack([pos, neg, same], axis=-1)


class InterToothAttention:
    """One multi-head attention layer over per-tooth latent vectors."""

    def __init__(self, channels: int, heads: int, rng: np.random.Generator,
                 init_scale: float = 0.1):
        if channels % heads != 0:
            raise ValueError(f"channels ({channels}) must divide by heads ({heads})")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads

        def init(*shape):
            return Tensor(init_scale * rng.standard_normal(shape), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        c, hf3 = channels, 3 * channels
        self.w_q, self.b_q = init(c, c), zeros(c)
        self.w_k, self.b_k = init(c, c), zeros(c)
        self.w_v, self.b_v = init(c, c), zeros(c)
        self.w_out, self.b_out = init(c, c), zeros(c)
        # Shared MLP from pair features to per-head (q, k, v) bias vectors.
        self.rpe_w1, self.rpe_b1 = init(RPE_HIDDEN, 3), zeros(RPE_HIDDEN)
        self.rpe_w2, self.rpe_b2 = init(hf3, RPE_HIDDEN), zeros(hf3)

    def params(self, prefix: str = "") -> dict:
        names = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v",
                 "w_out", "b_out", "rpe_w1", "rpe_b1", "rpe_w2", "rpe_b2")
        return {prefix + n: getattr(self, n) for n in names}

    def _pair_biases(self, indices: np.ndarray):
        """RPE bias tensors p_q, p_k, p_v, each (K, K, H, F)."""
        k = len(indices)
        feats = Tensor(rpe_feature_matrix(indices).reshape(k * k, 3))
        hidden = (feats @ self.rpe_w1.transpose(1, 0) + self.rpe_b1).tanh()
        out = hidden @ self.rpe_w2.transpose(1, 0) + self.rpe_b2
        split = out.reshape(k, k, 3, self.heads, self.head_dim)
        return split[:, :, 0], split[:, :, 1], split[:, :, 2]

    def forward(self, z: Tensor, indices, key_mask=None) -> Tensor:
        """Attend across teeth and return the residual-updated latents.

        Parameters
        ----------
        z : Tensor, (K, C)
            Per-tooth latent vectors, K <= 28.
        indices : int array, (K,)
            Zig-zag ordinal index of each row; must be unique.
        key_mask : bool array, (K,), optional
            True marks rows that may be attended to.  Masked columns get
            attention weight exactly 0; queries run for every row.
        """
        idx = np.asarray(indices, dtype=np.int64)
        k, c = z.shape
        if idx.shape != (k,):
            raise ValueError("indices must have one entry per row")
        if len(np.unique(idx)) != k:
            raise ValueError("duplicate ordinal indices")
        if k > 28:
            raise ValueError("at most 28 teeth per forward pass")
        if np.isnan(z.data).any():
            raise ValueError("NaN in attention input")
        mask = (
            np.ones(k, dtype=bool)
            if key_mask is None
            else np.asarray(key_mask, dtype=bool)
        )
        if not mask.any():
            raise ValueError("every attention column is masked out")

        # Canonical ordering by ordinal index makes the softmax/value
        # reductions independent of the caller's row order.
        perm = np.argsort(idx)
        unperm = np.argsort(perm)
        zc = z.take(perm, axis=0)
        out = self._attend(zc, idx[perm], mask[perm])
        return out.take(unperm, axis=0)

    def _attend(self, z: Tensor, idx: np.ndarray, mask: np.ndarray) -> Tensor:
        k = z.shape[0]
        h, f = self.heads, self.head_dim

        def project(w, b):
            return (z @ w.transpose(1, 0) + b).reshape(k, h, f).transpose(1, 0, 2)

        q = project(self.w_q, self.b_q)   # (H, K, F)
        kk = project(self.w_k, self.b_k)
        v = project(self.w_v, self.b_v)
        p_q, p_k, p_v = self._pair_biases(idx)  # each (K, K, H, F)

        scores = (q @ kk.transpose(0, 2, 1)) * (1.0 / math.sqrt(f))
        q_rows = q.transpose(1, 0, 2).reshape(k, 1, h, f)
        scores = scores + (q_rows * p_k).sum(axis=3).transpose(2, 0, 1)
        k_cols = kk.transpose(1, 0, 2).reshape(1, k, h, f)
        scores = scores + (p_q * k_cols).sum(axis=3).transpose(2, 0, 1)

        alpha = masked_softmax(scores, mask[None, None, :])  # (H, K, K)
        pooled = (alpha @ v).transpose(1, 0, 2)              # (K, H, F)
        pooled = pooled + (alpha.transpose(1, 2, 0).reshape(k, k, h, 1) * p_v).sum(axis=1)
        merged = pooled.reshape(k, self.channels)
        return z + (merged @ self.w_out.transpose(1, 0) + self.b_out)

    def attention_weights(self, z: Tensor, indices, key_mask=None) -> np.ndarray:
        """(H, K, K) attention weight matrix, rows in the caller's order."""
        idx = np.asarray(indices, dtype=np.int64)
        mask = (
            np.ones(len(idx), dtype=bool)
            if key_mask is None
            else np.asarray(key_mask, dtype=bool)
        )
        perm = np.argsort(idx)
        unperm = np.argsort(perm)
        zc = Tensor(z.data[perm] if isinstance(z, Tensor) else np.asarray(z)[perm])
        k = zc.shape[0]
        h, f = self.heads, self.head_dim

        def project(w, b):
            return (zc @ w.transpose(1, 0) + b).reshape(k, h, f).transpose(1, 0, 2)

        q = project(self.w_q, self.b_q)
        kk = project(self.w_k, self.b_k)
        p_q, p_k, _ = self._pair_biases(idx[perm])
        scores = (q @ kk.transpose(0, 2, 1)) * (1.0 / math.sqrt(f))
        scores = scores + (q.transpose(1, 0, 2).reshape(k, 1, h, f) * p_k).sum(axis=3).transpose(2, 0, 1)
        scores = scores + (p_q * kk.transpose(1, 0, 2).reshape(1, k, h, f)).sum(axis=3).transpose(2, 0, 1)
        alpha = masked_softmax(scores, mask[perm][None, None, :]).data
        return alpha[:, unperm][:, :, unperm]
