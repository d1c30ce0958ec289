"""Attention kernels: linear, neighborhood-restricted pairwise, and softmax.

The linear kernel replaces the usual N-by-M weight matrix with two small
accumulators built from the positive feature map phi(x) = elu(x) + 1:

    K_v = phi(K)^T V       (C' x C')
    K_m = sum_j phi(K_j)   (C',)

so the output row for query i is (phi(Q_i) K_v) / (phi(Q_i) . K_m), at total
cost O(M C'^2 + N C'^2).  Because phi is strictly positive the denominator
never vanishes.

The pairwise kernel applies the same ratio restricted to matched neighborhood
index sets and scatters the results back: rows not covered by any
neighborhood stay exactly zero, and rows covered by several neighborhoods
receive the plain sum of the per-neighborhood outputs (no renormalization).

The softmax kernel is the quadratic reference used as a correctness oracle
and as the baseline in complexity benchmarks; it deliberately materializes
the full N-by-M weight matrix.

All kernels accept either numpy arrays or autodiff Tensors in the triplet;
numpy in, numpy out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor


@dataclass
class ProjectedTriplet:
    """Query/key/value matrices sharing column count; K and V share rows."""

    q: object  # N x C' array or Tensor
    k: object  # M x C'
    v: object  # M x C'

    def __post_init__(self):
        qs, ks, vs = (_shape(x) for x in (self.q, self.k, self.v))
        if ks[0] != vs[0]:
            raise ValueError(f"key/value row mismatch: {ks[0]} vs {vs[0]}")
        if not (qs[1] == ks[1] == vs[1]):
            raise ValueError(f"column mismatch: q={qs[1]} k={ks[1]} v={vs[1]}")


@dataclass
class NeighborhoodPair:
    """A matched seed plus the per-side index sets attending to each other."""

    seed: tuple  # (source_index, target_index)
    source_set: np.ndarray
    target_set: np.ndarray

    def __post_init__(self):
        self.source_set = np.asarray(self.source_set, dtype=np.intp)
        self.target_set = np.asarray(self.target_set, dtype=np.intp)
        if self.source_set.size == 0 or self.target_set.size == 0:
            raise ValueError("neighborhood sides must be non-empty")
        if self.seed[0] not in self.source_set or self.seed[1] not in self.target_set:
            raise ValueError("seed indices must belong to their own sets")


def _shape(x):
    return x.data.shape if isinstance(x, Tensor) else np.shape(x)


def _is_tensor_triplet(t: ProjectedTriplet) -> bool:
    return any(isinstance(x, Tensor) for x in (t.q, t.k, t.v))


def _dispatch(kernel_core, t: ProjectedTriplet, *args):
    """Run a Tensor-level core; unwrap to numpy when inputs are plain arrays."""
    if _is_tensor_triplet(t):
        return kernel_core(as_tensor(t.q), as_tensor(t.k), as_tensor(t.v), *args)
    with ad.no_grad():
        out = kernel_core(as_tensor(np.asarray(t.q)), as_tensor(np.asarray(t.k)),
                          as_tensor(np.asarray(t.v)), *args)
    return out.data


def _linear_core(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    phi_q = ad.phi(q)
    phi_k = ad.phi(k)
    k_v = ad.matmul(ad.transpose(phi_k), v)            # C' x C'
    k_m = ad.tsum(phi_k, axis=0, keepdims=True)        # 1 x C'
    num = ad.matmul(phi_q, k_v)                        # N x C'
    den = ad.matmul(phi_q, ad.transpose(k_m))          # N x 1
    return ad.div(num, den)


def linear_attention(t: ProjectedTriplet):
    """Attention via streamed accumulators; never forms an N x M matrix."""
    if _shape(t.k)[0] < 1:
        raise ValueError("linear_attention requires at least one key row")
    return _dispatch(_linear_core, t)


def _softmax_core(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    scale = 1.0 / np.sqrt(q.data.shape[1])
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), Tensor(np.asarray(scale)))
    # constant shift for numerical stability; cancels in the ratio
    shift = Tensor(scores.data.max(axis=1, keepdims=True))
    e = ad.exp(ad.sub(scores, shift))
    w = ad.div(e, ad.tsum(e, axis=1, keepdims=True))
    return ad.matmul(w, v)


def softmax_attention_reference(t: ProjectedTriplet):
    """Scaled dot-product attention, O(N M C'); correctness/complexity baseline."""
    if _shape(t.k)[0] < 1:
        raise ValueError("softmax attention requires at least one key row")
    return _dispatch(_softmax_core, t)


def _pairwise_core(q: Tensor, k: Tensor, v: Tensor, pairs) -> Tensor:
    n = q.data.shape[0]
    if not pairs:
        return Tensor(np.zeros((n, q.data.shape[1]), dtype=q.data.dtype))
    blocks, idx_list = [], []
    for p in pairs:
        qp = ad.gather_rows(q, p.source_set)
        kp = ad.gather_rows(k, p.target_set)
        vp = ad.gather_rows(v, p.target_set)
        blocks.append(_linear_core(qp, kp, vp))
        idx_list.append(p.source_set)
    return ad.scatter_rows_sum(n, idx_list, blocks)


def pairwise_attention(t: ProjectedTriplet, pairs):
    """Linear attention restricted to neighborhood pairs, summed on overlap.

    Rows outside every source set are exactly zero.
    """
    n, m = _shape(t.q)[0], _shape(t.k)[0]
    for p in pairs:
        if p.source_set.max() >= n or p.target_set.max() >= m:
            raise ValueError("neighborhood index out of range")
    return _dispatch(_pairwise_core, t, pairs)


def _multi_head_core(q, k, v, kernel, heads):
    dim = q.data.shape[1] // heads
    parts = []
    for h in range(heads):
        j0, j1 = h * dim, (h + 1) * dim
        sub = ProjectedTriplet(ad.slice_cols(q, j0, j1),
                               ad.slice_cols(k, j0, j1),
                               ad.slice_cols(v, j0, j1))
        parts.append(as_tensor(kernel(sub)))
    return ad.concat_cols_multi(parts)


def multi_head(kernel, t: ProjectedTriplet, heads: int):
    """Split columns into contiguous head groups, apply kernel per group, concat."""
    c = _shape(t.q)[1]
    if c % heads != 0:
        raise ValueError(f"column count {c} not divisible by {heads} heads")
    return _dispatch(_multi_head_core, t, kernel, heads)
