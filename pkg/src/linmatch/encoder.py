"""The matching Transformer: projection, self/cross loops, pairwise layers.

Layer wiring
------------
Each encoder layer projects its query rows and source rows to q/k/v, runs a
multi-head attention kernel to get a message m, and combines:

    out = carrier + mlp1(relu(layer_norm(mlp0(concat(carrier, m)))))

where `carrier` is the query input itself, except in the very first layer
whose projection matrices are rectangular (D -> C'): there the carrier is
the v-projection of the query input so that the residual path lives in the
reduced dimension.  Both linear maps are bias-free; with mlp1 zeroed the
layer is exactly the identity on its carrier.

The full network runs L1 iterations of (self, cross) updates with linear
attention, captures the raw descriptors f after the last cross layer, builds
match neighborhoods from f (only when L2 > 0; keypoint coordinates enter the
computation nowhere else), then runs L2 pairwise-attention iterations.  The
final rows are L2-normalized to give x.  With L2 = 0, x is exactly the
row-normalized f.

Weights are stored in the "LAWT" container: little-endian, magic + version +
tensor count, then named f32 tensors `layer{i}.{self|cross|pair}.{param}`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .attention import (NeighborhoodPair, ProjectedTriplet, linear_attention,
                        multi_head, pairwise_attention)
from .geometry import KeypointSet
from .neighborhood import NeighborhoodConfig, build_neighborhoods, ratio_match, select_seeds

_LAWT_MAGIC = b"LAWT"
_LAWT_VERSION = 1

_PARAM_NAMES = ("wq", "wk", "wv", "mlp0", "mlp1", "ln_g", "ln_b")


@dataclass
class LayerWeights:
    """Projection, feed-forward, and normalization parameters of one layer."""

    wq: object
    wk: object
    wv: object
    mlp0: object  # 2C' x 2C', bias-free
    mlp1: object  # 2C' x C', bias-free
    ln_g: object  # 2C'
    ln_b: object  # 2C'

    def params(self):
        return [(name, getattr(self, name)) for name in _PARAM_NAMES]

    def validate(self, in_dim: int, hidden: int):
        expect = {
            "wq": (in_dim, hidden), "wk": (in_dim, hidden), "wv": (in_dim, hidden),
            "mlp0": (2 * hidden, 2 * hidden), "mlp1": (2 * hidden, hidden),
            "ln_g": (2 * hidden,), "ln_b": (2 * hidden,),
        }
        for name, arr in self.params():
            data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
            if data.shape != expect[name]:
                raise ValueError(f"{name}: expected shape {expect[name]}, got {data.shape}")
            if not np.isfinite(data).all():
                raise ValueError(f"{name}: non-finite values")


@dataclass
class NetworkConfig:
    input_dim: int = 256
    hidden_dim: int = 64
    heads: int = 8
    l1: int = 4  # self/cross loop count
    l2: int = 2  # pairwise loop count

    def __post_init__(self):
        if self.hidden_dim % self.heads != 0:
            raise ValueError("hidden_dim must be divisible by heads")
        if self.l1 < 1:
            raise ValueError("l1 must be at least 1")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")


@dataclass
class NetworkWeights:
    self_layers: list  # L1 LayerWeights; index 0 is the rectangular reducer
    cross_layers: list  # L1 LayerWeights
    pair_layers: list  # L2 LayerWeights

    def all_params(self):
        """(name, value) pairs in the canonical file order."""
        out = []
        for i, w in enumerate(self.self_layers):
            out += [(f"layer{i}.self.{n}", v) for n, v in w.params()]
        for i, w in enumerate(self.cross_layers):
            out += [(f"layer{i}.cross.{n}", v) for n, v in w.params()]
        base = len(self.self_layers)
        for i, w in enumerate(self.pair_layers):
            out += [(f"layer{base + i}.pair.{n}", v) for n, v in w.params()]
        return out

    def validate(self, cfg: NetworkConfig):
        if len(self.self_layers) != cfg.l1 or len(self.cross_layers) != cfg.l1:
            raise ValueError(f"expected {cfg.l1} self/cross layers")
        if len(self.pair_layers) != cfg.l2:
            raise ValueError(f"expected {cfg.l2} pairwise layers")
        self.self_layers[0].validate(cfg.input_dim, cfg.hidden_dim)
        for w in self.self_layers[1:] + self.cross_layers + self.pair_layers:
            w.validate(cfg.hidden_dim, cfg.hidden_dim)


@dataclass
class EncodedPair:
    """Final descriptors x and the pre-pairwise intermediates f, per side."""

    xs_hat: object  # N x C'
    xt_hat: object  # M x C'
    fs_hat: object  # N x C', output of the last cross layer
    ft_hat: object  # M x C'


def _rows(x) -> int:
    return (x.data if isinstance(x, Tensor) else np.asarray(x)).shape[0]


def _cols(x) -> int:
    return (x.data if isinstance(x, Tensor) else np.asarray(x)).shape[1]


def encoder_layer(x_query, x_source, w: LayerWeights, kernel=linear_attention,
                  heads: int = 1):
    """One residual attention block; see the module docstring for wiring."""
    xq, xs = as_tensor(x_query), as_tensor(x_source)
    hidden = _cols(w.wv)
    square = _cols(xq) == hidden
    carrier = xq if square else ad.matmul(xq, as_tensor(w.wv))
    if _rows(xq) == 0:
        return carrier
    if _rows(xs) == 0:
        m = Tensor(np.zeros((_rows(xq), hidden), dtype=carrier.data.dtype))
    else:
        t = ProjectedTriplet(ad.matmul(xq, as_tensor(w.wq)),
                             ad.matmul(xs, as_tensor(w.wk)),
                             ad.matmul(xs, as_tensor(w.wv)))
        m = as_tensor(kernel(t) if heads == 1 else multi_head(kernel, t, heads))
    h = ad.concat_cols(carrier, m)
    h = ad.matmul(h, as_tensor(w.mlp0))
    h = ad.layer_norm(h, as_tensor(w.ln_g), as_tensor(w.ln_b))
    h = ad.relu(h)
    h = ad.matmul(h, as_tensor(w.mlp1))
    return ad.add(carrier, h)


def self_attention_update(xs, xt, w: LayerWeights, heads: int = 1):
    """Each side attends to itself with shared layer weights."""
    return (encoder_layer(xs, xs, w, linear_attention, heads),
            encoder_layer(xt, xt, w, linear_attention, heads))


def cross_attention_update(xs, xt, w: LayerWeights, heads: int = 1):
    """Each side attends to the other; both directions share weights."""
    return (encoder_layer(xs, xt, w, linear_attention, heads),
            encoder_layer(xt, xs, w, linear_attention, heads))


def _swap_pairs(pairs):
    return [NeighborhoodPair(seed=(p.seed[1], p.seed[0]),
                             source_set=p.target_set,
                             target_set=p.source_set) for p in pairs]


def pairwise_layer_update(xs, xt, pairs, w: LayerWeights, heads: int = 1):
    """Neighborhood-restricted update in both directions.

    Rows outside every neighborhood get a zero message and are changed only
    by the feed-forward path of the layer.
    """
    swapped = _swap_pairs(pairs)

    def kern_st(t):
        return pairwise_attention(t, pairs)

    def kern_ts(t):
        return pairwise_attention(t, swapped)

    return (encoder_layer(xs, xt, w, kern_st, heads),
            encoder_layer(xt, xs, w, kern_ts, heads))


def _is_tensor_weights(weights: NetworkWeights) -> bool:
    return isinstance(weights.self_layers[0].wq, Tensor)


def forward(xs: KeypointSet, xt: KeypointSet, weights: NetworkWeights,
            cfg: NetworkConfig, neigh_cfg: NeighborhoodConfig | None = None) -> EncodedPair:
    """Encode both keypoint sets into matchable descriptors.

    Pure given weights; deterministic.  Keypoint coordinates are used only
    for neighborhood selection between the cross and pairwise stages, so
    with l2 = 0 the output depends on descriptors alone.
    """
    if xs.descriptors.shape[1] != cfg.input_dim or xt.descriptors.shape[1] != cfg.input_dim:
        raise ValueError(f"descriptor dim must be {cfg.input_dim}")
    weights.validate(cfg)
    tensor_mode = _is_tensor_weights(weights)
    if tensor_mode:
        return _forward_impl(xs, xt, weights, cfg, neigh_cfg)
    with ad.no_grad():
        enc = _forward_impl(xs, xt, weights, cfg, neigh_cfg)
    return EncodedPair(enc.xs_hat.data, enc.xt_hat.data, enc.fs_hat.data, enc.ft_hat.data)


def _forward_impl(xs, xt, weights, cfg, neigh_cfg):
    ref = weights.self_layers[0].wq
    dtype = (ref.data if isinstance(ref, Tensor) else np.asarray(ref)).dtype
    a = as_tensor(xs.descriptors.astype(dtype))
    b = as_tensor(xt.descriptors.astype(dtype))
    for i in range(cfg.l1):
        a, b = self_attention_update(a, b, weights.self_layers[i], cfg.heads)
        a, b = cross_attention_update(a, b, weights.cross_layers[i], cfg.heads)
    fs, ft = a, b
    if cfg.l2 > 0:
        ncfg = (neigh_cfg or NeighborhoodConfig()).resolved_pair(
            (xs.width, xs.height), (xt.width, xt.height))
        m = ratio_match(fs.data, ft.data, ncfg.theta)
        seeds = select_seeds(m, xs.keypoints, ncfg.r)
        pairs = build_neighborhoods(seeds, m, xs.keypoints, xt.keypoints, ncfg)
        for i in range(cfg.l2):
            a, b = pairwise_layer_update(a, b, pairs, weights.pair_layers[i], cfg.heads)
    xs_hat = _safe_normalize(a)
    xt_hat = _safe_normalize(b)
    return EncodedPair(xs_hat, xt_hat, fs, ft)


def _safe_normalize(x):
    if _rows(x) == 0:
        return x
    return ad.row_l2_normalize(x)


def _xavier(rng, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_weights(cfg: NetworkConfig, seed: int, dtype=np.float32) -> NetworkWeights:
    """Xavier-uniform projections, identity layer norms; deterministic per seed."""
    rng = np.random.default_rng(seed)
    c = cfg.hidden_dim

    def make_layer(in_dim):
        return LayerWeights(
            wq=_xavier(rng, in_dim, c, dtype),
            wk=_xavier(rng, in_dim, c, dtype),
            wv=_xavier(rng, in_dim, c, dtype),
            mlp0=_xavier(rng, 2 * c, 2 * c, dtype),
            mlp1=_xavier(rng, 2 * c, c, dtype),
            ln_g=np.ones(2 * c, dtype=dtype),
            ln_b=np.zeros(2 * c, dtype=dtype),
        )

    selfs, crosses = [], []
    for i in range(cfg.l1):
        selfs.append(make_layer(cfg.input_dim if i == 0 else c))
        crosses.append(make_layer(c))
    pairs = [make_layer(c) for _ in range(cfg.l2)]
    return NetworkWeights(selfs, crosses, pairs)


def write_tensor_table(path, entries) -> None:
    """Serialize named f32 tensors in the LAWT container layout."""
    with open(path, "wb") as f:
        f.write(_LAWT_MAGIC)
        f.write(struct.pack("<II", _LAWT_VERSION, len(entries)))
        for name, value in entries:
            data = value.data if isinstance(value, Tensor) else np.asarray(value)
            data = np.ascontiguousarray(data, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def _read_exact(f, count, what):
    buf = f.read(count)
    if len(buf) != count:
        raise ValueError(f"truncated file while reading {what}")
    return buf


def read_tensor_table(path) -> dict:
    """Read a LAWT container back into an ordered name -> array mapping."""
    tensors = {}
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != _LAWT_MAGIC:
            raise ValueError("bad magic: not a weight file")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != _LAWT_VERSION:
            raise ValueError(f"unsupported version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, f"{name} ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, f"{name} dims"))
            n_bytes = int(np.prod(shape)) * 4 if ndim else 4
            raw = _read_exact(f, n_bytes, f"{name} data")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if f.read(1):
            raise ValueError("trailing bytes after last tensor")
    return tensors


def save_weights(path, weights: NetworkWeights) -> None:
    write_tensor_table(path, weights.all_params())


def load_weights(path) -> NetworkWeights:
    """Read a LAWT file back into a layer structure, validating completeness."""
    return _assemble(read_tensor_table(path))


def _assemble(tensors) -> NetworkWeights:
    layers = {}
    for name in tensors:
        try:
            layer_part, kind, param = name.split(".")
            idx = int(layer_part.removeprefix("layer"))
        except ValueError as e:
            raise ValueError(f"malformed tensor name {name!r}") from e
        if param not in _PARAM_NAMES:
            raise ValueError(f"unknown parameter in tensor name {name!r}")
        layers.setdefault((idx, kind), {})[param] = tensors[name]

    def collect(kind, indices):
        out = []
        for idx in indices:
            group = layers.get((idx, kind))
            if group is None:
                raise ValueError(f"missing layer{idx}.{kind}")
            missing = set(_PARAM_NAMES) - set(group)
            if missing:
                raise ValueError(f"layer{idx}.{kind} missing {sorted(missing)}")
            out.append(LayerWeights(**group))
        return out

    self_idx = sorted(i for (i, kind) in layers if kind == "self")
    pair_idx = sorted(i for (i, kind) in layers if kind == "pair")
    l1 = len(self_idx)
    if self_idx != list(range(l1)):
        raise ValueError("self layer indices are not contiguous from zero")
    if pair_idx and pair_idx != list(range(l1, l1 + len(pair_idx))):
        raise ValueError("pair layer indices must follow the self/cross block")
    return NetworkWeights(
        self_layers=collect("self", range(l1)),
        cross_layers=collect("cross", range(l1)),
        pair_layers=collect("pair", pair_idx),
    )
