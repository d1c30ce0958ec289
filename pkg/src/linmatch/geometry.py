"""Synthetic scene generation, homographies, and correspondence labeling.

A scene pair is built by warping uniformly sampled source keypoints through a
random (or supplied) homography, jittering the projected positions, keeping
the survivors that land inside the target frame, and appending independent
distractor points.  True-pair descriptors share a base vector plus additive
Gaussian noise; distractor descriptors are independent draws.

Ground truth follows a mutual-nearest-neighbor rule under exact reprojection:
a source/target pair is labeled a correspondence iff each is the other's
nearest neighbor and the reprojection distance is below 3 pixels (absolute,
regardless of image size).  Everything else is unmatchable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

LABEL_DISTANCE_PX = 3.0

_KPDS_MAGIC = b"KPDS"
_KPDS_VERSION = 1


@dataclass
class KeypointSet:
    """Keypoints with descriptors inside a W x H pixel frame."""

    keypoints: np.ndarray  # N x 2 float32, (x, y)
    descriptors: np.ndarray  # N x D float32
    width: int
    height: int

    def __post_init__(self):
        self.keypoints = np.ascontiguousarray(self.keypoints, dtype=np.float32).reshape(-1, 2)
        self.descriptors = np.ascontiguousarray(self.descriptors, dtype=np.float32)
        if self.descriptors.ndim != 2:
            raise ValueError("descriptors must be a 2-D matrix")
        if self.descriptors.shape[0] != self.keypoints.shape[0]:
            raise ValueError("descriptor row count must equal keypoint count")
        if self.descriptors.shape[1] < 1:
            raise ValueError("descriptor dimension must be >= 1")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        k = self.keypoints
        if k.size and ((k[:, 0] < 0).any() or (k[:, 0] >= self.width).any()
                       or (k[:, 1] < 0).any() or (k[:, 1] >= self.height).any()):
            raise ValueError("keypoints must lie inside [0, W) x [0, H)")

    def __len__(self):
        return self.keypoints.shape[0]


@dataclass
class GroundTruth:
    """Partial bijection of true correspondences plus unmatchable leftovers."""

    pairs: list  # of (source_index, target_index)
    unmatchable_source: set = field(default_factory=set)
    unmatchable_target: set = field(default_factory=set)

    def __post_init__(self):
        src = [i for i, _ in self.pairs]
        tgt = [j for _, j in self.pairs]
        if len(set(src)) != len(src) or len(set(tgt)) != len(tgt):
            raise ValueError("ground-truth pairs must form a partial bijection")
        if self.unmatchable_source & set(src) or self.unmatchable_target & set(tgt):
            raise ValueError("unmatchable sets must be disjoint from matched indices")


@dataclass
class Homography:
    """Invertible 3x3 projective transform, normalized to h[2,2] = 1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(m)) <= 1e-9:
            raise ValueError("homography is singular")
        if m[2, 2] == 0:
            raise ValueError("cannot normalize: bottom-right entry is zero")
        self.matrix = m / m[2, 2]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))


@dataclass
class GenNoiseConfig:
    """Perturbation knobs for synthetic pair generation."""

    desc_sigma: float = 0.0  # additive descriptor noise on true pairs
    jitter_sigma: float = 0.0  # pixel jitter on projected target positions
    distractors: int = 0  # extra unmatched target keypoints

    def __post_init__(self):
        if self.desc_sigma < 0 or self.jitter_sigma < 0 or self.distractors < 0:
            raise ValueError("noise magnitudes must be non-negative")


def apply_homography(h: Homography, points) -> tuple[np.ndarray, np.ndarray]:
    """Project points; returns (projected N x 2, valid mask).

    Rows whose homogeneous w-coordinate collapses (|w| < 1e-12) are marked
    invalid and set to +inf so they can never win a nearest-neighbor search.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    ones = np.ones((pts.shape[0], 1))
    hom = np.concatenate([pts, ones], axis=1) @ h.matrix.T
    w = hom[:, 2]
    valid = np.abs(w) >= 1e-12
    out = np.full((pts.shape[0], 2), np.inf)
    out[valid] = hom[valid, :2] / w[valid, None]
    return out, valid


def _sample_homography(rng: np.random.Generator, width: int, height: int) -> Homography:
    """Rotation, anisotropic scale, shear, and translation about frame center."""
    while True:
        angle = rng.uniform(-np.pi / 6, np.pi / 6)
        sx, sy = rng.uniform(0.7, 1.4, size=2)
        shear = rng.uniform(-0.2, 0.2)
        tx = rng.uniform(-0.15, 0.15) * width
        ty = rng.uniform(-0.15, 0.15) * height
        c, s = np.cos(angle), np.sin(angle)
        rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        scale = np.diag([sx, sy, 1.0])
        sh = np.array([[1, shear, 0], [0, 1, 0], [0, 0, 1]])
        cx, cy = width / 2, height / 2
        to_center = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]])
        back = np.array([[1, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1]])
        m = back @ rot @ sh @ scale @ to_center
        if abs(np.linalg.det(m)) > 1e-9:
            return Homography(m)


def _clip_to_frame(pts: np.ndarray, width: int, height: int) -> np.ndarray:
    """Cast to f32 without letting rounding push a point onto the open edge."""
    out = pts.astype(np.float32)
    out[:, 0] = np.clip(out[:, 0], 0.0, np.nextafter(np.float32(width), np.float32(0)))
    out[:, 1] = np.clip(out[:, 1], 0.0, np.nextafter(np.float32(height), np.float32(0)))
    return out


def label_correspondences(h: Homography, ks: KeypointSet, kt: KeypointSet) -> GroundTruth:
    """Mutual-NN labeling under exact reprojection with the 3 px cutoff."""
    n, m = len(ks), len(kt)
    proj, valid = apply_homography(h, ks.keypoints)
    pairs = []
    matched_s, matched_t = set(), set()
    vidx = np.nonzero(valid)[0]
    if vidx.size and m:
        vproj = proj[vidx]
        tpts = kt.keypoints.astype(np.float64)
        tree_t = cKDTree(tpts)
        d_st, nn_st = tree_t.query(vproj)  # nearest target for each projection
        tree_s = cKDTree(vproj)
        _, nn_ts = tree_s.query(tpts)  # nearest projection for each target
        for row, (j, d) in enumerate(zip(nn_st, d_st)):
            if nn_ts[j] == row and d < LABEL_DISTANCE_PX:
                i = int(vidx[row])
                pairs.append((i, int(j)))
                matched_s.add(i)
                matched_t.add(int(j))
    return GroundTruth(
        pairs=pairs,
        unmatchable_source=set(range(n)) - matched_s,
        unmatchable_target=set(range(m)) - matched_t,
    )


def generate_pair(seed: int, n_keypoints: int, dims: tuple, descriptor_dim: int,
                  noise: GenNoiseConfig | None = None,
                  homography: Homography | None = None,
                  min_matches: int | None = None):
    """Build a synthetic (source, target, ground truth, homography) scene.

    Deterministic for a fixed seed.  If `min_matches` is given, regenerates
    with successive derived seeds until the ground truth is large enough.
    """
    width, height = dims
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    if n_keypoints < 1:
        raise ValueError("need at least one keypoint")
    noise = noise or GenNoiseConfig()

    for attempt in range(64):
        rng = np.random.default_rng(seed + attempt)
        h = homography if homography is not None else _sample_homography(rng, width, height)

        src = np.column_stack([rng.uniform(0, width, n_keypoints),
                               rng.uniform(0, height, n_keypoints)])
        src_f32 = _clip_to_frame(src, width, height)
        base_desc = rng.standard_normal((n_keypoints, descriptor_dim))

        proj, valid = apply_homography(h, src_f32)
        jitter = rng.normal(0.0, noise.jitter_sigma, size=proj.shape) if noise.jitter_sigma > 0 \
            else np.zeros_like(proj)
        landed = proj + jitter
        in_frame = valid & (landed[:, 0] >= 0) & (landed[:, 0] < width) \
            & (landed[:, 1] >= 0) & (landed[:, 1] < height)
        survivors = np.nonzero(in_frame)[0]

        tgt_pts = landed[survivors]
        tgt_desc = base_desc[survivors]
        if noise.desc_sigma > 0:
            tgt_desc = tgt_desc + rng.normal(0.0, noise.desc_sigma, size=tgt_desc.shape)
        if noise.distractors > 0:
            extra_pts = np.column_stack([rng.uniform(0, width, noise.distractors),
                                         rng.uniform(0, height, noise.distractors)])
            extra_desc = rng.standard_normal((noise.distractors, descriptor_dim))
            tgt_pts = np.concatenate([tgt_pts, extra_pts], axis=0)
            tgt_desc = np.concatenate([tgt_desc, extra_desc], axis=0)

        ks = KeypointSet(src_f32, base_desc.astype(np.float32), width, height)
        kt = KeypointSet(_clip_to_frame(tgt_pts, width, height),
                         tgt_desc.astype(np.float32), width, height)
        gt = label_correspondences(h, ks, kt)
        if min_matches is None or len(gt.pairs) >= min_matches:
            return ks, kt, gt, h
    raise RuntimeError(f"could not reach {min_matches} ground-truth matches in 64 attempts")


def write_kpds(path, ks: KeypointSet) -> None:
    with open(path, "wb") as f:
        f.write(_KPDS_MAGIC)
        n, d = ks.descriptors.shape
        f.write(struct.pack("<5I", _KPDS_VERSION, n, d, ks.width, ks.height))
        f.write(ks.keypoints.astype("<f4").tobytes())
        f.write(ks.descriptors.astype("<f4").tobytes())


def read_kpds(path) -> KeypointSet:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _KPDS_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {_KPDS_MAGIC!r}")
        version, n, d, width, height = struct.unpack("<5I", f.read(20))
        if version != _KPDS_VERSION:
            raise ValueError(f"unsupported version {version}")
        kpts = np.frombuffer(f.read(n * 2 * 4), dtype="<f4").reshape(n, 2)
        desc = np.frombuffer(f.read(n * d * 4), dtype="<f4").reshape(n, d)
        trailing = f.read(1)
        if trailing:
            raise ValueError("trailing bytes after descriptor block")
    return KeypointSet(kpts.copy(), desc.copy(), int(width), int(height))


def write_ground_truth(path, gt: GroundTruth) -> None:
    with open(path, "w") as f:
        for i, j in gt.pairs:
            f.write(f"{i},{j}\n")


def read_ground_truth(path, n_source: int | None = None,
                      n_target: int | None = None) -> GroundTruth:
    pairs = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            i, j = line.split(",")
            pairs.append((int(i), int(j)))
    unm_s = set(range(n_source)) - {i for i, _ in pairs} if n_source is not None else set()
    unm_t = set(range(n_target)) - {j for _, j in pairs} if n_target is not None else set()
    return GroundTruth(pairs, unm_s, unm_t)


def write_homography(path, h: Homography) -> None:
    with open(path, "w") as f:
        f.write(" ".join(repr(float(v)) for v in h.matrix.ravel()) + "\n")


def read_homography(path) -> Homography:
    with open(path) as f:
        vals = [float(tok) for tok in f.read().split()]
    if len(vals) != 9:
        raise ValueError(f"expected 9 values, got {len(vals)}")
    return Homography(np.array(vals).reshape(3, 3))
