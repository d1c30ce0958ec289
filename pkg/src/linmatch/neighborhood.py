"""Distance-ratio matching, seed selection, and local neighborhood sets.

Matching is mutual nearest neighbor in descriptor space gated by Lowe's
ratio test d1/d2 <= theta.  Each surviving match carries a distinctiveness
score d2/d1 (capped at +inf when d1 = 0 or when there is no second
neighbor), so higher means more confident.

A match is a *seed* when its score is strictly the best among all matches
whose source keypoints lie within radius R of its own; equal scores break
toward the lower source index.  Seeds therefore end up spread out: no two
survive within R of each other unless tied-and-ranked.  Around every seed,
the neighborhood collects the matches lying within lambda * R_s of the seed
on the source side and lambda * R_t on the target side simultaneously.

Seed search runs brute-force for small match sets and through a uniform
grid hash for large ones; both produce identical output.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attention import NeighborhoodPair

_BRUTE_FORCE_LIMIT = 4000
_CHUNK_ENTRIES = 1 << 22  # ~32 MB of f64 per distance block


@dataclass
class NeighborhoodConfig:
    theta: float = 1.0  # ratio-test threshold, (0, 1]
    lam: float = 2.0  # neighborhood overlap factor
    r: float | None = None  # seed separation radius (px)
    r_s: float | None = None  # source-side neighborhood radius (px)
    r_t: float | None = None  # target-side neighborhood radius (px)
    min_neighborhood: int = 1  # drop neighborhoods smaller than this

    def __post_init__(self):
        if not (0 < self.theta <= 1):
            raise ValueError("theta must lie in (0, 1]")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        for name in ("r", "r_s", "r_t"):
            val = getattr(self, name)
            if val is not None and val <= 0:
                raise ValueError(f"{name} must be positive when set")
        if self.min_neighborhood < 1:
            raise ValueError("min_neighborhood must be at least 1")

    def resolved(self, width: int, height: int) -> "NeighborhoodConfig":
        """Fill unset radii from the image dimensions."""
        base = default_radius(width, height)
        return replace(self,
                       r=self.r if self.r is not None else base,
                       r_s=self.r_s if self.r_s is not None else base,
                       r_t=self.r_t if self.r_t is not None else base)

    def resolved_pair(self, source_dims: tuple, target_dims: tuple) -> "NeighborhoodConfig":
        """Fill unset radii per side: r and r_s from the source frame, r_t from the target."""
        base_s = default_radius(*source_dims)
        base_t = default_radius(*target_dims)
        return replace(self,
                       r=self.r if self.r is not None else base_s,
                       r_s=self.r_s if self.r_s is not None else base_s,
                       r_t=self.r_t if self.r_t is not None else base_t)


@dataclass
class RatioMatchSet:
    """Mutual-NN matches with per-match distinctiveness scores."""

    matches: list  # of (source_index, target_index)
    ratio_score: np.ndarray

    def __post_init__(self):
        self.ratio_score = np.asarray(self.ratio_score, dtype=np.float64)
        if len(self.matches) != self.ratio_score.shape[0]:
            raise ValueError("one score per match required")
        src = [i for i, _ in self.matches]
        tgt = [j for _, j in self.matches]
        if len(set(src)) != len(src) or len(set(tgt)) != len(tgt):
            raise ValueError("matches must be one-to-one per side")

    def __len__(self):
        return len(self.matches)


def default_radius(width: int, height: int) -> float:
    """Radius giving one hundred radius-sized discs per frame area."""
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    return float(np.sqrt(width * height / (100.0 * np.pi)))


def _chunked_nearest(a: np.ndarray, b: np.ndarray, second: bool):
    """Nearest (and optionally second-nearest) rows of b for each row of a.

    Distances are ranked with the expanded dot product in f64 and the chosen
    few are then recomputed exactly by direct subtraction, so downstream
    threshold comparisons do not inherit cancellation error.
    """
    n, m = a.shape[0], b.shape[0]
    aa = (a * a).sum(axis=1)
    bb = (b * b).sum(axis=1)
    j1 = np.empty(n, dtype=np.intp)
    j2 = np.empty(n, dtype=np.intp) if second and m >= 2 else None
    chunk = max(1, _CHUNK_ENTRIES // max(m, 1))
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        block = aa[s:e, None] + bb[None, :] - 2.0 * (a[s:e] @ b.T)
        idx1 = block.argmin(axis=1)
        j1[s:e] = idx1
        if j2 is not None:
            block[np.arange(e - s), idx1] = np.inf
            j2[s:e] = block.argmin(axis=1)
    d1 = np.linalg.norm(a - b[j1], axis=1)
    if not second:
        return j1, d1
    if j2 is None:
        return j1, d1, None, np.full(n, np.inf)
    d2 = np.linalg.norm(a - b[j2], axis=1)
    flip = d2 < d1  # exact recomputation may reorder near-ties
    if flip.any():
        j1[flip], j2[flip] = j2[flip], j1[flip]
        d1[flip], d2[flip] = d2[flip], d1[flip]
    return j1, d1, j2, d2


def ratio_match(xs_enc, xt_enc, theta: float) -> RatioMatchSet:
    """Mutual-NN matches passing d1/d2 <= theta, scored by d2/d1."""
    a = np.asarray(xs_enc, dtype=np.float64)
    b = np.asarray(xt_enc, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return RatioMatchSet([], np.zeros(0))
    nn_st, d1, _, d2 = _chunked_nearest(a, b, second=True)
    nn_ts, _ = _chunked_nearest(b, a, second=False)
    matches, scores = [], []
    for i in range(a.shape[0]):
        j = nn_st[i]
        if nn_ts[j] != i:
            continue
        if d1[i] > theta * d2[i]:  # ratio test without dividing by inf/zero
            continue
        matches.append((i, int(j)))
        scores.append(np.inf if d1[i] == 0 else d2[i] / d1[i])
    return RatioMatchSet(matches, np.array(scores))


def _beats(score_a, idx_a, score_b, idx_b):
    """True when match b outranks match a for seed suppression."""
    return score_b > score_a or (score_b == score_a and idx_b < idx_a)


def _seeds_brute(src_idx, scores, pts, radius):
    r2 = radius * radius
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    beats = (scores[None, :] > scores[:, None]) | \
        ((scores[None, :] == scores[:, None]) & (src_idx[None, :] < src_idx[:, None]))
    near = d2 <= r2
    np.fill_diagonal(near, False)
    suppressed = (near & beats).any(axis=1)
    return np.nonzero(~suppressed)[0]


def _seeds_grid(src_idx, scores, pts, radius):
    cells = np.floor(pts / radius).astype(np.int64)
    buckets = {}
    for pos, cell in enumerate(map(tuple, cells)):
        buckets.setdefault(cell, []).append(pos)
    r2 = radius * radius
    keep = []
    for pos in range(len(src_idx)):
        cx, cy = cells[pos]
        alive = True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for other in buckets.get((cx + dx, cy + dy), ()):
                    if other == pos:
                        continue
                    if ((pts[other] - pts[pos]) ** 2).sum() > r2:
                        continue
                    if _beats(scores[pos], src_idx[pos], scores[other], src_idx[other]):
                        alive = False
                        break
                if not alive:
                    break
            if not alive:
                break
        if alive:
            keep.append(pos)
    return np.asarray(keep, dtype=np.intp)


def select_seeds(m: RatioMatchSet, source_keypoints, radius: float) -> np.ndarray:
    """Positions (into m.matches) of locally top-scored matches, by source index.

    A match survives iff no other match within `radius` of its source keypoint
    has a strictly higher score, or an equal score with a lower source index.
    """
    if len(m) == 0:
        return np.zeros(0, dtype=np.intp)
    src_idx = np.array([i for i, _ in m.matches], dtype=np.intp)
    pts = np.asarray(source_keypoints, dtype=np.float64)[src_idx]
    if len(m) <= _BRUTE_FORCE_LIMIT:
        keep = _seeds_brute(src_idx, m.ratio_score, pts, radius)
    else:
        keep = _seeds_grid(src_idx, m.ratio_score, pts, radius)
    return keep[np.argsort(src_idx[keep], kind="stable")]


def build_neighborhoods(seeds, m: RatioMatchSet, source_keypoints, target_keypoints,
                        cfg: NeighborhoodConfig) -> list:
    """Matches within lambda*R_s of a seed's source AND lambda*R_t of its target."""
    if cfg.r_s is None or cfg.r_t is None:
        raise ValueError("config radii must be resolved before building neighborhoods")
    if len(m) == 0 or len(seeds) == 0:
        return []
    src_idx = np.array([i for i, _ in m.matches], dtype=np.intp)
    tgt_idx = np.array([j for _, j in m.matches], dtype=np.intp)
    sp = np.asarray(source_keypoints, dtype=np.float64)[src_idx]
    tp = np.asarray(target_keypoints, dtype=np.float64)[tgt_idx]
    rs2 = (cfg.lam * cfg.r_s) ** 2
    rt2 = (cfg.lam * cfg.r_t) ** 2
    pairs = []
    for pos in np.asarray(seeds, dtype=np.intp):
        ds = ((sp - sp[pos]) ** 2).sum(axis=1)
        dt = ((tp - tp[pos]) ** 2).sum(axis=1)
        member = (ds <= rs2) & (dt <= rt2)
        if member.sum() < cfg.min_neighborhood:
            continue
        pairs.append(NeighborhoodPair(
            seed=(int(src_idx[pos]), int(tgt_idx[pos])),
            source_set=np.sort(src_idx[member]),
            target_set=np.sort(tgt_idx[member]),
        ))
    return pairs
