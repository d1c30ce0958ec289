"""Feature-distance matching and local-affine verification.

`distance_match` runs the ratio matcher on the final descriptors, picks
locally best seeds, grows candidate neighborhoods around them, and returns
the union of all neighborhood members (seeds keep their own tag).

`filter_matches` then verifies each neighborhood independently: repeated
3-correspondence minimal samples fit an exact affine transform, candidates
within `inlier_threshold_factor * R_t` of their prediction count as inliers,
and the best model's inliers survive when there are at least `min_inliers`
of them.  There is no refitting step.  A match surviving in any neighborhood
is kept.  Each neighborhood draws from its own RNG stream derived from
(rng_seed, seed source index), so results are identical no matter how many
worker threads run the verification.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .encoder import EncodedPair, NetworkConfig, NetworkWeights, forward
from .geometry import GroundTruth, Homography, KeypointSet, apply_homography
from .neighborhood import (
    NeighborhoodConfig,
    build_neighborhoods,
    default_radius,
    ratio_match,
    select_seeds,
)

_STAGES = ("seed", "candidate", "verified")


@dataclass
class MatchSet:
    """Scored index pairs, each tagged with the pipeline stage that produced it."""

    matches: list  # of (source_index, target_index, score)
    stage: list  # of str, aligned with matches

    def __post_init__(self):
        if len(self.matches) != len(self.stage):
            raise ValueError("one stage tag per match required")
        seen = set()
        for (i, j, _), s in zip(self.matches, self.stage):
            if s not in _STAGES:
                raise ValueError(f"unknown stage {s!r}")
            if (i, j) in seen:
                raise ValueError(f"duplicate match ({i}, {j})")
            seen.add((i, j))

    def __len__(self):
        return len(self.matches)

    def pairs(self):
        return [(i, j) for i, j, _ in self.matches]


@dataclass
class FilterConfig:
    ransac_iterations: int = 128
    inlier_threshold_factor: float = 0.15  # fraction of R_t
    min_inliers: int = 6
    rng_seed: int = 0
    keep_subminimal: bool = False  # pass neighborhoods of < 3 through unverified

    def __post_init__(self):
        if self.ransac_iterations < 1:
            raise ValueError("need at least one iteration")
        if self.inlier_threshold_factor <= 0:
            raise ValueError("threshold factor must be positive")
        if self.min_inliers < 3:
            raise ValueError("min_inliers must be at least 3")


@dataclass
class Metrics:
    mma: dict  # threshold px -> fraction of matches within it
    precision: float
    recall: float
    num_matches: int
    inlier_ratio: float  # convention: the 3 px entry of mma


def _candidates(enc: EncodedPair, ks: KeypointSet, kt: KeypointSet,
                cfg: NeighborhoodConfig):
    """Shared body of distance_match: returns (MatchSet, neighborhoods)."""
    cfg = cfg.resolved_pair((ks.width, ks.height), (kt.width, kt.height))
    m = ratio_match(enc.xs_hat, enc.xt_hat, cfg.theta)
    seeds = select_seeds(m, ks.keypoints, cfg.r)
    neighborhoods = build_neighborhoods(seeds, m, ks.keypoints, kt.keypoints, cfg)

    seed_sources = {m.matches[pos][0] for pos in seeds}
    src_to_pos = {i: pos for pos, (i, _) in enumerate(m.matches)}
    member_pos = set()
    for p in neighborhoods:
        for i in p.source_set:
            member_pos.add(src_to_pos[int(i)])
    ordered = sorted(member_pos)
    matches = [(m.matches[pos][0], m.matches[pos][1], float(m.ratio_score[pos]))
               for pos in ordered]
    stages = ["seed" if m.matches[pos][0] in seed_sources else "candidate"
              for pos in ordered]
    return MatchSet(matches, stages), neighborhoods


def distance_match(enc: EncodedPair, ks: KeypointSet, kt: KeypointSet,
                   cfg: NeighborhoodConfig | None = None) -> MatchSet:
    """Candidate matches from final descriptors: ratio, seeds, neighborhoods."""
    out, _ = _candidates(enc, ks, kt, cfg or NeighborhoodConfig())
    return out


def _fit_affine(src, tgt):
    """Exact affine transform through three correspondences, or None if degenerate."""
    m = np.column_stack([src, np.ones(3)])
    if abs(np.linalg.det(m)) < 1e-9:
        return None
    coef = np.linalg.solve(m, tgt)  # 3x2: rows are (a_x, a_y, 1-coeff)
    return coef


def _verify_neighborhood(pair, cand_pos, src_pts, tgt_pts, fcfg, threshold):
    """One independent RANSAC; returns the set of surviving match positions."""
    k = len(cand_pos)
    if k < 3:
        if fcfg.keep_subminimal and k >= fcfg.min_inliers:
            return set(cand_pos)
        return set()
    rng = np.random.default_rng([fcfg.rng_seed, pair.seed[0]])
    ones = np.ones((k, 1))
    hom = np.concatenate([src_pts, ones], axis=1)
    best_count = 0
    best_mask = None
    for _ in range(fcfg.ransac_iterations):
        sample = rng.choice(k, size=3, replace=False)
        coef = _fit_affine(src_pts[sample], tgt_pts[sample])
        if coef is None:
            continue
        residual = np.linalg.norm(hom @ coef - tgt_pts, axis=1)
        mask = residual <= threshold
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_count >= fcfg.min_inliers:
        return {cand_pos[idx] for idx in np.nonzero(best_mask)[0]}
    return set()


def filter_matches(m: MatchSet, ks: KeypointSet, kt: KeypointSet, neighborhoods,
                   fcfg: FilterConfig | None = None, r_t: float | None = None,
                   threads: int = 1) -> MatchSet:
    """Keep matches that are affine-consistent inliers in any neighborhood."""
    fcfg = fcfg or FilterConfig()
    if r_t is None:
        r_t = default_radius(kt.width, kt.height)
    threshold = fcfg.inlier_threshold_factor * r_t
    src_to_pos = {i: pos for pos, (i, j, _) in enumerate(m.matches)}
    tgt_of = {i: j for i, j, _ in m.matches}

    jobs = []
    for pair in neighborhoods:
        cand_pos = [src_to_pos[int(i)] for i in pair.source_set
                    if int(i) in src_to_pos and tgt_of[int(i)] in set(map(int, pair.target_set))]
        src_pts = np.array([ks.keypoints[m.matches[pos][0]] for pos in cand_pos],
                           dtype=np.float64).reshape(-1, 2)
        tgt_pts = np.array([kt.keypoints[m.matches[pos][1]] for pos in cand_pos],
                           dtype=np.float64).reshape(-1, 2)
        jobs.append((pair, cand_pos, src_pts, tgt_pts))

    def run(job):
        return _verify_neighborhood(job[0], job[1], job[2], job[3], fcfg, threshold)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    survivors = set().union(*results) if results else set()
    ordered = sorted(survivors)
    return MatchSet([m.matches[pos] for pos in ordered], ["verified"] * len(ordered))


def match_pipeline(ks: KeypointSet, kt: KeypointSet, weights: NetworkWeights,
                   cfg: NetworkConfig, neigh_cfg: NeighborhoodConfig | None = None,
                   filter_cfg: FilterConfig | None = None, skip_filter: bool = False,
                   threads: int = 1) -> MatchSet:
    """forward -> distance_match -> filter_matches (optionally skipping the filter)."""
    neigh_cfg = neigh_cfg or NeighborhoodConfig()
    enc = forward(ks, kt, weights, cfg, neigh_cfg)
    candidates, neighborhoods = _candidates(enc, ks, kt, neigh_cfg)
    if skip_filter:
        return candidates
    resolved = neigh_cfg.resolved_pair((ks.width, ks.height), (kt.width, kt.height))
    return filter_matches(candidates, ks, kt, neighborhoods, filter_cfg,
                          r_t=resolved.r_t, threads=threads)


def evaluate(m: MatchSet, gt: GroundTruth, h: Homography, ks: KeypointSet,
             kt: KeypointSet, thresholds=tuple(range(1, 11))) -> Metrics:
    """Reprojection accuracy and ground-truth precision/recall.

    Conventions: an empty match set reports 0 for every accuracy number;
    an empty ground truth makes recall vacuously 1.
    """
    n = len(m)
    if n == 0:
        mma = {int(t): 0.0 for t in thresholds}
        recall = 1.0 if not gt.pairs else 0.0
        return Metrics(mma, 0.0, recall, 0, 0.0)
    src_idx = [i for i, _, _ in m.matches]
    tgt_idx = [j for _, j, _ in m.matches]
    proj, valid = apply_homography(h, ks.keypoints[src_idx])
    tgt_pts = kt.keypoints[tgt_idx].astype(np.float64)
    err = np.where(valid, np.linalg.norm(proj - tgt_pts, axis=1), np.inf)
    mma = {int(t): float((err <= t).mean()) for t in thresholds}
    gt_set = set(gt.pairs)
    hits = sum(1 for p in m.pairs() if p in gt_set)
    precision = hits / n
    recall = hits / len(gt.pairs) if gt.pairs else 1.0
    inlier_ratio = mma.get(3, float((err <= 3.0).mean()))
    return Metrics(mma, precision, recall, n, inlier_ratio)


def write_matches(path, m: MatchSet) -> None:
    with open(path, "w") as f:
        f.write("i,j,score,stage\n")
        for (i, j, score), stage in zip(m.matches, m.stage):
            f.write(f"{i},{j},{repr(float(score))},{stage}\n")


def read_matches(path) -> MatchSet:
    matches, stages = [], []
    with open(path) as f:
        header = f.readline().strip()
        if header != "i,j,score,stage":
            raise ValueError(f"unexpected header {header!r}")
        for line in f:
            line = line.strip()
            if not line:
                continue
            i, j, score, stage = line.split(",")
            matches.append((int(i), int(j), float(score)))
            stages.append(stage)
    return MatchSet(matches, stages)


def write_metrics(path, metrics: Metrics) -> None:
    payload = {
        "mma": {str(t): v for t, v in sorted(metrics.mma.items())},
        "precision": metrics.precision,
        "recall": metrics.recall,
        "num_matches": metrics.num_matches,
        "inlier_ratio": metrics.inlier_ratio,
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
