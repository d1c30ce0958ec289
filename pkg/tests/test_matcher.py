"""Candidate expansion, affine verification, pipeline, and metrics."""

import itertools

import numpy as np
import pytest

from linmatch.attention import NeighborhoodPair
from linmatch.encoder import NetworkConfig, forward, init_weights
from linmatch.geometry import (
    GenNoiseConfig,
    GroundTruth,
    Homography,
    KeypointSet,
    generate_pair,
)
from linmatch.matcher import (
    FilterConfig,
    MatchSet,
    Metrics,
    distance_match,
    evaluate,
    filter_matches,
    match_pipeline,
    read_matches,
    write_matches,
    write_metrics,
    _candidates,
)
from linmatch.neighborhood import (
    NeighborhoodConfig,
    build_neighborhoods,
    ratio_match,
    select_seeds,
)


def sparse_orthogonal_scene(n=6, spacing=60.0):
    """Keypoints far apart with one-hot descriptors: matching is unambiguous."""
    side = int(np.ceil(np.sqrt(n)))
    pts = np.array([[10 + spacing * (k % side), 10 + spacing * (k // side)]
                    for k in range(n)], dtype=np.float32)
    width = height = int(spacing * side + 20)
    desc = np.eye(n, dtype=np.float32)
    ks = KeypointSet(pts, desc, width, height)
    kt = KeypointSet(pts.copy(), desc.copy(), width, height)
    return ks, kt


class FakeEnc:
    """Stand-in encoded pair: descriptors already matchable."""

    def __init__(self, xs, xt):
        self.xs_hat = xs
        self.xt_hat = xt


class TestDistanceMatch:
    def test_orthogonal_sparse_all_seeds(self):
        ks, kt = sparse_orthogonal_scene(n=4, spacing=200.0)
        cfg = NeighborhoodConfig(r=10.0, r_s=10.0, r_t=10.0)
        out = distance_match(FakeEnc(ks.descriptors, kt.descriptors), ks, kt, cfg)
        assert out.pairs() == [(i, i) for i in range(4)]
        assert all(s == "seed" for s in out.stage)

    def test_no_mutual_nn_empty(self):
        ks = KeypointSet(np.array([[5.0, 5.0]]), np.array([[1.0, 0.0]]), 10, 10)
        kt = KeypointSet(np.zeros((0, 2)), np.zeros((0, 2)), 10, 10)
        out = distance_match(FakeEnc(ks.descriptors, kt.descriptors), ks, kt)
        assert len(out) == 0

    def test_matches_scripted_composition(self):
        rng = np.random.default_rng(0)
        ks, kt, _, _ = generate_pair(4, 60, (256, 256), 16,
                                     GenNoiseConfig(desc_sigma=0.2, distractors=10))
        xs_enc = ks.descriptors + 0.0
        xt_enc = kt.descriptors + 0.0
        cfg = NeighborhoodConfig().resolved_pair((256, 256), (256, 256))
        out = distance_match(FakeEnc(xs_enc, xt_enc), ks, kt, cfg)

        m = ratio_match(xs_enc, xt_enc, cfg.theta)
        seeds = select_seeds(m, ks.keypoints, cfg.r)
        neigh = build_neighborhoods(seeds, m, ks.keypoints, kt.keypoints, cfg)
        expect = set()
        for p in neigh:
            tgt_of = dict(m.matches)
            for i in p.source_set:
                expect.add((int(i), tgt_of[int(i)]))
        assert set(out.pairs()) == expect
        seed_sources = {m.matches[pos][0] for pos in seeds}
        for (i, _, _), st in zip(out.matches, out.stage):
            assert st == ("seed" if i in seed_sources else "candidate")

    def test_candidate_scores_are_ratio_scores(self):
        ks, kt = sparse_orthogonal_scene(n=4, spacing=30.0)
        out = distance_match(FakeEnc(ks.descriptors, kt.descriptors), ks, kt,
                             NeighborhoodConfig(r=10.0, r_s=10.0, r_t=10.0))
        assert all(np.isinf(s) for _, _, s in out.matches)


def exhaustive_affine_check(src, tgt, threshold, min_inliers):
    """All 3-subsets; best inlier set by exhaustive search (oracle)."""
    k = len(src)
    best = set()
    for combi in itertools.combinations(range(k), 3):
        m = np.column_stack([src[list(combi)], np.ones(3)])
        if abs(np.linalg.det(m)) < 1e-9:
            continue
        coef = np.linalg.solve(m, tgt[list(combi)])
        res = np.linalg.norm(np.column_stack([src, np.ones(k)]) @ coef - tgt, axis=1)
        inl = set(np.nonzero(res <= threshold)[0])
        if len(inl) > len(best):
            best = inl
    return best if len(best) >= min_inliers else set()


class TestFilterMatches:
    def _affine_scene(self, rng, n=20, outlier_rows=()):
        """Candidates exactly related by one affine map, plus forced outliers."""
        src = rng.uniform(20, 200, size=(n, 2))
        a = np.array([[1.1, 0.1], [-0.05, 0.95]])
        b = np.array([7.0, -3.0])
        tgt = src @ a.T + b
        for row in outlier_rows:
            tgt[row] += 40.0  # huge displacement
        ks = KeypointSet(src.astype(np.float32), np.eye(n, dtype=np.float32), 256, 256)
        kt = KeypointSet(tgt.astype(np.float32), np.eye(n, dtype=np.float32), 256, 256)
        matches = [(i, i, 2.0) for i in range(n)]
        stages = ["candidate"] * n
        pair = NeighborhoodPair((0, 0), np.arange(n), np.arange(n))
        return ks, kt, MatchSet(matches, stages), [pair]

    def test_exact_affine_all_survive(self):
        rng = np.random.default_rng(1)
        ks, kt, m, neigh = self._affine_scene(rng)
        out = filter_matches(m, ks, kt, neigh, FilterConfig(rng_seed=3))
        assert len(out) == len(m)
        assert all(s == "verified" for s in out.stage)

    def test_single_outlier_removed(self):
        rng = np.random.default_rng(2)
        ks, kt, m, neigh = self._affine_scene(rng, n=20, outlier_rows=(7,))
        fcfg = FilterConfig(rng_seed=5)
        out = filter_matches(m, ks, kt, neigh, fcfg)
        assert (7, 7) not in [(i, j) for i, j, _ in out.matches]
        assert len(out) == 19
        # agreement with the exhaustive all-3-subsets oracle
        src = ks.keypoints.astype(np.float64)
        tgt = kt.keypoints.astype(np.float64)
        from linmatch.neighborhood import default_radius
        thr = fcfg.inlier_threshold_factor * default_radius(256, 256)
        oracle = exhaustive_affine_check(src, tgt, thr, fcfg.min_inliers)
        assert {i for i, _, _ in out.matches} == oracle

    def test_subminimal_neighborhood_dropped(self):
        ks = KeypointSet(np.array([[1.0, 1.0], [5.0, 5.0]]), np.eye(2, dtype=np.float32),
                         10, 10)
        kt = KeypointSet(ks.keypoints.copy(), np.eye(2, dtype=np.float32), 10, 10)
        m = MatchSet([(0, 0, 1.0), (1, 1, 1.0)], ["candidate"] * 2)
        pair = NeighborhoodPair((0, 0), np.array([0, 1]), np.array([0, 1]))
        out = filter_matches(m, ks, kt, [pair], FilterConfig(min_inliers=6))
        assert len(out) == 0

    def test_output_subset_of_input(self):
        rng = np.random.default_rng(3)
        ks, kt, m, neigh = self._affine_scene(rng, n=15, outlier_rows=(2, 9))
        out = filter_matches(m, ks, kt, neigh)
        assert set(out.pairs()) <= set(m.pairs())

    def test_threads_do_not_change_result(self):
        rng = np.random.default_rng(4)
        # several disjoint neighborhoods
        all_matches, all_stages, pairs = [], [], []
        src_all, tgt_all = [], []
        base = 0
        for block in range(5):
            n = 12
            src = rng.uniform(10, 90, size=(n, 2)) + block * 100
            a = np.eye(2) * rng.uniform(0.9, 1.1)
            tgt = src @ a.T + rng.uniform(-5, 5, size=2)
            src_all.append(src)
            tgt_all.append(tgt)
            idx = np.arange(base, base + n)
            pairs.append(NeighborhoodPair((base, base), idx, idx))
            all_matches += [(int(i), int(i), 1.5) for i in idx]
            all_stages += ["candidate"] * n
            base += n
        src_all = np.concatenate(src_all)
        tgt_all = np.concatenate(tgt_all)
        lim = max(src_all.max(), tgt_all.max()) + 10
        ks = KeypointSet(src_all.astype(np.float32), np.eye(base, dtype=np.float32),
                         int(lim), int(lim))
        kt = KeypointSet(tgt_all.astype(np.float32), np.eye(base, dtype=np.float32),
                         int(lim), int(lim))
        m = MatchSet(all_matches, all_stages)
        outs = [filter_matches(m, ks, kt, pairs, FilterConfig(rng_seed=11), threads=t)
                for t in (1, 2, 8)]
        for other in outs[1:]:
            assert outs[0].matches == other.matches
            assert outs[0].stage == other.stage

    def test_threshold_monotonicity(self):
        rng = np.random.default_rng(5)
        ks, kt, m, neigh = self._affine_scene(rng, n=18, outlier_rows=(1, 4, 6))
        small = filter_matches(m, ks, kt, neigh,
                               FilterConfig(inlier_threshold_factor=0.05, rng_seed=7))
        large = filter_matches(m, ks, kt, neigh,
                               FilterConfig(inlier_threshold_factor=0.5, rng_seed=7))
        assert set(small.pairs()) <= set(large.pairs())

    def test_determinism_same_seed(self):
        rng = np.random.default_rng(6)
        ks, kt, m, neigh = self._affine_scene(rng, n=25, outlier_rows=(3, 11, 20))
        a = filter_matches(m, ks, kt, neigh, FilterConfig(rng_seed=9))
        b = filter_matches(m, ks, kt, neigh, FilterConfig(rng_seed=9))
        assert a.matches == b.matches


class TestMatchPipeline:
    def _net(self, d=16, c=8):
        cfg = NetworkConfig(input_dim=d, hidden_dim=c, heads=2, l1=1, l2=1)
        return cfg, init_weights(cfg, seed=0, dtype=np.float64)

    def test_identity_grid_scene_full_recall(self):
        # spacing between R and sqrt(2) R: every match seeds its own dense
        # neighborhood, so nothing is stranded by suppression chains
        side = 7
        radius = 10.0
        spacing = 1.3 * radius
        pts = np.array([[5 + spacing * (k % side), 5 + spacing * (k // side)]
                        for k in range(side * side)], dtype=np.float32)
        dim = side * side
        frame = int(spacing * side + 10)
        desc = np.eye(dim, dtype=np.float32)
        ks = KeypointSet(pts, desc, frame, frame)
        kt = KeypointSet(pts.copy(), desc.copy(), frame, frame)
        gt = GroundTruth([(i, i) for i in range(dim)])

        cfg = NetworkConfig(input_dim=dim, hidden_dim=8, heads=2, l1=1, l2=1)
        weights = init_weights(cfg, seed=0, dtype=np.float64)
        ncfg = NeighborhoodConfig(r=radius, r_s=radius, r_t=radius)
        out = match_pipeline(ks, kt, weights, cfg, ncfg,
                             filter_cfg=FilterConfig(min_inliers=3))
        res = evaluate(out, gt, Homography(np.eye(3)), ks, kt)
        assert res.recall == 1.0
        assert res.precision == 1.0

    def test_empty_source(self):
        cfg, weights = self._net()
        ks = KeypointSet(np.zeros((0, 2)), np.zeros((0, 16)), 100, 100)
        kt, _, _, _ = generate_pair(2, 16, (100, 100), 16)[1], None, None, None
        kt = generate_pair(2, 16, (100, 100), 16)[1]
        out = match_pipeline(ks, kt, weights, cfg)
        assert len(out) == 0

    def test_filter_improves_or_keeps_precision(self):
        cfg, weights = self._net()
        ks, kt, gt, h = generate_pair(3, 96, (256, 256), 16,
                                      GenNoiseConfig(desc_sigma=0.4, distractors=40))
        dm = match_pipeline(ks, kt, weights, cfg, skip_filter=True)
        filt = match_pipeline(ks, kt, weights, cfg,
                              filter_cfg=FilterConfig(min_inliers=3))
        if len(dm) and len(filt):
            p_dm = evaluate(dm, gt, h, ks, kt).precision
            p_f = evaluate(filt, gt, h, ks, kt).precision
            assert p_f >= p_dm - 1e-9

    def test_verified_subset_of_candidates(self):
        cfg, weights = self._net()
        ks, kt, _, _ = generate_pair(4, 64, (256, 256), 16,
                                     GenNoiseConfig(desc_sigma=0.3, distractors=20))
        dm = match_pipeline(ks, kt, weights, cfg, skip_filter=True)
        filt = match_pipeline(ks, kt, weights, cfg,
                              filter_cfg=FilterConfig(min_inliers=3))
        assert set(filt.pairs()) <= set(dm.pairs())


class TestEvaluate:
    def _scene(self):
        pts = np.array([[10.0, 10.0], [20.0, 10.0], [30.0, 30.0], [40.0, 25.0]],
                       dtype=np.float32)
        ks = KeypointSet(pts, np.eye(4, dtype=np.float32), 64, 64)
        # target displaced by known per-match errors
        err = np.array([[0.5, 0.0], [2.0, 0.0], [4.0, 0.0], [20.0, 0.0]])
        kt = KeypointSet((pts + err).astype(np.float32), np.eye(4, dtype=np.float32),
                         64, 64)
        return ks, kt

    def test_constructed_errors(self):
        ks, kt = self._scene()
        m = MatchSet([(i, i, 1.0) for i in range(4)], ["verified"] * 4)
        gt = GroundTruth([(0, 0), (1, 1)])
        res = evaluate(m, gt, Homography(np.eye(3)), ks, kt)
        assert res.mma[3] == 0.5  # errors 0.5 and 2 within 3 px; 4 and 20 beyond
        assert res.mma[1] == 0.25
        assert res.mma[10] == 0.75
        assert res.precision == 0.5
        assert res.recall == 1.0
        assert res.num_matches == 4
        assert res.inlier_ratio == res.mma[3]

    def test_all_correct(self):
        ks, _ = self._scene()
        m = MatchSet([(i, i, 1.0) for i in range(4)], ["verified"] * 4)
        gt = GroundTruth([(i, i) for i in range(4)])
        res = evaluate(m, gt, Homography(np.eye(3)), ks, ks)
        assert all(v == 1.0 for v in res.mma.values())
        assert res.precision == res.recall == 1.0

    def test_empty_matchset(self):
        ks, kt = self._scene()
        res = evaluate(MatchSet([], []), GroundTruth([(0, 0)]), Homography(np.eye(3)),
                       ks, kt)
        assert res.num_matches == 0
        assert res.precision == 0.0
        assert all(v == 0.0 for v in res.mma.values())


class TestMatchSetType:
    def test_duplicate_rejected(self):
        with pytest.raises(ValueError):
            MatchSet([(0, 1, 1.0), (0, 1, 2.0)], ["seed", "seed"])

    def test_unknown_stage_rejected(self):
        with pytest.raises(ValueError):
            MatchSet([(0, 1, 1.0)], ["wild"])

    def test_filter_config_validation(self):
        with pytest.raises(ValueError):
            FilterConfig(ransac_iterations=0)
        with pytest.raises(ValueError):
            FilterConfig(min_inliers=2)
        with pytest.raises(ValueError):
            FilterConfig(inlier_threshold_factor=0.0)


class TestMatchFiles:
    def test_round_trip(self, tmp_path):
        m = MatchSet([(0, 3, 1.5), (2, 1, np.inf), (4, 4, 0.25)],
                     ["seed", "candidate", "verified"])
        p = tmp_path / "m.csv"
        write_matches(p, m)
        loaded = read_matches(p)
        assert loaded.matches == [(0, 3, 1.5), (2, 1, np.inf), (4, 4, 0.25)]
        assert loaded.stage == m.stage

    def test_header_enforced(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b,c\n")
        with pytest.raises(ValueError):
            read_matches(p)

    def test_metrics_json(self, tmp_path):
        metrics = Metrics({1: 0.25, 3: 0.5}, 0.5, 1.0, 4, 0.5)
        p = tmp_path / "metrics.json"
        write_metrics(p, metrics)
        import json
        loaded = json.loads(p.read_text())
        assert loaded["mma"]["3"] == 0.5
        assert loaded["precision"] == 0.5
        assert loaded["num_matches"] == 4
        assert set(loaded) == {"mma", "precision", "recall", "num_matches", "inlier_ratio"}
