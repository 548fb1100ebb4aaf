import numpy as np
import pytest

from fuse4d.fusion import (
    FilterResult,
    Masklet2D,
    Masklet3D,
    VoxelMasklet,
    dbscan_bev,
    filter_masklet,
    merge_cross_video,
    project_masklet,
    score_masklet,
    select_main_cluster,
    transfer_frame,
    voxel_iou,
)
from fuse4d.geometry import Pose
from fuse4d.recon import BACKGROUND_TAG, SparseVoxelGrid, TableSlice, object_tag

from conftest import naive_dbscan


def slice_from_mapping(mapping, tag_names=(BACKGROUND_TAG,)):
    """Build a TableSlice from {(u, v): (tag_idx, key)} with unit distances."""
    pixels, tags, keys = [], [], []
    for (u, v), (t, k) in sorted(mapping.items()):
        pixels.append((u, v))
        tags.append(t)
        keys.append(k)
    n = len(pixels)
    return TableSlice(np.array(pixels, dtype=np.int64).reshape(n, 2),
                      np.array(tags, dtype=np.int64),
                      np.array(keys, dtype=np.int64).reshape(n, 3),
                      np.ones(n), tuple(tag_names))


def flat_bev(v):
    tag, key = v
    return (key[0] * 0.1, key[1] * 0.1)


def make_vm(masklet_id, voxels, rates=None, camera="cam0"):
    """VoxelMasklet with given world-tag voxel keys and optional vote rates."""
    vm = VoxelMasklet(masklet_id, frozenset([camera]))
    for i, key in enumerate(voxels):
        v = (BACKGROUND_TAG, tuple(key))
        rate = 1.0 if rates is None else rates[i]
        vm.votes[v] = max(1, int(round(rate * 10)))
        vm.observations[v] = 10
        vm.bev[v] = (key[0] * 0.1, key[1] * 0.1)
    return vm


class TestProjectMasklet:
    def test_full_agreement_four_frames(self):
        # Two pixels map to the same voxel in every frame; mask covers both.
        table = {f: slice_from_mapping({(0, 0): (0, (5, 5, 0)), (1, 0): (0, (5, 5, 0))})
                 for f in range(4)}
        mask = np.zeros((2, 2), dtype=bool)
        mask[0, 0] = mask[0, 1] = True
        m = Masklet2D(1, "cam0", {f: mask for f in range(4)})
        vm = project_masklet(m, table, flat_bev)
        v = (BACKGROUND_TAG, (5, 5, 0))
        assert vm.votes == {v: 4}
        assert vm.observations == {v: 4}
        assert vm.vote_rate(v) == 1.0

    def test_empty_mask_no_votes(self):
        table = {0: slice_from_mapping({(0, 0): (0, (1, 1, 1))})}
        m = Masklet2D(1, "cam0", {0: np.zeros((2, 2), dtype=bool)})
        vm = project_masklet(m, table, flat_bev)
        assert len(vm) == 0
        assert vm.image_votes[("cam0", 0)] == frozenset()

    def test_matches_tally_oracle(self):
        # Frame 0: pixels a,b -> voxel X; pixel c -> voxel Y. Mask covers a, c.
        # Frame 1: pixel a -> X only, mask covers nothing; X still observed.
        vx, vy = (2, 0, 0), (9, 4, 0)
        t0 = slice_from_mapping({(0, 0): (0, vx), (1, 0): (0, vx), (0, 1): (0, vy)})
        t1 = slice_from_mapping({(0, 0): (0, vx)})
        m0 = np.zeros((2, 2), dtype=bool)
        m0[0, 0] = True   # pixel (0,0) = a
        m0[1, 0] = True   # pixel (0,1) = c
        m1 = np.zeros((2, 2), dtype=bool)
        m = Masklet2D(3, "cam0", {0: m0, 1: m1})
        vm = project_masklet(m, {0: t0, 1: t1}, flat_bev)
        x = (BACKGROUND_TAG, vx)
        y = (BACKGROUND_TAG, vy)
        assert vm.votes == {x: 1, y: 1}
        assert vm.observations == {x: 2, y: 1}
        assert vm.vote_rate(x) == 0.5
        assert vm.vote_rate(y) == 1.0

    def test_vote_rates_bounded(self):
        rng = np.random.default_rng(0)
        mapping = {(u, v): (0, (int(u), int(v), 0)) for u in range(4) for v in range(4)}
        table = {f: slice_from_mapping(mapping) for f in range(6)}
        frames = {f: rng.random((4, 4)) < 0.5 for f in range(6)}
        vm = project_masklet(Masklet2D(1, "cam0", frames), table, flat_bev)
        for v in vm.votes:
            assert 0.0 <= vm.vote_rate(v) <= 1.0
            assert vm.observations[v] >= vm.votes[v] >= 0

    def test_missing_slice_rejected(self):
        m = Masklet2D(1, "cam0", {0: np.zeros((2, 2), dtype=bool)})
        with pytest.raises(ValueError, match="lacks slices"):
            project_masklet(m, {}, flat_bev)


class TestDbscan:
    def test_two_separated_groups(self):
        rng = np.random.default_rng(1)
        a = rng.normal(scale=0.1, size=(10, 2))
        b = rng.normal(scale=0.1, size=(10, 2)) + np.array([5.0, 0.0])
        labels = dbscan_bev(np.vstack([a, b]), eps=0.5, min_pts=3)
        assert set(labels) == {0, 1}
        assert len(set(labels[:10])) == 1
        assert len(set(labels[10:])) == 1
        assert labels[0] != labels[10]

    def test_single_point_is_noise(self):
        labels = dbscan_bev(np.array([[0.0, 0.0]]), eps=0.5, min_pts=3)
        assert labels.tolist() == [-1]

    def test_matches_quadratic_oracle(self):
        rng = np.random.default_rng(2)
        for trial in range(10):
            n = int(rng.integers(5, 200))
            pts = rng.uniform(0, 10, size=(n, 2))
            eps = float(rng.uniform(0.3, 1.2))
            min_pts = int(rng.integers(2, 6))
            got = dbscan_bev(pts, eps, min_pts)
            expected = naive_dbscan(pts, eps, min_pts)
            assert_same_clustering(got, expected)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(0, 5, size=(80, 2))
        labels = dbscan_bev(pts, eps=0.6, min_pts=4)
        perm = rng.permutation(80)
        permuted = dbscan_bev(pts[perm], eps=0.6, min_pts=4)
        assert np.array_equal(permuted, labels[perm])

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            dbscan_bev(np.zeros((1, 2)), eps=0.0, min_pts=1)
        with pytest.raises(ValueError):
            dbscan_bev(np.zeros((1, 2)), eps=1.0, min_pts=0)


def assert_same_clustering(a, b):
    a, b = np.asarray(a), np.asarray(b)
    assert np.array_equal(a == -1, b == -1), "noise sets differ"
    fwd, bwd = {}, {}
    for x, y in zip(a, b):
        if x == -1:
            continue
        assert fwd.setdefault(x, y) == y
        assert bwd.setdefault(y, x) == x


class TestSelectMainCluster:
    def test_single_cluster_passthrough(self):
        vm = make_vm(1, [(i, 0, 0) for i in range(5)])
        labels = np.zeros(5, dtype=int)
        res = select_main_cluster(vm, labels)
        assert res.status == "ok"
        assert res.masklet.voxel_set() == vm.voxel_set()

    def test_highest_mean_rate_wins(self):
        vm = make_vm(1, [(0, 0, 0), (1, 0, 0), (50, 0, 0), (51, 0, 0)],
                     rates=[0.8, 0.8, 0.3, 0.3])
        labels = np.array([0, 0, 1, 1])
        res = select_main_cluster(vm, labels)
        assert res.cluster_id == 0
        assert res.masklet.voxel_set() == {(BACKGROUND_TAG, (0, 0, 0)),
                                           (BACKGROUND_TAG, (1, 0, 0))}

    def test_three_cluster_hand_means_and_ties(self):
        # Cluster means: 0 -> 0.5, 1 -> 0.9, 2 -> 0.9 but smaller. 1 wins by
        # size; equal-size equal-mean falls to the lower id.
        vm = make_vm(2, [(0, 0, 0), (1, 0, 0),
                         (10, 0, 0), (11, 0, 0), (12, 0, 0),
                         (20, 0, 0), (21, 0, 0)],
                     rates=[0.4, 0.6, 0.9, 0.9, 0.9, 0.9, 0.9])
        labels = np.array([0, 0, 1, 1, 1, 2, 2])
        res = select_main_cluster(vm, labels)
        assert res.cluster_id == 1
        assert res.mean_vote_rate == pytest.approx(0.9)
        vm2 = make_vm(2, [(0, 0, 0), (1, 0, 0), (5, 0, 0), (6, 0, 0)],
                      rates=[0.7, 0.7, 0.7, 0.7])
        res2 = select_main_cluster(vm2, np.array([0, 0, 1, 1]))
        assert res2.cluster_id == 0

    def test_all_noise_flagged(self):
        vm = make_vm(1, [(0, 0, 0)])
        res = select_main_cluster(vm, np.array([-1]))
        assert res.status == "all-noise"
        assert len(res.masklet) == 0

    def test_filtering_never_raises_vote_rate(self):
        rng = np.random.default_rng(4)
        keys = [(int(k[0]), int(k[1]), 0) for k in rng.integers(0, 30, size=(40, 2))]
        keys = list(dict.fromkeys(keys))
        rates = rng.uniform(0.1, 1.0, size=len(keys)).tolist()
        vm = make_vm(1, keys, rates=rates)
        res = filter_masklet(vm, eps=0.35, min_pts=3)
        for v in res.masklet.votes:
            assert res.masklet.vote_rate(v) == vm.vote_rate(v)


class TestMerge:
    def test_disjoint_no_merge(self):
        a = make_vm(1, [(0, 0, 0)], camera="cam0")
        b = make_vm(2, [(9, 9, 0)], camera="cam1")
        merged, id_map = merge_cross_video([a, b], overlap_threshold=0.5)
        assert len(merged) == 2
        assert id_map == {1: 1, 2: 2}

    def test_identical_from_two_cameras(self):
        keys = [(0, 0, 0), (1, 0, 0)]
        a = make_vm(1, keys, camera="cam0")
        b = make_vm(2, keys, camera="cam1")
        merged, id_map = merge_cross_video([a, b], overlap_threshold=0.5)
        assert len(merged) == 1
        out = merged[0]
        assert out.masklet_id == 1
        assert id_map == {1: 1, 2: 1}
        for v in out.votes:
            assert out.votes[v] == a.votes[v] + b.votes[v]

    def test_same_camera_never_merges(self):
        keys = [(0, 0, 0), (1, 0, 0)]
        a = make_vm(1, keys, camera="cam0")
        b = make_vm(2, keys, camera="cam0")
        merged, _ = merge_cross_video([a, b], overlap_threshold=0.5)
        assert len(merged) == 2

    def test_chain_components(self):
        base = [(i, 0, 0) for i in range(10)]
        a = make_vm(1, base[:8], camera="cam0")                  # A
        b = make_vm(2, base[2:10], camera="cam1")                # B: IoU(A,B)=6/10
        c = make_vm(3, base[4:10] + [(20, 0, 0)] * 0, camera="cam2")
        # IoU(B,C) = 6/8 = 0.75; IoU(A,C) = 4/10 = 0.4 < 0.5.
        assert voxel_iou(a.voxel_set(), b.voxel_set()) == pytest.approx(0.6)
        assert voxel_iou(a.voxel_set(), c.voxel_set()) < 0.5
        merged, id_map = merge_cross_video([a, b, c], overlap_threshold=0.5)
        assert len(merged) == 1
        assert id_map == {1: 1, 2: 1, 3: 1}

    def test_idempotent(self):
        keys = [(0, 0, 0), (1, 0, 0)]
        a = make_vm(1, keys, camera="cam0")
        b = make_vm(2, keys, camera="cam1")
        merged, _ = merge_cross_video([a, b], overlap_threshold=0.5)
        again, id_map = merge_cross_video(merged, overlap_threshold=0.5)
        assert len(again) == len(merged)
        assert all(x.votes == y.votes for x, y in zip(again, merged))


class TestTransfer:
    GRIDS = {BACKGROUND_TAG: SparseVoxelGrid(0.2)}
    POSES = {}

    def test_point_at_voxel_center_included(self):
        vm = make_vm(1, [(0, 0, 0)])
        pts = np.array([[0.1, 0.1, 0.1]])  # exactly the center of key (0,0,0)
        out = transfer_frame([vm], pts, self.GRIDS, self.POSES, radius=0.3)
        assert out == {1: np.array([0])} or out[1].tolist() == [0]

    def test_far_point_excluded(self):
        vm = make_vm(1, [(0, 0, 0)])
        pts = np.array([[10.0, 10.0, 0.0]])
        out = transfer_frame([vm], pts, self.GRIDS, self.POSES, radius=0.2)
        assert out == {}

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        vm1 = make_vm(1, [(i, j, 0) for i in range(3) for j in range(3)])
        vm2 = make_vm(2, [(i + 20, j, 0) for i in range(3) for j in range(3)])
        pts = np.vstack([rng.uniform(-0.5, 1.2, size=(50, 3)),
                         rng.uniform(3.5, 5.2, size=(50, 3))])
        radius = 0.35
        out = transfer_frame([vm1, vm2], pts, self.GRIDS, self.POSES, radius)

        # Oracle: exhaustive nearest-voxel distance per point.
        def centers(vm):
            return np.array([self.GRIDS[BACKGROUND_TAG].center(np.array(k))
                             for _, k in vm.ordered_voxels()])
        expected: dict[int, list[int]] = {}
        for i, p in enumerate(pts):
            best = (np.inf, None)
            for vm in (vm1, vm2):
                d = np.linalg.norm(centers(vm) - p, axis=1).min()
                if d <= radius and d < best[0]:
                    best = (d, vm.masklet_id)
            if best[1] is not None:
                expected.setdefault(best[1], []).append(i)
        assert {k: v.tolist() for k, v in out.items()} == expected

    def test_foreground_voxels_via_frame_pose(self):
        tag = object_tag(7)
        grids = {tag: SparseVoxelGrid(0.2, tag)}
        pose = Pose.from_yaw(0.5, (3.0, 1.0, 0.0))
        vm = VoxelMasklet(7, frozenset(["cam0"]))
        v = (tag, (0, 0, 0))
        vm.votes[v] = 1
        vm.observations[v] = 1
        vm.bev[v] = (0.0, 0.0)
        world_center = pose.apply(grids[tag].center(np.array([0, 0, 0])))[0]
        pts = np.array([world_center, world_center + np.array([5.0, 0, 0])])
        out = transfer_frame([vm], pts, grids, {tag: pose}, radius=0.3)
        assert out[7].tolist() == [0]


class TestScore:
    def vm_with(self, keys):
        return make_vm(1, keys)

    def test_perfect_agreement(self):
        keys = [(i, 0, 0) for i in range(4)]
        vm = self.vm_with(keys)
        vox = frozenset((BACKGROUND_TAG, k) for k in keys)
        proj = {("cam0", f): vox for f in range(3)}
        vis = {("cam0", f): vox for f in range(3)}
        res = score_masklet(vm, proj, vis)
        assert res.status == "ok"
        assert res.score == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_zero(self):
        vm = self.vm_with([(0, 0, 0)])
        other = frozenset({(BACKGROUND_TAG, (9, 9, 9))})
        vis = {("cam0", 0): frozenset({(BACKGROUND_TAG, (0, 0, 0)),
                                       (BACKGROUND_TAG, (9, 9, 9))})}
        res = score_masklet(vm, {("cam0", 0): other}, vis)
        assert res.score == 0.0

    def test_hand_mean(self):
        keys = [(i, 0, 0) for i in range(10)]
        vm = self.vm_with(keys)
        v = [(BACKGROUND_TAG, k) for k in keys]
        proj = {("cam0", 0): frozenset(v[:1]),
                ("cam0", 1): frozenset(v[:3]),
                ("cam0", 2): frozenset(v[:7])}
        vis = {("cam0", 0): frozenset(v[:2]),    # IoU 1/2
               ("cam0", 1): frozenset(v[:5]),    # IoU 3/5
               ("cam0", 2): frozenset(v[:10])}   # IoU 7/10
        res = score_masklet(vm, proj, vis)
        assert res.score == pytest.approx(0.6, abs=1e-12)

    def test_never_visible_is_no_score(self):
        vm = self.vm_with([(0, 0, 0)])
        vis = {("cam0", 0): frozenset({(BACKGROUND_TAG, (5, 5, 5))})}
        res = score_masklet(vm, {}, vis)
        assert res.status == "no-score"
        assert res.score is None


class TestMaskletTypes:
    def test_masklet3d_rejects_duplicates(self):
        with pytest.raises(ValueError, match="duplicate"):
            Masklet3D(1, {0: np.array([1, 1, 2])})

    def test_masklet3d_sorts_indices(self):
        m = Masklet3D(1, {0: np.array([5, 1, 3])})
        assert m.frames[0].tolist() == [1, 3, 5]
