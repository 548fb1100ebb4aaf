"""Shared test oracles and fixtures."""

import numpy as np
import pytest


@pytest.fixture(scope="session")
def scene():
    from fuse4d.synthetic import build_scene

    return build_scene()


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory, scene):
    from fuse4d.synthetic import write_fixture

    root = tmp_path_factory.mktemp("fixture")
    write_fixture(scene, root)
    return root


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def brute_force_click(pred, gt):
    """Exhaustive corrective-click oracle.

    Finds connected components (4-neighborhood BFS) of the false-negative
    and false-positive masks, picks the larger of the two largest components
    (ties to false-negative), and returns the pixel of that component whose
    euclidean distance to the nearest non-component pixel (image border
    padded as outside) is maximal, ties in row-major order. Returns
    (kind, (u, v)).
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    h, w = gt.shape

    def components(mask):
        seen = np.zeros_like(mask)
        comps = []
        for r in range(h):
            for c in range(w):
                if mask[r, c] and not seen[r, c]:
                    comp = []
                    stack = [(r, c)]
                    seen[r, c] = True
                    while stack:
                        y, x = stack.pop()
                        comp.append((y, x))
                        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                            yy, xx = y + dy, x + dx
                            if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not seen[yy, xx]:
                                seen[yy, xx] = True
                                stack.append((yy, xx))
                    comps.append(sorted(comp))
        return comps

    def largest(mask):
        comps = components(mask)
        if not comps:
            return None
        return max(comps, key=len)  # max keeps the first (scan-order) on ties

    fn = largest(gt & ~pred)
    fp = largest(pred & ~gt)
    fn_size = len(fn) if fn else 0
    fp_size = len(fp) if fp else 0
    comp, kind = (fn, "positive_click") if fn_size >= fp_size else (fp, "negative_click")
    comp_set = set(comp)
    outside = [(rr, cc)
               for rr in range(-1, h + 1) for cc in range(-1, w + 1)
               if not (0 <= rr < h and 0 <= cc < w) or (rr, cc) not in comp_set]
    best = (-1.0, None)
    for r in range(h):
        for c in range(w):
            if (r, c) not in comp_set:
                continue
            d2 = min((r - rr) ** 2 + (c - cc) ** 2 for rr, cc in outside)
            d = np.sqrt(d2)
            if d > best[0] + 1e-9:
                best = (d, (c, r))
    return kind, best[1]


def brute_force_boundary_f(pred, gt, tolerance_px):
    """Exhaustive boundary F-measure oracle.

    Boundary pixels are mask pixels with a 4-neighbor (or image edge)
    outside the mask; a boundary pixel matches when some opposite boundary
    pixel lies within euclidean distance tolerance_px.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)

    def boundary(m):
        h, w = m.shape
        out = []
        for r in range(h):
            for c in range(w):
                if not m[r, c]:
                    continue
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    rr, cc = r + dr, c + dc
                    if rr < 0 or rr >= h or cc < 0 or cc >= w or not m[rr, cc]:
                        out.append((r, c))
                        break
        return out

    pb, gb = boundary(pred), boundary(gt)
    if not pb and not gb:
        return 1.0
    if not pb or not gb:
        return 0.0

    def matched(points, targets):
        hits = 0
        for p in points:
            for t in targets:
                if (p[0] - t[0]) ** 2 + (p[1] - t[1]) ** 2 <= tolerance_px ** 2:
                    hits += 1
                    break
        return hits

    precision = matched(pb, gb) / len(pb)
    recall = matched(gb, pb) / len(gb)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def naive_dbscan(points, eps, min_pts):
    """Quadratic reference DBSCAN with the engine's border rule.

    Full distance matrix, no KD-tree, no canonical sort: core points are
    those with >= min_pts neighbors within eps (self included); clusters are
    connected components of the core-core graph; a border point joins the
    cluster of its lexicographically smallest core neighbor.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    within = d <= eps
    core = within.sum(axis=1) >= min_pts
    labels = [-1] * n
    cluster = 0
    for i in range(n):
        if not core[i] or labels[i] != -1:
            continue
        stack = [i]
        labels[i] = cluster
        while stack:
            j = stack.pop()
            for k in range(n):
                if core[k] and within[j, k] and labels[k] == -1:
                    labels[k] = cluster
                    stack.append(k)
        cluster += 1
    for i in range(n):
        if core[i] or labels[i] != -1:
            continue
        cands = [k for k in range(n) if core[k] and within[i, k]]
        if cands:
            best = min(cands, key=lambda k: (pts[k, 0], pts[k, 1]))
            labels[i] = labels[best]
    return np.array(labels)


def fine_step_raycast(background, foreground, fg_poses, cam_pose, intrinsics,
                      max_range):
    """Dense ray sampling oracle (step = voxel/10).

    Walks each pixel ray in tiny steps and reports the first occupied voxel
    across all grids, skipping the voxel containing the ray origin to mirror
    the engine's positive-entry-distance contract. Returns
    {(u, v): (tag, key)}.
    """
    from fuse4d.recon import BACKGROUND_TAG, object_tag, pack_keys

    step = background.voxel_size / 10.0
    ts = np.arange(step, max_range, step)

    grids = [(BACKGROUND_TAG, background, None)]
    for oid in sorted(foreground):
        grids.append((object_tag(oid), foreground[oid], fg_poses[oid]))

    result = {}
    for u in range(intrinsics.width):
        for v in range(intrinsics.height):
            d_cam = intrinsics.pixel_rays([(u, v)])[0]
            d_world = cam_pose.rotation @ d_cam
            o_world = cam_pose.translation
            best = None
            for tag, grid, pose in grids:
                if pose is None:
                    o, d = o_world, d_world
                else:
                    inv = pose.invert()
                    o = inv.apply(o_world)[0]
                    d = inv.rotation @ d_world
                origin_key = np.floor(o / grid.voxel_size).astype(np.int64)
                samples = o + ts[:, None] * d
                keys = np.floor(samples / grid.voxel_size).astype(np.int64)
                packed = pack_keys(keys)
                occupied = np.isin(packed, grid.packed_keys())
                occupied &= ~np.all(keys == origin_key, axis=1)
                idx = np.flatnonzero(occupied)
                if len(idx):
                    t = ts[idx[0]]
                    k = keys[idx[0]]
                    if best is None or t < best[0]:
                        best = (t, tag, (int(k[0]), int(k[1]), int(k[2])))
            if best is not None:
                result[(u, v)] = (best[1], best[2])
    return result
