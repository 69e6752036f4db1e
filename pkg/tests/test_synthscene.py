import math
import time

import numpy as np
import pytest

from ghostgeo.errors import DegeneratePoseError, DomainError, StructuralError
from ghostgeo.geometry import CameraIntrinsics, DEFAULT_INTRINSICS
from ghostgeo.synthscene import (
    CAMERA_HEIGHT,
    PRESETS,
    Box,
    Scene,
    geodesic,
    load_scene,
    make_preset,
    occupancy,
    panorama,
    propose_candidates,
    render_depth,
    render_view,
    resample_polyline,
    save_scene,
    shortest_path,
    wrap_angle,
)
from ghostgeo.topograph import Pose
from oracles import octile, pixel_ray, ray_aabb

BIG = (-50.0, -50.0, 50.0, 50.0)
SMALL = CameraIntrinsics(16.0, 16.0, 16.0, 16.0, 32, 32)


def open_scene(*boxes):
    return Scene(tuple(boxes), BIG)


def wall_ahead(dist):
    return Box((dist, -20.0, 0.0), (dist + 0.2, 20.0, 20.0))


def oracle_depth(scene, pose, k, offset, u, v):
    psi = pose.theta + offset
    o = (pose.x, pose.y, scene.ground_z + CAMERA_HEIGHT)
    d = pixel_ray(u, v, k.fx, k.fy, k.cx, k.cy, psi)
    ts = []
    if d[2] < 0:
        ts.append((scene.ground_z - o[2]) / d[2])
    for b in scene.boxes:
        t = ray_aabb(o, d, b.lo, b.hi)
        if t is not None and t > 0:
            ts.append(t)
    t = min(ts, default=math.inf)
    return t if t <= 10.0 else math.nan


class TestRender:
    def test_fronto_parallel_wall(self):
        dm = render_depth(open_scene(wall_ahead(2.0)), Pose(0, 0, 0))
        z = dm.values
        wall_rows = z[: int(DEFAULT_INTRINSICS.cy) + 1]
        assert np.all(wall_rows == 2.0)
        # ground rows hit either ground (closer) or wall at 2.0
        assert np.nanmax(z) == 2.0

    def test_ground_only_upper_half_invalid(self):
        z = render_depth(open_scene(), Pose(0, 0, 0.3)).values
        cy = int(DEFAULT_INTRINSICS.cy)
        assert np.all(np.isnan(z[: cy + 1]))
        # near rows hit the ground; z = h / ((v-cy)/fy)
        v = DEFAULT_INTRINSICS.height - 1
        assert z[v, 0] == pytest.approx(CAMERA_HEIGHT * DEFAULT_INTRINSICS.fy / (v - DEFAULT_INTRINSICS.cy))

    def test_box_left_half_matches_oracle(self):
        # box covers the left of the image (world +y side when facing +x)
        box = Box((2.5, 0.0, 0.0), (4.0, 30.0, 5.0))
        scene = open_scene(box)
        pose = Pose(0, 0, 0)
        z, hit = render_view(scene, pose, SMALL)
        assert np.all(z[:, :16][hit[:, :16] == 0] == 2.5)
        assert np.all(hit[:16, :16] == 0)
        assert not np.any(hit[:, 17:] == 0)
        for v in range(32):
            for u in range(32):
                ref = oracle_depth(scene, pose, SMALL, 0.0, u, v)
                if math.isnan(ref):
                    assert math.isnan(z[v, u])
                else:
                    assert abs(z[v, u] - ref) <= 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_random_scene_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        boxes = []
        while len(boxes) < 6:
            c = rng.uniform(-6, 6, size=2)
            s = rng.uniform(0.3, 2.0, size=3)
            if np.any(np.abs(c) - s[:2] < 0.8):
                continue
            boxes.append(Box((c[0] - s[0], c[1] - s[1], 0.0), (c[0] + s[0], c[1] + s[1], 2 * s[2])))
        scene = open_scene(*boxes)
        pose = Pose(*rng.uniform(-0.5, 0.5, size=2), rng.uniform(-math.pi, math.pi))
        off = rng.uniform(0, 2 * math.pi)
        z, _ = render_view(scene, pose, DEFAULT_INTRINSICS, off)
        for u, v in rng.integers(0, 256, size=(300, 2)):
            ref = oracle_depth(scene, pose, DEFAULT_INTRINSICS, off, u, v)
            if math.isnan(ref):
                assert math.isnan(z[v, u])
            else:
                assert abs(z[v, u] - ref) <= 1e-4

    def test_far_plane(self):
        z = render_depth(open_scene(wall_ahead(10.5)), Pose(0, 0, 0)).values
        assert np.all(np.isnan(z[:128]))
        z = render_depth(open_scene(wall_ahead(9.5)), Pose(0, 0, 0)).values
        assert np.all(z[:128] == 9.5)

    def test_camera_inside_box(self):
        scene = open_scene(Box((-1, -1, 0), (1, 1, 2)))
        with pytest.raises(DegeneratePoseError):
            render_depth(scene, Pose(0, 0, 0))
        # a low box under the camera is fine
        render_depth(open_scene(Box((-1, -1, 0), (1, 1, 1))), Pose(0, 0, 0))

    def test_degenerate_box(self):
        with pytest.raises(DomainError):
            Box((0, 0, 0), (1, 0, 1))


class TestPanorama:
    def test_twelve_views_and_budget(self):
        spec = make_preset("room_clutter", 0)
        t = time.perf_counter()
        views = panorama(spec.scene, spec.start)
        assert time.perf_counter() - t < 2.0
        assert len(views) == 12 and all(v.values.shape == (256, 256) for v in views)

    def test_ground_only_symmetric(self):
        views = panorama(open_scene(), Pose(0, 0, 0.1))
        for v in views[1:]:
            np.testing.assert_allclose(v.values, views[0].values, rtol=0, atol=1e-9)

    def test_four_fold_ring(self):
        # AABBs only reach 4-fold symmetry; views 90 degrees apart must agree
        r, t = 3.0, 0.3
        ring = [
            Box((r, -r, 0), (r + t, r, 3)),
            Box((-r - t, -r, 0), (-r, r, 3)),
            Box((-r, r, 0), (r, r + t, 3)),
            Box((-r, -r - t, 0), (r, -r, 3)),
        ]
        views = panorama(open_scene(*ring), Pose(0, 0, 0))
        for k in range(12):
            np.testing.assert_allclose(views[(k + 3) % 12].values, views[k].values, rtol=0, atol=1e-6)

    def test_heading_additivity(self):
        spec = make_preset("four_way", 3)
        p = spec.start
        a = panorama(spec.scene, p)
        b = panorama(spec.scene, Pose(p.x, p.y, p.theta + math.pi / 6))
        for k in range(12):
            x, y = a[(k + 1) % 12].values, b[k].values
            assert np.array_equal(np.isnan(x), np.isnan(y))
            np.testing.assert_allclose(x, y, rtol=0, atol=1e-6)


class TestCandidates:
    def test_open_scene_all_at_cap(self):
        pose = Pose(0, 0, 0)
        cands = propose_candidates(panorama(open_scene(), pose), pose, 3.0, open_scene())
        assert [c.view for c in cands] == list(range(12))
        assert all(c.distance == 3.0 for c in cands)
        for c in cands:
            assert c.pose.dist(pose) == pytest.approx(3.0, abs=1e-12)
            assert c.pose.theta == pytest.approx(wrap_angle(c.view * math.pi / 6))

    def test_enclosed(self):
        h = 0.4
        boxes = [
            Box((h, -h - 0.1, 0), (h + 0.1, h + 0.1, 3)),
            Box((-h - 0.1, -h - 0.1, 0), (-h, h + 0.1, 3)),
            Box((-h, h, 0), (h, h + 0.1, 3)),
            Box((-h, -h - 0.1, 0), (h, -h, 3)),
        ]
        scene = open_scene(*boxes)
        pose = Pose(0, 0, 0)
        assert propose_candidates(panorama(scene, pose), pose, 3.0) == []

    def test_wall_ahead(self):
        scene = open_scene(Box((2.0, -1.5, 0), (2.2, 1.5, 4)))
        pose = Pose(0, 0, 0)
        cands = propose_candidates(panorama(scene, pose), pose, 3.0, scene)
        by_view = {c.view: c for c in cands}
        assert by_view[0].distance == pytest.approx(1.7, abs=1e-12)
        assert by_view[0].pose.x == pytest.approx(1.7)
        for k in (3, 4, 5, 6, 7, 8, 9):
            assert by_view[k].distance == 3.0

    def test_wrong_view_count(self):
        with pytest.raises(DomainError):
            propose_candidates([], Pose(0, 0), 3.0)

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_segments_clear_inflated_boxes(self, name):
        for seed in range(3):
            spec = make_preset(name, seed)
            pose = spec.start
            for c in propose_candidates(panorama(spec.scene, pose), pose, 3.0, spec.scene):
                a, b = np.array(pose.xy()), np.array(c.pose.xy())
                for box in spec.scene.boxes:
                    # dense sampling oracle for segment vs inflated footprint
                    for s in np.linspace(0, 1, 200):
                        p = a + s * (b - a)
                        assert not (
                            box.lo[0] - 0.2 < p[0] < box.hi[0] + 0.2 and box.lo[1] - 0.2 < p[1] < box.hi[1] + 0.2
                        )


class TestGeodesic:
    def test_empty_345(self):
        grid = occupancy(Scene((), (-1, -1, 5, 5)), 0.1)
        d = geodesic(grid, (0.05, 0.05), (3.05, 4.05))
        assert 5.0 <= d <= 5.0 * 1.08
        assert d == pytest.approx(0.1 * octile(30, 40))

    def test_same_point(self):
        grid = occupancy(Scene((), (-1, -1, 5, 5)), 0.1)
        assert geodesic(grid, (1.0, 1.0), (1.0, 1.0)) == 0.0

    def test_goal_in_box(self):
        grid = occupancy(Scene((Box((2, 2, 0), (3, 3, 1)),), (0, 0, 5, 5)), 0.1)
        with pytest.raises(DomainError):
            geodesic(grid, (0.5, 0.5), (2.5, 2.5))

    def test_disconnected(self):
        grid = occupancy(Scene((Box((2, 0, 0), (2.3, 5, 1)),), (0, 0, 5, 5)), 0.1)
        assert geodesic(grid, (0.5, 0.5), (4.5, 4.5)) == math.inf

    def test_detour_longer_than_straight(self):
        scene = Scene((Box((2, 0, 0), (2.3, 4, 1)),), (0, 0, 5, 5))
        grid = occupancy(scene, 0.1)
        d, path = shortest_path(grid, (0.55, 0.55), (4.55, 0.55))
        # any free path must round the wall's top end at y=4
        assert d >= math.dist((0.55, 0.55), (2, 4)) + 0.3 + math.dist((2.3, 4), (4.55, 0.55))
        assert all(grid.free(*p) for p in path)

    def test_cell_blocked_iff_center_in_footprint(self, rng):
        box = Box((1.03, 0.97, 0), (2.51, 1.49, 1))
        grid = occupancy(Scene((box,), (0, 0, 4, 3)), 0.1)
        for i in range(grid.blocked.shape[0]):
            for j in range(grid.blocked.shape[1]):
                cx, cy = grid.center(i, j)
                inside = box.lo[0] <= cx <= box.hi[0] and box.lo[1] <= cy <= box.hi[1]
                assert grid.blocked[i, j] == inside

    @pytest.mark.parametrize("seed", range(20))
    def test_lower_bound(self, seed):
        spec = make_preset("room_clutter", seed)
        grid = occupancy(spec.scene, 0.1)
        rng = np.random.default_rng(seed)
        a = b = None
        while a is None or not grid.free(*a):
            a = tuple(rng.uniform(0, 9, size=2))
        while b is None or not grid.free(*b):
            b = tuple(rng.uniform(0, 9, size=2))
        d = geodesic(grid, a, b)
        ca, cb = grid.center(*grid.cell_of(*a)), grid.center(*grid.cell_of(*b))
        assert d >= math.dist(ca, cb) - 1e-9


class TestPresetsAndIO:
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_preset_reachable(self, name):
        spec = make_preset(name, 1)
        grid = occupancy(spec.scene, 0.1)
        assert grid.free(*spec.start.xy()) and grid.free(*spec.goal)
        assert spec.reference[0] == spec.start.xy() and spec.reference[-1] == spec.goal
        assert geodesic(grid, spec.start.xy(), spec.goal) < math.inf

    def test_preset_deterministic(self):
        assert make_preset("room_clutter", 5).scene == make_preset("room_clutter", 5).scene
        assert make_preset("room_clutter", 5).scene != make_preset("room_clutter", 6).scene

    def test_unknown_preset(self):
        with pytest.raises(DomainError):
            make_preset("maze", 0)

    def test_json_roundtrip(self, tmp_path):
        scene = make_preset("t_junction", 2).scene
        save_scene(scene, tmp_path / "s.json")
        back = load_scene(tmp_path / "s.json")
        assert back.boxes == scene.boxes and back.bounds == scene.bounds

    def test_json_malformed(self):
        with pytest.raises(StructuralError):
            Scene.from_dict({"bounds": [0, 0, 1, 1]})
        with pytest.raises(DomainError):
            Scene.from_dict({"bounds": [0, 0, 1, 1], "boxes": [{"min": [0, 0, 0], "max": [2, 1, 1]}]})

    def test_resample(self):
        pts = resample_polyline([(0, 0), (1, 0), (1, 1)], 0.25)
        assert len(pts) == 9
        steps = [math.dist(a, b) for a, b in zip(pts, pts[1:])]
        assert all(s == pytest.approx(0.25) for s in steps)
