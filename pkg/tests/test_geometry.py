import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from assemblypolicy import rotations
from assemblypolicy.geometry import (Box, CameraModel, GeometryError, PointCloud, backproject, bilinear_read,
                                     crop_and_zoom, crop_workspace, fine_pitch, gaussian_heatmap,
                                     gaussian_heatmaps, log_likelihood, pinhole_camera, read_pgm, read_ppm,
                                     render_views, splat, triangulate, virtual_views, write_pgm, write_ppm,
                                     write_xyzrgb)

WS = Box([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])


def test_principal_ray_backprojects_onto_axis():
    cam = CameraModel(100.0, 100.0, 4.0, 3.0, 9, 7)
    depth = np.zeros((7, 9))
    depth[3, 4] = 0.8
    pc = backproject(depth, np.ones((7, 9, 3)), cam)
    np.testing.assert_allclose(pc.positions, [[0.0, 0.0, 0.8]], atol=1e-12)


def test_zero_depth_gives_empty_cloud():
    cam = CameraModel(100.0, 100.0, 4.0, 3.0, 9, 7)
    assert len(backproject(np.zeros((7, 9)), np.zeros((7, 9, 3)), cam)) == 0


def test_zero_focal_length_rejected():
    with pytest.raises(GeometryError):
        CameraModel(0.0, 100.0, 4.0, 3.0, 9, 7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["pinhole", "orthographic"]))
def test_project_backproject_round_trip(seed, kind):
    rng = np.random.default_rng(seed)
    q = rotations.random_unit(rng, 1)[0]
    cam = CameraModel(80.0, 90.0, 15.5, 11.5, 32, 24, rotation=q, translation=rng.standard_normal(3),
                      kind=kind, scale=0.01)
    depth = rng.uniform(0.2, 3.0, size=(24, 32))
    depth[rng.random((24, 32)) < 0.3] = 0
    pc = backproject(depth, np.zeros((24, 32, 3)), cam)
    uv, z = cam.project(pc.positions)
    vs, us = np.nonzero(depth > 0)
    np.testing.assert_allclose(uv, np.stack([us, vs], axis=1), atol=1e-6)
    np.testing.assert_allclose(z, depth[vs, us], atol=1e-9)


def test_crop_closed_bounds_and_oracle():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.5, 1.5, size=(500, 3))
    pts[0] = [1.0, 0.5, 0.0]   # on two faces
    pc = PointCloud(pts, rng.random((500, 3)))
    out = crop_workspace(pc, WS)
    keep = [i for i, p in enumerate(pts) if all(0.0 <= c <= 1.0 for c in p)]
    np.testing.assert_array_equal(out.positions, pts[keep])
    np.testing.assert_array_equal(out.colors, pc.colors[keep])
    assert 0 in keep
    assert len(crop_workspace(pc, Box([5, 5, 5], [6, 6, 6]))) == 0


def test_views_cover_workspace():
    views = virtual_views(WS, 16)
    pts = np.random.default_rng(1).uniform(0, 1, size=(200, 3))
    hits = sum(v.in_bounds(v.project(pts)[0]).astype(int) for v in views)
    assert np.all(hits >= 2)


def test_render_center_point_and_empty_cloud():
    views = virtual_views(WS, 9)
    pc = PointCloud(WS.center[None], [[1.0, 0.0, 0.0]])
    imgs, masks = render_views(pc, views)
    for img, m in zip(imgs, masks):
        assert m.sum() == 1 and m[4, 4]
        np.testing.assert_array_equal(img[4, 4], [1, 0, 0])
    imgs, masks = render_views(PointCloud(np.zeros((0, 3)), np.zeros((0, 3))), views, background=0.25)
    assert not masks.any() and np.all(imgs == 0.25)


def test_nearer_point_wins_on_shared_ray():
    top = virtual_views(WS, 9)[0]
    pts = np.array([[0.5, 0.5, 0.2], [0.5, 0.5, 0.7], [0.5, 0.5, 0.4]])
    cols = np.eye(3)
    rgb, mask, depth = splat(PointCloud(pts, cols), top)
    _, z = top.project(pts)
    np.testing.assert_array_equal(rgb[4, 4], cols[np.argmin(z)])
    assert depth[4, 4] == pytest.approx(z.min())


def test_equal_depth_tie_goes_to_lowest_index():
    top = virtual_views(WS, 9)[0]
    pts = np.array([[0.5, 0.5, 0.6], [0.5 + 1e-4, 0.5, 0.6]])
    rgb, _, _ = splat(PointCloud(pts, [[0, 1, 0], [1, 0, 0]]), top)
    np.testing.assert_array_equal(rgb[4, 4], [0, 1, 0])


def test_render_is_order_invariant_with_unique_depths():
    rng = np.random.default_rng(2)
    pts = rng.uniform(0, 1, size=(400, 3))
    cols = rng.random((400, 3))
    perm = rng.permutation(400)
    a, ma = render_views(PointCloud(pts, cols), virtual_views(WS, 16))
    b, mb = render_views(PointCloud(pts[perm], cols[perm]), virtual_views(WS, 16))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ma, mb)


def test_gaussian_heatmap_properties():
    view = virtual_views(WS, 32)[0]
    p = np.array([0.31, 0.62, 0.5])
    hm = gaussian_heatmap(p, view, sigma=1.5)
    assert hm.onscreen and abs(hm.values.sum() - 1) < 1e-6
    uv, _ = view.project(p[None])
    peak = np.unravel_index(np.argmax(hm.values), hm.values.shape)
    assert peak == (round(uv[0, 1]), round(uv[0, 0]))


def test_gaussian_ratio_one_sigma():
    view = virtual_views(WS, 33)[0]
    hm = gaussian_heatmap(WS.center, view, sigma=2.0).values
    assert hm[16, 18] / hm[16, 16] == pytest.approx(np.exp(-0.5), rel=1e-12)


def test_offscreen_gaussian_is_uniform():
    view = virtual_views(WS, 8)[0]
    hm = gaussian_heatmap([5.0, 5.0, 0.5], view)
    assert not hm.onscreen
    np.testing.assert_allclose(hm.values, 1 / 64)


def test_triangulate_recovers_rendered_point():
    rng = np.random.default_rng(3)
    views = virtual_views(WS, 64)
    for _ in range(10):
        q = rng.uniform(0.05, 0.95, 3)
        tri = triangulate(gaussian_heatmaps(q, views), views, WS)
        assert not tri.degenerate
        assert np.linalg.norm(tri.point - q) < 2 * np.linalg.norm(fine_pitch(WS))


def test_triangulate_symmetric_two_views():
    views = virtual_views(WS, 32)[1:]
    q = np.array([0.5, 0.5, 0.3])
    hms = gaussian_heatmaps(q, views)
    tri = triangulate(hms, views, WS)
    pitch = WS.size / 32
    assert abs(tri.point[0] - 0.5) <= pitch[0] and abs(tri.point[1] - 0.5) <= pitch[1]


def test_triangulate_invariant_to_log_offset():
    views = virtual_views(WS, 32)
    hms = gaussian_heatmaps([0.2, 0.7, 0.4], views)
    a = triangulate(hms, views, WS)
    b = triangulate(hms * np.e ** 3, views, WS)
    np.testing.assert_array_equal(a.point, b.point)


def test_triangulate_degenerate_and_too_few_views():
    views = virtual_views(WS, 8)
    tri = triangulate(np.zeros((3, 8, 8)), views, WS)
    assert tri.degenerate
    np.testing.assert_allclose(tri.point, WS.center)
    with pytest.raises(GeometryError):
        triangulate(np.ones((1, 8, 8)), views[:1], WS)


def test_log_likelihood_floor_and_bilinear():
    img = np.arange(12.0).reshape(3, 4)
    assert bilinear_read(img, np.array([[1.5, 0.5]]))[0] == pytest.approx(3.5)
    views = virtual_views(WS, 4)
    ll = log_likelihood(np.zeros((3, 4, 4)), views, np.array([[0.5, 0.5, 0.5]]))
    assert ll[0] == pytest.approx(3 * np.log(1e-12))


def test_crop_and_zoom():
    rng = np.random.default_rng(4)
    pts = rng.uniform(0, 1, size=(2000, 3))
    pts[0] = [0.4, 0.4, 0.4]
    pc = PointCloud(pts, rng.random((2000, 3)))
    crop, box = crop_and_zoom(pc, pts[0], 4.0, WS)
    np.testing.assert_allclose(box.size, 0.25)
    assert any(np.array_equal(p, pts[0]) for p in crop.positions)
    oracle = [p for p in pts if np.all(np.abs(p - pts[0]) <= 0.125)]
    np.testing.assert_array_equal(crop.positions, np.array(oracle))


def test_crop_and_zoom_widens_once_then_fails():
    pc = PointCloud([[0.5, 0.5, 0.5]], [[1, 1, 1]])
    crop, box = crop_and_zoom(pc, [0.5, 0.5, 0.7], 4.0, WS)
    assert len(crop) == 1 and box.size[0] == pytest.approx(0.5)
    with pytest.raises(GeometryError):
        crop_and_zoom(pc, [0.5, 0.5, 0.9], 4.0, WS)
    with pytest.raises(GeometryError):
        crop_and_zoom(pc, [0.5, 0.5, 0.5], 1.0, WS)


def test_fine_stage_pixel_is_alpha_times_smaller():
    coarse = virtual_views(WS, 64)[0]
    fine = virtual_views(Box.cube([0.5, 0.5, 0.5], 1.0 / 4), 64)[0]
    assert coarse.scale / fine.scale == pytest.approx(4.0)


def test_netpbm_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    rgb = rng.random((5, 7, 3))
    write_ppm(tmp_path / "a.ppm", rgb)
    back = read_ppm(tmp_path / "a.ppm")
    assert back.shape == (5, 7, 3)
    np.testing.assert_allclose(back, rgb, atol=0.5 / 255 + 1e-6)
    hm = rng.random((6, 4))
    write_pgm(tmp_path / "h.pgm", hm)
    img = read_pgm(tmp_path / "h.pgm")
    assert img.shape == (6, 4) and img.max() == 255
    write_xyzrgb(tmp_path / "c.xyz", PointCloud(rng.random((3, 3)), rng.random((3, 3))))
    assert len((tmp_path / "c.xyz").read_text().splitlines()) == 3


def test_pinhole_camera_looks_at_target():
    cam = pinhole_camera([1.0, 0.0, 1.0], [0.0, 0.0, 0.0], 64, 64, 40.0)
    uv, z = cam.project(np.zeros((1, 3)))
    np.testing.assert_allclose(uv[0], [31.5, 31.5], atol=1e-9)
    assert z[0] == pytest.approx(np.sqrt(2))
