import json

import numpy as np

from occond import imgio, occlusion
from occond.raster import (
    build_triangle_soup,
    rasterize,
    rasterize_soup,
    ray_face_count,
    render_bundle,
    soup_from_triangles,
)
from occond.scene import Camera

from conftest import make_human, make_scene, random_scene
from oracles import brute_force_caster


def dyadic_camera(size: int = 64) -> Camera:
    # power-of-two intrinsics keep constructed-fixture arithmetic exact
    return Camera(fx=64.0, fy=64.0, cx=32.0, cy=32.0, width=size, height=size)


def facing_triangle(z: float = 2.0) -> np.ndarray:
    # dyadic coordinates; covers the center pixel ray but not the corners
    return np.array([[[-0.125, -0.125, z], [0.375, -0.125, z], [-0.125, 0.375, z]]])


def stacked_quads(zs=(1.0, 2.0, 4.0), shared_ids: bool = False):
    tris, vids = [], []
    for k, z in enumerate(zs):
        a, b, c, d = [-0.5, -0.5, z], [0.5, -0.5, z], [0.5, 0.5, z], [-0.5, 0.5, z]
        tris.append([a, b, c])
        tris.append([a, c, d])
        base = 4 * k
        vids.append([base, base + 1, base + 2])
        vids.append([base, base + 2, base + 3])
    return soup_from_triangles(np.array(tris), np.array(vids) if shared_ids else None)


class TestSingleTriangle:
    def test_facing_triangle_hand_values(self):
        cam = dyadic_camera()
        buf = rasterize_soup(soup_from_triangles(facing_triangle()), cam, threads=1)
        # plane z = 2 with dz = 1 rays: t is exactly 2
        assert buf.count[32, 32] == 1
        assert buf.depth[32, 32] == 2.0
        np.testing.assert_array_equal(buf.normal[32, 32], [0.0, 0.0, -1.0])

    def test_empty_pixel(self):
        cam = dyadic_camera()
        buf = rasterize_soup(soup_from_triangles(facing_triangle()), cam, threads=1)
        assert buf.count[0, 0] == 0
        assert buf.depth[0, 0] == np.inf
        np.testing.assert_array_equal(buf.normal[0, 0], [0.0, 0.0, 0.0])

    def test_winding_does_not_change_oriented_normal(self):
        cam = dyadic_camera()
        flipped = facing_triangle()[:, ::-1, :]
        buf = rasterize_soup(soup_from_triangles(flipped), cam, threads=1)
        np.testing.assert_array_equal(buf.normal[32, 32], [0.0, 0.0, -1.0])

    def test_near_and_clip_exclusion(self):
        cam = dyadic_camera()
        for z, expected in ((0.005, 0), (5.0, 1), (5.5, 0)):
            buf = rasterize_soup(soup_from_triangles(facing_triangle(z)), cam, threads=1)
            assert buf.count[32, 32] == expected, f"z={z}"


class TestRayFaceCount:
    def test_pixel_outside_everything(self):
        soup = soup_from_triangles(facing_triangle())
        assert ray_face_count(soup, dyadic_camera(), (0, 0)) == 0

    def test_stacked_quads_diagonal(self):
        # the center ray has dx == dy, so it pierces each quad exactly on
        # the shared diagonal; without shared vertex ids both halves count
        cam = dyadic_camera()
        assert ray_face_count(stacked_quads(), cam, (32, 32)) == 6
        assert ray_face_count(stacked_quads(), cam, (30, 35)) == 3

    def test_shared_edge_counted_once(self):
        cam = dyadic_camera()
        soup = stacked_quads(shared_ids=True)
        assert ray_face_count(soup, cam, (32, 32)) == 3
        assert ray_face_count(soup, cam, (30, 35)) == 3

    def test_watertight_even_count(self, body_small):
        scene = make_scene(body_small)
        soup = build_triangle_soup(scene, body_small)
        cam = scene.camera
        hits = 0
        for x in range(20, 44, 3):
            for y in range(8, 60, 5):
                n = ray_face_count(soup, cam, (x, y))
                if n:
                    hits += 1
                    assert n % 2 == 0, f"odd count {n} at {(x, y)}"
        assert hits > 10


class TestRasterizeAgainstOracle:
    def test_overlapping_bodies_count_four(self, body_small):
        humans = (
            make_human(body_small, translation=(0.0, 0.0, 2.3)),
            make_human(body_small, translation=(0.0, 0.0, 2.9)),
        )
        scene = make_scene(body_small, humans=humans)
        buf = rasterize(scene, body_small, threads=1)
        soup = build_triangle_soup(scene, body_small)
        cam = scene.camera
        count, depth, grazing = brute_force_caster(
            soup.tri_cam, cam.fx, cam.fy, cam.cx, cam.cy,
            cam.width, cam.height, cam.near, cam.depth_clip,
        )
        ok = ~grazing
        np.testing.assert_array_equal(buf.count[ok], count[ok])
        assert (buf.count[ok] == 4).sum() > 20

    def test_randomized_scenes_match_brute_force(self, body_small):
        rng = np.random.default_rng(2024)
        for _ in range(10):
            scene = random_scene(body_small, rng)
            buf = rasterize(scene, body_small, threads=1)
            soup = build_triangle_soup(scene, body_small)
            cam = scene.camera
            count, depth, grazing = brute_force_caster(
                soup.tri_cam, cam.fx, cam.fy, cam.cx, cam.cy,
                cam.width, cam.height, cam.near, cam.depth_clip,
            )
            ok = ~grazing
            np.testing.assert_array_equal(buf.count[ok], count[ok])
            both = ok & np.isfinite(depth)
            np.testing.assert_allclose(buf.depth[both], depth[both], rtol=1e-9, atol=1e-9)
            assert np.array_equal(np.isfinite(buf.depth[ok]), np.isfinite(depth[ok]))

    def test_harsh_cameras_and_poses_match_brute_force(self, body_small):
        # rotated extrinsics, non-square images, off-center principal points,
        # extreme poses, bodies straddling the near and far clips
        from occond.bodymodel import PoseSpec, ShapeVector
        from occond.scene import Camera, HumanSpec, SceneSpec
        from scipy.spatial.transform import Rotation

        rng = np.random.default_rng(777)
        for trial in range(8):
            w = int(rng.integers(24, 97))
            h = int(rng.integers(24, 97))
            cam = Camera(
                fx=float(rng.uniform(30, 120)), fy=float(rng.uniform(30, 120)),
                cx=float(rng.uniform(0.3, 0.7) * w), cy=float(rng.uniform(0.3, 0.7) * h),
                width=w, height=h,
                rotation=Rotation.from_rotvec(rng.uniform(-0.3, 0.3, 3)).as_matrix(),
                translation=rng.uniform(-0.2, 0.2, 3),
                near=float(rng.uniform(0.005, 0.5)),
                depth_clip=float(rng.uniform(2.0, 6.0)),
            )
            humans = tuple(
                HumanSpec(
                    beta=ShapeVector(rng.uniform(-2, 2, 10)),
                    pose=PoseSpec(
                        np.array([rng.uniform(-1.2, 1.2), rng.uniform(-0.8, 0.8),
                                  rng.uniform(0.4, 5.5)]),
                        rng.uniform(-1.2, 1.2, (body_small.num_joints, 3)),
                    ),
                )
                for _ in range(int(rng.integers(1, 3)))
            )
            scene = SceneSpec(camera=cam, humans=humans)
            buf = rasterize(scene, body_small, threads=int(rng.integers(1, 5)))
            soup = build_triangle_soup(scene, body_small)
            count, depth, grazing = brute_force_caster(
                soup.tri_cam, cam.fx, cam.fy, cam.cx, cam.cy, w, h, cam.near, cam.depth_clip
            )
            ok = ~grazing
            np.testing.assert_array_equal(buf.count[ok], count[ok], err_msg=f"trial {trial}")
            both = ok & np.isfinite(depth)
            np.testing.assert_allclose(
                buf.depth[both], depth[both], rtol=1e-9, atol=1e-9, err_msg=f"trial {trial}"
            )


class TestFrustumEdges:
    def oracle_check(self, soup, cam):
        buf = rasterize_soup(soup, cam, threads=1)
        count, depth, grazing = brute_force_caster(
            soup.tri_cam, cam.fx, cam.fy, cam.cx, cam.cy,
            cam.width, cam.height, cam.near, cam.depth_clip,
        )
        ok = ~grazing
        np.testing.assert_array_equal(buf.count[ok], count[ok])
        both = ok & np.isfinite(depth)
        np.testing.assert_allclose(buf.depth[both], depth[both], rtol=1e-9, atol=1e-9)
        return buf

    def test_triangle_crossing_near_plane(self):
        cam = dyadic_camera()
        tris = np.array(
            [
                [[-0.4, -0.3, -0.5], [0.5, 0.1, 3.0], [-0.2, 0.4, 3.0]],
                [[-2.0, -2.0, 2.5], [2.0, -2.0, 2.5], [0.0, 2.5, 2.5]],
            ]
        )
        buf = self.oracle_check(soup_from_triangles(tris), cam)
        assert buf.count.max() >= 1

    def test_body_partially_off_frame(self, body_small):
        scene = make_scene(
            body_small, humans=(make_human(body_small, translation=(1.4, 0.2, 2.4)),)
        )
        soup = build_triangle_soup(scene, body_small)
        buf = self.oracle_check(soup, scene.camera)
        assert 0 < (buf.count > 0).sum() < buf.count.size

    def test_body_behind_camera_is_empty(self, body_small):
        scene = make_scene(
            body_small, humans=(make_human(body_small, translation=(0.0, 0.0, -3.0)),)
        )
        buf = rasterize(scene, body_small, threads=1)
        assert buf.count.sum() == 0
        assert not np.isfinite(buf.depth).any()

    def test_body_beyond_depth_clip_is_empty(self, body_small):
        scene = make_scene(
            body_small, humans=(make_human(body_small, translation=(0.0, 0.0, 8.0)),)
        )
        buf = rasterize(scene, body_small, threads=1)
        assert buf.count.sum() == 0


class TestBufferInvariants:
    def test_depth_count_normal_consistency(self, body_small):
        rng = np.random.default_rng(77)
        scene = random_scene(body_small, rng, n_humans=2)
        buf = rasterize(scene, body_small, threads=1)
        covered = buf.count >= 1
        assert np.array_equal(np.isfinite(buf.depth), covered)
        finite = buf.depth[covered]
        assert np.all(finite > scene.camera.near)
        assert np.all(finite <= scene.camera.depth_clip)
        norms = np.linalg.norm(buf.normal[covered], axis=-1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-4)
        # oriented toward the camera: negative dot with the ray direction
        ys, xs = np.nonzero(covered)
        dirs = np.stack(
            [
                (xs + 0.5 - scene.camera.cx) / scene.camera.fx,
                (ys + 0.5 - scene.camera.cy) / scene.camera.fy,
                np.ones(len(xs)),
            ],
            axis=-1,
        )
        dots = np.einsum("ij,ij->i", buf.normal[ys, xs], dirs)
        assert np.all(dots < 0)

    def test_monotone_clip(self, body_small):
        rng = np.random.default_rng(4)
        scene = random_scene(body_small, rng, n_humans=2)
        import dataclasses

        tight = dataclasses.replace(
            scene, camera=dataclasses.replace(scene.camera, depth_clip=2.6)
        )
        full = rasterize(scene, body_small, threads=1)
        clipped = rasterize(tight, body_small, threads=1)
        assert np.all(clipped.count <= full.count)

    def test_degenerate_triangles_skipped(self):
        cam = dyadic_camera()
        tris = np.concatenate(
            [facing_triangle(), np.zeros((1, 3, 3)) + [[0.1, 0.1, 1.5]]]
        )
        buf = rasterize_soup(soup_from_triangles(tris), cam, threads=1)
        assert buf.degenerate_faces == 1
        assert buf.count[32, 32] == 1

    def test_thread_count_determinism(self, body_small):
        rng = np.random.default_rng(99)
        scene = random_scene(body_small, rng, n_humans=2)
        reference = rasterize(scene, body_small, threads=1)
        for workers in (2, 4):
            buf = rasterize(scene, body_small, threads=workers)
            assert buf.depth.tobytes() == reference.depth.tobytes()
            assert buf.count.tobytes() == reference.count.tobytes()
            assert buf.normal.tobytes() == reference.normal.tobytes()


class TestRenderBundle:
    def test_bundle_files_and_manifest(self, tmp_path, body_small):
        scene = make_scene(
            body_small,
            humans=(
                make_human(body_small, translation=(0.0, 0.0, 2.3)),
                make_human(body_small, translation=(0.1, 0.0, 2.9)),
            ),
        )
        out = tmp_path / "bundle"
        manifest = render_bundle(scene, body_small, out, threads=1)
        names = sorted(p.name for p in out.iterdir())
        assert names == sorted(
            ["depth.pfm", "normal.pfm", "count.png", "mask.png",
             "edges.png", "masked_edges.png", "manifest.json"]
        )
        reread = json.loads((out / "manifest.json").read_text())
        assert reread == manifest
        import hashlib

        for name, digest in manifest["outputs"].items():
            assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest

    def test_rerun_is_byte_identical(self, tmp_path, body_small):
        scene = make_scene(body_small)
        m1 = render_bundle(scene, body_small, tmp_path / "a", threads=1)
        m2 = render_bundle(scene, body_small, tmp_path / "b", threads=2)
        assert m1["outputs"] == m2["outputs"]
        for name in m1["outputs"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_mask_recomputable_from_count(self, tmp_path, body_small):
        scene = make_scene(
            body_small,
            humans=(
                make_human(body_small, translation=(0.0, 0.0, 2.3)),
                make_human(body_small, translation=(0.05, 0.0, 2.8)),
            ),
        )
        out = tmp_path / "bundle"
        manifest = render_bundle(scene, body_small, out, area_min=4, dilation_radius=2, threads=1)
        count = imgio.read_png(out / "count.png").astype(np.int64)
        raw = occlusion.occlusion_mask(count)
        refined = occlusion.refine_mask(
            raw,
            area_min=manifest["params"]["area_min"],
            radius=manifest["params"]["dilation_radius"],
        )
        stored = imgio.png_u8_to_mask(imgio.read_png(out / "mask.png"))
        np.testing.assert_array_equal(refined.mask, stored)

    def test_normal_pfm_roundtrip(self, tmp_path, body_small):
        scene = make_scene(body_small)
        out = tmp_path / "bundle"
        render_bundle(scene, body_small, out, threads=1)
        buf = rasterize(scene, body_small, threads=1)
        depth, _ = imgio.read_pfm(out / "depth.pfm")
        normal, _ = imgio.read_pfm(out / "normal.pfm")
        finite = np.isfinite(buf.depth)
        np.testing.assert_array_equal(np.isfinite(depth), finite)
        np.testing.assert_allclose(depth[finite], buf.depth[finite].astype(np.float32), rtol=1e-6)
        np.testing.assert_allclose(normal, buf.normal.astype(np.float32), atol=1e-6)
