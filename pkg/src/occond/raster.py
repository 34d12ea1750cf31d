"""Deterministic software renderer for the conditioning buffers.

Produces per-pixel depth, camera-space flat normals, and the ray-face
intersection count that the occlusion mask thresholds.  Counting includes
back-facing triangles: a ray through a closed body passes through two
surfaces, so counts above two mean inter-body overlap or self-overlap.

Rays start at the camera center and pass through pixel centers with an
unnormalized direction whose z component is 1, so the ray parameter t of a
hit equals its camera-space depth.  Intersections with t <= near or
t > depth_clip are excluded everywhere, including from the count.

The accelerated path bins triangles into screen tiles; each tile is an
independent pure function of its pixel rays and its index-sorted triangle
list, so results are bitwise identical for any worker count.  Semantics
are defined by the brute-force ``ray_face_count``: both paths share the
same intersection arithmetic and the same shared-edge tie rule (a hit
exactly on an edge is owned by the lowest-indexed co-edge triangle that
hits it).
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import imgio, occlusion
from .bodymodel import BodyModel, apply_shape, body_to_dict, pose_mesh
from .scene import Camera, SceneSpec, scene_to_dict, validate_scene

TILE = 32
# Barycentric slack treated as "exactly on an edge" for the ownership rule.
EDGE_TIE_EPS = 1e-12
# Pixel padding on projected bounding boxes; covers projection round-off.
BBOX_MARGIN = 1e-3

MANIFEST_SCHEMA = "occond-manifest/1"
BUNDLE_FILES = (
    "depth.pfm",
    "normal.pfm",
    "count.png",
    "mask.png",
    "edges.png",
    "masked_edges.png",
)


@dataclass
class RasterBuffers:
    """Per-pixel render outputs.

    depth: (H, W) meters, +inf where no hit survives clipping.
    normal: (H, W, 3) unit camera-space normal of the nearest hit, oriented
        toward the camera; zeros where depth is infinite.
    count: (H, W) number of triangle intersections with near < t <= clip.
    """

    depth: np.ndarray
    normal: np.ndarray
    count: np.ndarray
    degenerate_faces: int = 0


@dataclass
class TriangleSoup:
    """Camera-space triangle soup with per-face intersection precomputation."""

    tri_cam: np.ndarray  # (T, 3, 3)
    vertex_ids: np.ndarray  # (T, 3) soup-global vertex ids for adjacency
    valid: np.ndarray  # (T,) non-degenerate mask
    degenerate_faces: int
    normals: np.ndarray  # (T, 3) unit geometric normals, unoriented
    dvec: np.ndarray  # det  = d . dvec
    uvec: np.ndarray  # u*det = d . uvec
    vvec: np.ndarray  # v*det = d . vvec
    tnum: np.ndarray  # t*det = tnum
    _edge_faces: dict | None = field(default=None, repr=False)
    _vertex_faces: dict | None = field(default=None, repr=False)

    @property
    def num_faces(self) -> int:
        return len(self.tri_cam)

    def edge_faces(self) -> dict:
        if self._edge_faces is None:
            table: dict[tuple[int, int], list[int]] = {}
            for f, (i, j, k) in enumerate(self.vertex_ids):
                for a, b in ((i, j), (j, k), (k, i)):
                    key = (a, b) if a < b else (b, a)
                    table.setdefault(key, []).append(f)
            self._edge_faces = table
        return self._edge_faces

    def vertex_faces(self) -> dict:
        if self._vertex_faces is None:
            table: dict[int, list[int]] = {}
            for f, ids in enumerate(self.vertex_ids):
                for v in ids:
                    table.setdefault(int(v), []).append(f)
            self._vertex_faces = table
        return self._vertex_faces


def build_triangle_soup(scene: SceneSpec, model: BodyModel) -> TriangleSoup:
    """Pose every human, merge the meshes, and move them to camera space."""
    tri_list = []
    vid_list = []
    offset = 0
    for human in scene.humans:
        shaped = apply_shape(model, human.beta)
        mesh = pose_mesh(model, shaped, human.pose)
        cam_verts = scene.camera.world_to_camera(mesh.vertices)
        tri_list.append(cam_verts[mesh.faces])
        vid_list.append(mesh.faces + offset)
        offset += len(cam_verts)
    return soup_from_triangles(
        np.concatenate(tri_list, axis=0), np.concatenate(vid_list, axis=0)
    )


def soup_from_triangles(tri_cam: np.ndarray, vertex_ids: np.ndarray | None = None) -> TriangleSoup:
    """Soup from raw camera-space triangles (T, 3, 3).

    ``vertex_ids`` declares which triangle corners are the same vertex;
    the shared-edge tie rule only applies where ids are shared.  Without
    ids every corner is distinct and no edges are considered shared.
    """
    tri = np.asarray(tri_cam, dtype=np.float64)
    if vertex_ids is None:
        vids = np.arange(tri.shape[0] * 3, dtype=np.int64).reshape(-1, 3)
    else:
        vids = np.asarray(vertex_ids, dtype=np.int64)

    a = tri[:, 0]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    raw_n = _cross(e1, e2)
    norm2 = raw_n[:, 0] ** 2 + raw_n[:, 1] ** 2 + raw_n[:, 2] ** 2
    valid = norm2 > 0.0
    normals = np.zeros_like(raw_n)
    normals[valid] = raw_n[valid] / np.sqrt(norm2[valid])[:, None]

    dvec = _cross(e2, e1)
    uvec = _cross(a, e2)
    vvec = _cross(-a, e1)
    tnum = _dot(e2, vvec)
    return TriangleSoup(
        tri_cam=tri,
        vertex_ids=vids,
        valid=valid,
        degenerate_faces=int(np.count_nonzero(~valid)),
        normals=normals,
        dvec=dvec,
        uvec=uvec,
        vvec=vvec,
        tnum=tnum,
    )


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # explicit components keep the arithmetic order fixed
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _intersect(soup: TriangleSoup, faces: np.ndarray, dx: np.ndarray, dy: np.ndarray,
               near: float, clip: float):
    """Vectorized intersection of faces (K,) against rays (P,).

    Returns (hit, u, v, t, det), each (K, P).  Directions are
    (dx, dy, 1), so t is camera-space depth.
    """
    dv = soup.dvec[faces]
    uv = soup.uvec[faces]
    vv = soup.vvec[faces]
    tn = soup.tnum[faces][:, None]
    det = dv[:, 0, None] * dx + dv[:, 1, None] * dy + dv[:, 2, None]
    u_num = uv[:, 0, None] * dx + uv[:, 1, None] * dy + uv[:, 2, None]
    v_num = vv[:, 0, None] * dx + vv[:, 1, None] * dy + vv[:, 2, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        u = u_num * inv
        v = v_num * inv
        t = tn * inv
    hit = (
        (det != 0.0)
        & (u >= 0.0)
        & (v >= 0.0)
        & (u + v <= 1.0)
        & (t > near)
        & (t <= clip)
    )
    return hit, u, v, t, det


def _scalar_hit(soup: TriangleSoup, face: int, dx: float, dy: float,
                near: float, clip: float) -> bool:
    """Inclusive hit test for one (face, ray) pair; no tie rule."""
    if not soup.valid[face]:
        return False
    det = soup.dvec[face, 0] * dx + soup.dvec[face, 1] * dy + soup.dvec[face, 2]
    if det == 0.0:
        return False
    inv = 1.0 / det
    u = (soup.uvec[face, 0] * dx + soup.uvec[face, 1] * dy + soup.uvec[face, 2]) * inv
    if u < 0.0:
        return False
    v = (soup.vvec[face, 0] * dx + soup.vvec[face, 1] * dy + soup.vvec[face, 2]) * inv
    if v < 0.0 or u + v > 1.0:
        return False
    t = soup.tnum[face] * inv
    return near < t <= clip


def _tie_suppressed(soup: TriangleSoup, face: int, u: float, v: float,
                    dx: float, dy: float, near: float, clip: float) -> bool:
    """True when a hit exactly on an edge belongs to a lower-indexed face.

    Ownership goes to the lowest-indexed triangle sharing the grazed edge
    (or vertex) that also registers the hit, so watertight shared edges
    are counted exactly once.
    """
    w = 1.0 - u - v
    ids = soup.vertex_ids[face]
    edges = []
    if w <= EDGE_TIE_EPS:
        edges.append((int(ids[1]), int(ids[2])))
    if u <= EDGE_TIE_EPS:
        edges.append((int(ids[0]), int(ids[2])))
    if v <= EDGE_TIE_EPS:
        edges.append((int(ids[0]), int(ids[1])))
    candidates: set[int] = set()
    edge_faces = soup.edge_faces()
    for a, b in edges:
        key = (a, b) if a < b else (b, a)
        candidates.update(edge_faces.get(key, ()))
    if len(edges) >= 2:
        # vertex graze: the shared vertex fans out to more faces
        shared = set(edges[0]) & set(edges[1])
        vertex_faces = soup.vertex_faces()
        for vid in shared:
            candidates.update(vertex_faces.get(vid, ()))
    for g in sorted(c for c in candidates if c < face):
        if _scalar_hit(soup, g, dx, dy, near, clip):
            return True
    return False


def _apply_tie_rule(soup: TriangleSoup, faces: np.ndarray, hit: np.ndarray,
                    u: np.ndarray, v: np.ndarray, dx: np.ndarray, dy: np.ndarray,
                    near: float, clip: float) -> None:
    bmin = np.minimum(np.minimum(u, v), 1.0 - u - v)
    exact = hit & (bmin <= EDGE_TIE_EPS)
    if not np.any(exact):
        return
    for k, p in zip(*np.nonzero(exact)):
        if _tie_suppressed(
            soup, int(faces[k]), float(u[k, p]), float(v[k, p]),
            float(dx[p]), float(dy[p]), near, clip,
        ):
            hit[k, p] = False


def ray_face_count(soup: TriangleSoup, camera: Camera, pixel: tuple[int, int]) -> int:
    """Brute-force intersection count for the ray through one pixel center.

    ``pixel`` is (x, y) = (column, row).  This is the reference semantics
    the accelerated rasterizer must reproduce.
    """
    x, y = pixel
    dx = np.array([(x + 0.5 - camera.cx) / camera.fx])
    dy = np.array([(y + 0.5 - camera.cy) / camera.fy])
    faces = np.nonzero(soup.valid)[0]
    if len(faces) == 0:
        return 0
    hit, u, v, _, _ = _intersect(soup, faces, dx, dy, camera.near, camera.depth_clip)
    _apply_tie_rule(soup, faces, hit, u, v, dx, dy, camera.near, camera.depth_clip)
    return int(np.count_nonzero(hit))


def resolve_threads(threads: int | None = None) -> int:
    """Worker count: explicit argument, else OCCOND_THREADS, else auto (0)."""
    if threads is None:
        threads = int(os.environ.get("OCCOND_THREADS", "0"))
    if threads <= 0:
        threads = os.cpu_count() or 1
    return threads


def _face_pixel_bboxes(soup: TriangleSoup, camera: Camera) -> np.ndarray:
    """Conservative integer pixel bbox (x0, x1, y0, y1) per face, -1 if empty.

    Faces crossing the near plane are clipped to z >= near first; the
    perspective image of the clipped convex polygon is convex, so the bbox
    of its projected vertices bounds every possible hit pixel.
    """
    t = soup.tri_cam
    w, h = camera.width, camera.height
    boxes = np.full((len(t), 4), -1, dtype=np.int64)
    z = t[:, :, 2]
    front = z > camera.near
    all_front = front.all(axis=1) & soup.valid
    some_front = front.any(axis=1) & soup.valid & ~all_front

    def finish(idx: np.ndarray, us: np.ndarray, vs: np.ndarray) -> None:
        x0 = np.ceil(us.min(axis=1) - 0.5 - BBOX_MARGIN).astype(np.int64)
        x1 = np.floor(us.max(axis=1) - 0.5 + BBOX_MARGIN).astype(np.int64)
        y0 = np.ceil(vs.min(axis=1) - 0.5 - BBOX_MARGIN).astype(np.int64)
        y1 = np.floor(vs.max(axis=1) - 0.5 + BBOX_MARGIN).astype(np.int64)
        x0 = np.clip(x0, 0, w - 1)
        x1 = np.clip(x1, 0, w - 1)
        y0 = np.clip(y0, 0, h - 1)
        y1 = np.clip(y1, 0, h - 1)
        ok = (x0 <= x1) & (y0 <= y1)
        rows = idx[ok]
        boxes[rows, 0] = x0[ok]
        boxes[rows, 1] = x1[ok]
        boxes[rows, 2] = y0[ok]
        boxes[rows, 3] = y1[ok]

    if np.any(all_front):
        idx = np.nonzero(all_front)[0]
        sub = t[idx]
        us = camera.fx * sub[:, :, 0] / sub[:, :, 2] + camera.cx
        vs = camera.fy * sub[:, :, 1] / sub[:, :, 2] + camera.cy
        finish(idx, us, vs)

    for f in np.nonzero(some_front)[0]:
        poly = _clip_near(t[f], camera.near)
        if len(poly) < 3:
            continue
        zs = poly[:, 2]
        us = (camera.fx * poly[:, 0] / zs + camera.cx)[None, :]
        vs = (camera.fy * poly[:, 1] / zs + camera.cy)[None, :]
        finish(np.array([f]), us, vs)
    return boxes


def _clip_near(tri: np.ndarray, near: float) -> np.ndarray:
    """Sutherland-Hodgman clip of one triangle against z >= near."""
    out = []
    for i in range(3):
        cur, nxt = tri[i], tri[(i + 1) % 3]
        cin, nin = cur[2] >= near, nxt[2] >= near
        if cin:
            out.append(cur)
        if cin != nin:
            s = (near - cur[2]) / (nxt[2] - cur[2])
            out.append(cur + s * (nxt - cur))
    return np.array(out) if out else np.empty((0, 3))


def rasterize(scene: SceneSpec, model: BodyModel, threads: int | None = None) -> RasterBuffers:
    """Render depth, normal, and intersection-count buffers for a scene.

    Bitwise deterministic for fixed inputs regardless of ``threads``.
    """
    validate_scene(scene, model)
    return rasterize_soup(build_triangle_soup(scene, model), scene.camera, threads)


def rasterize_soup(soup: TriangleSoup, camera: Camera, threads: int | None = None) -> RasterBuffers:
    """Tile-accelerated render of an already-built triangle soup."""
    w, h = camera.width, camera.height
    depth = np.full((h, w), np.inf)
    normal = np.zeros((h, w, 3))
    count = np.zeros((h, w), dtype=np.int32)

    boxes = _face_pixel_bboxes(soup, camera)
    tile_faces: dict[tuple[int, int], list[int]] = {}
    for f in range(soup.num_faces):
        x0, x1, y0, y1 = boxes[f]
        if x1 < 0:
            continue
        for ty in range(y0 // TILE, y1 // TILE + 1):
            for tx in range(x0 // TILE, x1 // TILE + 1):
                tile_faces.setdefault((tx, ty), []).append(f)

    xs_center = (np.arange(w) + 0.5 - camera.cx) / camera.fx
    ys_center = (np.arange(h) + 0.5 - camera.cy) / camera.fy

    def process(tile: tuple[int, int]) -> None:
        tx, ty = tile
        faces = np.array(tile_faces[tile], dtype=np.int64)
        px0, py0 = tx * TILE, ty * TILE
        px1, py1 = min(px0 + TILE, w), min(py0 + TILE, h)
        tw, th = px1 - px0, py1 - py0
        dx = np.broadcast_to(xs_center[px0:px1][None, :], (th, tw)).reshape(-1)
        dy = np.broadcast_to(ys_center[py0:py1][:, None], (th, tw)).reshape(-1)
        hit, u, v, t, det = _intersect(soup, faces, dx, dy, camera.near, camera.depth_clip)
        _apply_tie_rule(soup, faces, hit, u, v, dx, dy, camera.near, camera.depth_clip)
        count[py0:py1, px0:px1] = hit.sum(axis=0, dtype=np.int32).reshape(th, tw)
        tmask = np.where(hit, t, np.inf)
        # first minimal index wins; faces are in ascending order, so equal
        # depths resolve to the lowest face index
        first = tmask.argmin(axis=0)
        cols = np.arange(tmask.shape[1])
        tmin = tmask[first, cols]
        got = np.isfinite(tmin)
        depth[py0:py1, px0:px1] = tmin.reshape(th, tw)
        if np.any(got):
            fwin = faces[first[got]]
            sign = np.where(det[first[got], cols[got]] > 0.0, 1.0, -1.0)
            ntile = np.zeros((tw * th, 3))
            ntile[got] = soup.normals[fwin] * sign[:, None]
            normal[py0:py1, px0:px1] = ntile.reshape(th, tw, 3)

    tiles = sorted(tile_faces.keys())
    workers = resolve_threads(threads)
    if workers <= 1 or len(tiles) <= 1:
        for tile in tiles:
            process(tile)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(process, tiles))

    return RasterBuffers(
        depth=depth, normal=normal, count=count, degenerate_faces=soup.degenerate_faces
    )


# ---------------------------------------------------------------------------
# Bundle output
# ---------------------------------------------------------------------------


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _canonical_hash(doc: dict) -> str:
    return hashlib.sha256(
        json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("ascii")
    ).hexdigest()


def render_bundle(
    scene: SceneSpec,
    model: BodyModel,
    out_dir,
    *,
    area_min: int | None = None,
    dilation_radius: int | None = None,
    edge_method: str = "canny",
    tau: float = occlusion.DEFAULT_TAU,
    canny_low: float = occlusion.DEFAULT_CANNY_LOW,
    canny_high: float = occlusion.DEFAULT_CANNY_HIGH,
    normal_vis: bool = False,
    threads: int | None = None,
) -> dict:
    """Render a scene and write the full conditioning bundle plus manifest.

    Writes depth.pfm, normal.pfm, count.png (16-bit), mask.png, edges.png,
    masked_edges.png and manifest.json into ``out_dir``; returns the
    manifest.  ``normal_vis`` additionally writes normal_vis.png with the
    (n+1)/2*255 encoding.  The manifest records every parameter that
    affects output bytes, with sha256 hashes of each file.
    """
    os.makedirs(out_dir, exist_ok=True)
    camera = scene.camera
    if area_min is None or dilation_radius is None:
        scaled_area, scaled_radius = occlusion.default_refine_params(camera.width, camera.height)
        area_min = scaled_area if area_min is None else area_min
        dilation_radius = scaled_radius if dilation_radius is None else dilation_radius
    if edge_method not in ("canny", "gradient"):
        raise ValueError(f"unknown edge method {edge_method!r}")

    buffers = rasterize(scene, model, threads=threads)
    raw = occlusion.occlusion_mask(buffers.count)
    refined = occlusion.refine_mask(raw, area_min=area_min, radius=dilation_radius)
    if edge_method == "canny":
        edges = occlusion.canny_edges(
            buffers.depth, canny_low, canny_high, depth_clip=camera.depth_clip
        )
    else:
        edges = occlusion.depth_edges(buffers.depth, tau, depth_clip=camera.depth_clip)
    masked = occlusion.masked_edges(edges, refined)

    written = list(BUNDLE_FILES)
    paths = {name: os.path.join(out_dir, name) for name in BUNDLE_FILES}
    imgio.write_pfm(paths["depth.pfm"], buffers.depth)
    imgio.write_pfm(paths["normal.pfm"], buffers.normal)
    count_u16 = np.clip(buffers.count, 0, np.iinfo(np.uint16).max).astype(np.uint16)
    imgio.write_png_u16(paths["count.png"], count_u16)
    imgio.write_png_u8(paths["mask.png"], imgio.mask_to_png_u8(refined.mask))
    imgio.write_png_u8(paths["edges.png"], imgio.mask_to_png_u8(edges.edges))
    imgio.write_png_u8(paths["masked_edges.png"], imgio.mask_to_png_u8(masked.edges))
    if normal_vis:
        paths["normal_vis.png"] = os.path.join(out_dir, "normal_vis.png")
        imgio.write_png_u8(paths["normal_vis.png"], imgio.encode_normal_u8(buffers.normal))
        written.append("normal_vis.png")

    edge_params: dict = {"method": edge_method}
    if edge_method == "canny":
        edge_params.update({"canny_low": canny_low, "canny_high": canny_high})
    else:
        edge_params.update({"tau": tau})
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "inputs": {
            "scene_sha256": _canonical_hash(scene_to_dict(scene)),
            "model_sha256": _canonical_hash(body_to_dict(model)),
            "model_name": model.name,
        },
        "params": {
            "width": camera.width,
            "height": camera.height,
            "near": camera.near,
            "depth_clip": camera.depth_clip,
            "area_min": int(area_min),
            "dilation_radius": int(dilation_radius),
            "edge": edge_params,
            "normal_vis": bool(normal_vis),
        },
        "diagnostics": {"degenerate_faces": buffers.degenerate_faces},
        "outputs": {name: _sha256(paths[name]) for name in written},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="ascii") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest
