"""Multi-human scene assembly and pinhole projection.

Pixel convention: pixel (x, y) covers [x, x+1) x [y, y+1) and its center
sits at (x + 0.5, y + 0.5); rays are cast through pixel centers.  The
camera extrinsic maps world to camera coordinates, x_cam = R @ x_world + t,
with +z looking into the scene.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .bodymodel import BodyModel, PoseSpec, ShapeVector
from .errors import SceneValidationError, SchemaError

SCENE_SCHEMA = "occond-scene/1"

# Depth clipping retains only values below 5 m by default.
DEFAULT_DEPTH_CLIP = 5.0
DEFAULT_NEAR = 0.01


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = DEFAULT_NEAR
    depth_clip: float = DEFAULT_DEPTH_CLIP

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def with_size(self, width: int, height: int) -> "Camera":
        """Resample the camera to a new image size, scaling intrinsics."""
        sx = width / self.width
        sy = height / self.height
        return Camera(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=self.cx * sx,
            cy=self.cy * sy,
            width=width,
            height=height,
            rotation=self.rotation,
            translation=self.translation,
            near=self.near,
            depth_clip=self.depth_clip,
        )


@dataclass(frozen=True)
class HumanSpec:
    beta: ShapeVector
    pose: PoseSpec
    face_landmarks: np.ndarray | None = None  # (5, 2) image-space points

    def __post_init__(self):
        if self.face_landmarks is not None:
            object.__setattr__(
                self, "face_landmarks", np.asarray(self.face_landmarks, dtype=np.float64)
            )


@dataclass(frozen=True)
class SceneSpec:
    camera: Camera
    humans: tuple[HumanSpec, ...]
    model_ref: str = ""

    def __post_init__(self):
        object.__setattr__(self, "humans", tuple(self.humans))


def project(camera: Camera, point) -> tuple[float, float, float] | None:
    """Project a world point to (u, v, depth); None if at or behind ``near``."""
    x, y, z = camera.world_to_camera(np.asarray(point, dtype=np.float64))
    if z <= camera.near:
        return None
    return (camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy, z)


def collect_violations(spec: SceneSpec, model: BodyModel) -> list[tuple[str, str]]:
    """All invariant violations as (document path, message) pairs."""
    out: list[tuple[str, str]] = []
    cam = spec.camera
    if not (np.isfinite(cam.fx) and cam.fx > 0):
        out.append(("camera.fx", f"must be finite and > 0, got {cam.fx}"))
    if not (np.isfinite(cam.fy) and cam.fy > 0):
        out.append(("camera.fy", f"must be finite and > 0, got {cam.fy}"))
    for name in ("cx", "cy"):
        if not np.isfinite(getattr(cam, name)):
            out.append((f"camera.{name}", "must be finite"))
    if cam.width < 1:
        out.append(("camera.width", f"must be >= 1, got {cam.width}"))
    if cam.height < 1:
        out.append(("camera.height", f"must be >= 1, got {cam.height}"))
    if not (np.isfinite(cam.near) and np.isfinite(cam.depth_clip) and 0 < cam.near < cam.depth_clip):
        out.append(("camera.near", f"need 0 < near < depth_clip, got ({cam.near}, {cam.depth_clip})"))
    if cam.rotation.shape != (3, 3) or not np.all(np.isfinite(cam.rotation)):
        out.append(("camera.extrinsic.rotation", "must be a finite 3x3 matrix"))
    else:
        err = np.abs(cam.rotation @ cam.rotation.T - np.eye(3)).max()
        if err > 1e-6 or np.linalg.det(cam.rotation) < 0:
            out.append(("camera.extrinsic.rotation", f"not a rotation (orthonormality error {err:.2e})"))
    if cam.translation.shape != (3,) or not np.all(np.isfinite(cam.translation)):
        out.append(("camera.extrinsic.translation", "must be a finite 3-vector"))

    if len(spec.humans) < 1:
        out.append(("humans", "scene must contain at least one human"))
    for i, human in enumerate(spec.humans):
        if len(human.beta) != model.num_shape_coeffs:
            out.append(
                (f"humans[{i}].beta",
                 f"length {len(human.beta)} does not match model K={model.num_shape_coeffs}")
            )
        elif not np.all(np.isfinite(human.beta.betas)):
            out.append((f"humans[{i}].beta", "must be finite"))
        rots = human.pose.joint_rotations
        if len(rots) != model.num_joints:
            out.append(
                (f"humans[{i}].pose.joint_rotations",
                 f"{len(rots)} joints does not match model J={model.num_joints}")
            )
        elif not np.all(np.isfinite(rots)):
            out.append((f"humans[{i}].pose.joint_rotations", "must be finite"))
        if not np.all(np.isfinite(human.pose.root_translation)):
            out.append((f"humans[{i}].pose.root_translation", "must be finite"))
        lm = human.face_landmarks
        if lm is not None and lm.shape != (5, 2):
            out.append(
                (f"humans[{i}].face_landmarks", f"expected exactly 5 2D points, got shape {lm.shape}")
            )
    return out


def validate_scene(spec: SceneSpec, model: BodyModel) -> SceneSpec:
    """Return the scene if every invariant holds, else raise SceneValidationError."""
    violations = collect_violations(spec, model)
    if violations:
        raise SceneValidationError(violations)
    return spec


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def scene_to_dict(spec: SceneSpec) -> dict:
    cam = spec.camera
    humans = []
    for h in spec.humans:
        entry = {
            "betas": h.beta.betas.tolist(),
            "pose": {
                "root_translation": h.pose.root_translation.tolist(),
                "joint_rotations": h.pose.joint_rotations.tolist(),
            },
        }
        if h.face_landmarks is not None:
            entry["face_landmarks"] = h.face_landmarks.tolist()
        humans.append(entry)
    return {
        "schema": SCENE_SCHEMA,
        "camera": {
            "fx": cam.fx,
            "fy": cam.fy,
            "cx": cam.cx,
            "cy": cam.cy,
            "width": cam.width,
            "height": cam.height,
            "extrinsic": {
                "rotation": cam.rotation.tolist(),
                "translation": cam.translation.tolist(),
            },
            "near": cam.near,
            "depth_clip": cam.depth_clip,
        },
        "model_ref": spec.model_ref,
        "humans": humans,
    }


def save_scene(spec: SceneSpec, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        json.dump(scene_to_dict(spec), f, separators=(",", ":"))
        f.write("\n")


def scene_from_dict(doc: dict) -> SceneSpec:
    if doc.get("schema") != SCENE_SCHEMA:
        raise SchemaError("schema", f"expected {SCENE_SCHEMA!r}, got {doc.get('schema')!r}")
    try:
        c = doc["camera"]
        ext = c.get("extrinsic", {})
        camera = Camera(
            fx=float(c["fx"]),
            fy=float(c["fy"]),
            cx=float(c["cx"]),
            cy=float(c["cy"]),
            width=int(c["width"]),
            height=int(c["height"]),
            rotation=np.array(ext.get("rotation", np.eye(3).tolist()), dtype=np.float64),
            translation=np.array(ext.get("translation", [0.0, 0.0, 0.0]), dtype=np.float64),
            near=float(c.get("near", DEFAULT_NEAR)),
            depth_clip=float(c.get("depth_clip", DEFAULT_DEPTH_CLIP)),
        )
    except KeyError as e:
        raise SchemaError(f"camera.{e.args[0]}", "missing required field") from None
    if "humans" not in doc:
        raise SchemaError("humans", "missing required field")
    humans = []
    for i, h in enumerate(doc["humans"]):
        try:
            pose = h["pose"]
            humans.append(
                HumanSpec(
                    beta=ShapeVector(np.array(h["betas"], dtype=np.float64)),
                    pose=PoseSpec(
                        root_translation=np.array(pose["root_translation"], dtype=np.float64),
                        joint_rotations=np.array(pose["joint_rotations"], dtype=np.float64),
                    ),
                    face_landmarks=(
                        np.array(h["face_landmarks"], dtype=np.float64)
                        if "face_landmarks" in h
                        else None
                    ),
                )
            )
        except KeyError as e:
            raise SchemaError(f"humans[{i}].{e.args[0]}", "missing required field") from None
    return SceneSpec(camera=camera, humans=tuple(humans), model_ref=str(doc.get("model_ref", "")))


def load_scene(path) -> SceneSpec:
    with open(path, "r", encoding="ascii") as f:
        return scene_from_dict(json.load(f))
