"""Minimal parametric body model: shape blendshapes plus linear blend skinning.

The model format is deliberately small: a template mesh, K displacement
blendshapes, a topologically sorted kinematic tree, and per-vertex skin
weights.  ``make_fixture_body`` generates a deterministic articulated
capsule humanoid so scenes and tests need no licensed assets; the JSON
loader accepts real exported data in the same layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PoseDimensionError, SchemaError, ShapeDimensionError

BODY_SCHEMA = "occond-body/1"
ROOT_PARENT = -1


@dataclass
class BodyModel:
    """Rest-pose body with blendshape and skinning data.

    vertices_template: (V, 3) meters.
    faces: (F, 3) vertex indices.
    shape_basis: (K, V, 3) displacement per unit shape coefficient.
    joints_rest: (J, 3) rest joint positions, meters.
    parents: (J,) parent joint indices, ``ROOT_PARENT`` for the root;
        every parent index precedes its child (topologically sorted).
    skin_weights: per-vertex list of (joint index, weight) pairs;
        weights are nonnegative and sum to 1 within 1e-6.
    """

    vertices_template: np.ndarray
    faces: np.ndarray
    shape_basis: np.ndarray
    joints_rest: np.ndarray
    parents: np.ndarray
    skin_weights: list[list[tuple[int, float]]]
    name: str = "unnamed"
    _dense_weights: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices_template = np.asarray(self.vertices_template, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.joints_rest = np.asarray(self.joints_rest, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        nv = len(self.vertices_template)
        if self.faces.size and self.faces.max() >= nv:
            raise ValueError(f"face index {self.faces.max()} out of range for {nv} vertices")
        if self.faces.size and self.faces.min() < 0:
            raise ValueError("negative face index")
        if self.shape_basis.shape[1:] != (nv, 3):
            raise ValueError(
                f"shape basis must be (K, {nv}, 3), got {self.shape_basis.shape}"
            )
        for j, p in enumerate(self.parents):
            if not (p == ROOT_PARENT or 0 <= p < j):
                raise ValueError(f"parent of joint {j} must precede it, got {p}")
        if len(self.skin_weights) != nv:
            raise ValueError("skin_weights must have one entry per vertex")
        nj = len(self.joints_rest)
        for v, pairs in enumerate(self.skin_weights):
            total = 0.0
            for j, w in pairs:
                if not 0 <= j < nj:
                    raise ValueError(f"vertex {v}: joint index {j} out of range")
                if w < 0:
                    raise ValueError(f"vertex {v}: negative skin weight")
                total += w
            if abs(total - 1.0) > 1e-6:
                raise ValueError(f"vertex {v}: skin weights sum to {total}, not 1")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices_template)

    @property
    def num_joints(self) -> int:
        return len(self.joints_rest)

    @property
    def num_shape_coeffs(self) -> int:
        return len(self.shape_basis)

    def dense_skin_weights(self) -> np.ndarray:
        """(V, J) dense weight matrix, built once and cached."""
        if self._dense_weights is None:
            w = np.zeros((self.num_vertices, self.num_joints))
            for v, pairs in enumerate(self.skin_weights):
                for j, weight in pairs:
                    w[v, j] += weight
            self._dense_weights = w
        return self._dense_weights


@dataclass(frozen=True)
class ShapeVector:
    """K unitless shape coefficients."""

    betas: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "betas", np.asarray(self.betas, dtype=np.float64))
        if self.betas.ndim != 1:
            raise ValueError("betas must be a 1D vector")

    def __len__(self) -> int:
        return len(self.betas)


@dataclass(frozen=True)
class PoseSpec:
    """Root translation (meters) plus per-joint axis-angle rotations (radians)."""

    root_translation: np.ndarray
    joint_rotations: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "root_translation", np.asarray(self.root_translation, dtype=np.float64)
        )
        object.__setattr__(
            self, "joint_rotations", np.asarray(self.joint_rotations, dtype=np.float64)
        )
        if self.root_translation.shape != (3,):
            raise ValueError("root_translation must be a 3-vector")
        if self.joint_rotations.ndim != 2 or self.joint_rotations.shape[1] != 3:
            raise ValueError("joint_rotations must be (J, 3) axis-angle vectors")
        # finiteness is a scene invariant, reported with a path by validate_scene

    @staticmethod
    def identity(num_joints: int) -> "PoseSpec":
        return PoseSpec(np.zeros(3), np.zeros((num_joints, 3)))


@dataclass(frozen=True)
class Mesh:
    """Posed triangle mesh."""

    vertices: np.ndarray
    faces: np.ndarray


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3).

    Zero vectors map to the exact identity so the identity pose stays a
    bitwise fixed point of skinning.
    """
    aa = np.asarray(axis_angle, dtype=np.float64)
    single = aa.ndim == 1
    aa = np.atleast_2d(aa)
    theta = np.linalg.norm(aa, axis=-1)
    out = np.broadcast_to(np.eye(3), aa.shape[:-1] + (3, 3)).copy()
    nz = theta > 0.0
    if np.any(nz):
        k = aa[nz] / theta[nz, None]
        kx, ky, kz = k[:, 0], k[:, 1], k[:, 2]
        zero = np.zeros_like(kx)
        kmat = np.stack(
            [
                np.stack([zero, -kz, ky], axis=-1),
                np.stack([kz, zero, -kx], axis=-1),
                np.stack([-ky, kx, zero], axis=-1),
            ],
            axis=-2,
        )
        s = np.sin(theta[nz])[:, None, None]
        c = np.cos(theta[nz])[:, None, None]
        out[nz] = np.eye(3) + s * kmat + (1.0 - c) * (kmat @ kmat)
    return out[0] if single else out


def apply_shape(model: BodyModel, beta: ShapeVector) -> np.ndarray:
    """Shaped rest vertices: template plus the beta-weighted blendshape sum."""
    if len(beta) != model.num_shape_coeffs:
        raise ShapeDimensionError(
            f"beta has {len(beta)} coefficients, model expects {model.num_shape_coeffs}"
        )
    k = model.num_shape_coeffs
    offsets = (model.shape_basis.reshape(k, -1).T @ beta.betas).reshape(-1, 3)
    return model.vertices_template + offsets


def _forward_kinematics(model: BodyModel, pose: PoseSpec) -> tuple[np.ndarray, np.ndarray]:
    """World joint rotations (J, 3, 3) and displacements from rest (J, 3).

    Formulated so that the identity pose produces exact identity rotations
    and exactly zero displacements, with no float drift along the chain.
    """
    local = rodrigues(pose.joint_rotations)
    nj = model.num_joints
    rot = np.empty((nj, 3, 3))
    disp = np.empty((nj, 3))
    eye = np.eye(3)
    for j in range(nj):
        p = model.parents[j]
        if p == ROOT_PARENT:
            rot[j] = local[j]
            disp[j] = 0.0
        else:
            offset = model.joints_rest[j] - model.joints_rest[p]
            rot[j] = rot[p] @ local[j]
            disp[j] = disp[p] + (rot[p] - eye) @ offset
    return rot, disp


def pose_mesh(model: BodyModel, shaped_vertices: np.ndarray, pose: PoseSpec) -> Mesh:
    """Skin the shaped vertices with the posed skeleton.

    Each joint rotates about its rest position; vertices blend joint
    transforms by their skin weights; the root translation is added last.
    Face topology is returned unchanged.
    """
    shaped = np.asarray(shaped_vertices, dtype=np.float64)
    if shaped.shape != (model.num_vertices, 3):
        raise ValueError(
            f"shaped vertices must be ({model.num_vertices}, 3), got {shaped.shape}"
        )
    if len(pose.joint_rotations) != model.num_joints:
        raise PoseDimensionError(
            f"pose has {len(pose.joint_rotations)} joints, model expects {model.num_joints}"
        )
    rot, disp = _forward_kinematics(model, pose)
    weights = model.dense_skin_weights()
    # Delta form: v' = v + sum_j w_vj [(R_j - I)(v - joint_j) + D_j]; exactly
    # the input at the identity pose regardless of weight-sum rounding.
    rel = shaped[:, None, :] - model.joints_rest[None, :, :]  # (V, J, 3)
    rot_delta = np.einsum("jab,vjb->vja", rot - np.eye(3), rel)
    per_joint = rot_delta + disp[None, :, :]
    vertices = shaped + np.einsum("vj,vja->va", weights, per_joint) + pose.root_translation
    return Mesh(vertices=vertices, faces=model.faces)


def joint_positions(model: BodyModel, beta: ShapeVector, pose: PoseSpec) -> np.ndarray:
    """World-space joint origins (J, 3) from the same kinematics as pose_mesh."""
    if len(beta) != model.num_shape_coeffs:
        raise ShapeDimensionError(
            f"beta has {len(beta)} coefficients, model expects {model.num_shape_coeffs}"
        )
    if len(pose.joint_rotations) != model.num_joints:
        raise PoseDimensionError(
            f"pose has {len(pose.joint_rotations)} joints, model expects {model.num_joints}"
        )
    _, disp = _forward_kinematics(model, pose)
    return model.joints_rest + disp + pose.root_translation


# ---------------------------------------------------------------------------
# Fixture body
# ---------------------------------------------------------------------------

_FIXTURE_JOINTS = [
    # name, position, parent
    ("pelvis", (0.0, 0.0, 0.0), ROOT_PARENT),
    ("spine", (0.0, 0.15, 0.0), 0),
    ("chest", (0.0, 0.35, 0.0), 1),
    ("neck", (0.0, 0.52, 0.0), 2),
    ("head", (0.0, 0.62, 0.0), 3),
    ("l_shoulder", (0.18, 0.45, 0.0), 2),
    ("l_elbow", (0.46, 0.45, 0.0), 5),
    ("l_wrist", (0.72, 0.45, 0.0), 6),
    ("r_shoulder", (-0.18, 0.45, 0.0), 2),
    ("r_elbow", (-0.46, 0.45, 0.0), 8),
    ("r_wrist", (-0.72, 0.45, 0.0), 9),
    ("l_hip", (0.10, -0.05, 0.0), 0),
    ("l_knee", (0.11, -0.50, 0.0), 11),
    ("l_ankle", (0.12, -0.95, 0.0), 12),
    ("r_hip", (-0.10, -0.05, 0.0), 0),
    ("r_knee", (-0.11, -0.50, 0.0), 14),
    ("r_ankle", (-0.12, -0.95, 0.0), 15),
]

_FIXTURE_SEGMENTS = [
    # name, (start point), (end point), radius, driving joint, region tag
    ("lower_torso", (0.0, -0.10, 0.0), (0.0, 0.20, 0.0), 0.16, 0, "torso"),
    ("upper_torso", (0.0, 0.15, 0.0), (0.0, 0.50, 0.0), 0.15, 2, "torso"),
    ("head", (0.0, 0.54, 0.0), (0.0, 0.80, 0.0), 0.11, 4, "head"),
    ("l_upper_arm", (0.18, 0.45, 0.0), (0.46, 0.45, 0.0), 0.055, 5, "arm"),
    ("l_forearm", (0.46, 0.45, 0.0), (0.72, 0.45, 0.0), 0.045, 6, "arm"),
    ("r_upper_arm", (-0.18, 0.45, 0.0), (-0.46, 0.45, 0.0), 0.055, 8, "arm"),
    ("r_forearm", (-0.46, 0.45, 0.0), (-0.72, 0.45, 0.0), 0.045, 9, "arm"),
    ("l_thigh", (0.10, -0.05, 0.0), (0.11, -0.50, 0.0), 0.085, 11, "leg"),
    ("l_shin", (0.11, -0.50, 0.0), (0.12, -0.95, 0.0), 0.06, 12, "leg"),
    ("r_thigh", (-0.10, -0.05, 0.0), (-0.11, -0.50, 0.0), 0.085, 14, "leg"),
    ("r_shin", (-0.11, -0.50, 0.0), (-0.12, -0.95, 0.0), 0.06, 15, "leg"),
]

FIXTURE_SHAPE_COEFFS = 10


def _segment_frame(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    axis = b - a
    axis = axis / np.linalg.norm(axis)
    ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(axis, ref)
    e1 = e1 / np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return axis, e1, e2


def make_fixture_body(preset: str = "capsule-person", detail: int = 1) -> BodyModel:
    """Deterministic watertight articulated test body.

    ``capsule-person`` is a 17-joint humanoid built from closed capsule
    segments (each segment is a separate closed component, so every edge is
    shared by exactly two faces) with 10 synthetic blendshapes.  ``detail``
    scales the tessellation: 0 gives ~900 triangles, 1 (default) ~1.3k,
    3 ~2.5k.
    """
    if preset != "capsule-person":
        raise ValueError(f"unknown body preset {preset!r}")
    if detail < 0:
        raise ValueError("detail must be >= 0")
    radial = 8 + 2 * detail
    lengthwise = 4 + detail

    vertices: list[np.ndarray] = []
    faces: list[tuple[int, int, int]] = []
    skin: list[list[tuple[int, float]]] = []
    radial_dirs: list[np.ndarray] = []  # outward ring direction per vertex
    regions: list[str] = []

    for _, start, end, radius, joint, region in _FIXTURE_SEGMENTS:
        a = np.array(start)
        b = np.array(end)
        axis, e1, e2 = _segment_frame(a, b)
        base = len(vertices)
        for k in range(lengthwise + 1):
            center = a + (b - a) * (k / lengthwise)
            for i in range(radial):
                ang = 2.0 * math.pi * i / radial
                outward = math.cos(ang) * e1 + math.sin(ang) * e2
                vertices.append(center + radius * outward)
                radial_dirs.append(outward)
                regions.append(region)
                skin.append([(joint, 1.0)])
        # end poles close the tube
        pole_a = len(vertices)
        vertices.append(a - 0.5 * radius * axis)
        radial_dirs.append(-axis)
        regions.append(region)
        skin.append([(joint, 1.0)])
        pole_b = len(vertices)
        vertices.append(b + 0.5 * radius * axis)
        radial_dirs.append(axis)
        regions.append(region)
        skin.append([(joint, 1.0)])

        def ring(k: int, i: int) -> int:
            return base + k * radial + (i % radial)

        for k in range(lengthwise):
            for i in range(radial):
                v00, v01 = ring(k, i), ring(k, i + 1)
                v10, v11 = ring(k + 1, i), ring(k + 1, i + 1)
                faces.append((v00, v01, v11))
                faces.append((v00, v11, v10))
        for i in range(radial):
            faces.append((pole_a, ring(0, i + 1), ring(0, i)))
            faces.append((pole_b, ring(lengthwise, i), ring(lengthwise, i + 1)))

    verts = np.array(vertices)
    rdirs = np.array(radial_dirs)
    region_arr = np.array(regions)
    basis = _fixture_shape_basis(verts, rdirs, region_arr)
    joints = np.array([pos for _, pos, _ in _FIXTURE_JOINTS])
    parents = np.array([parent for _, _, parent in _FIXTURE_JOINTS])
    return BodyModel(
        vertices_template=verts,
        faces=np.array(faces),
        shape_basis=basis,
        joints_rest=joints,
        parents=parents,
        skin_weights=skin,
        name=f"{preset}-d{detail}",
    )


def _fixture_shape_basis(verts: np.ndarray, rdirs: np.ndarray, regions: np.ndarray) -> np.ndarray:
    """Ten synthetic displacement fields; anthropometrically meaningless but
    smooth, deterministic, and linearly independent."""
    nv = len(verts)
    torso = regions == "torso"
    head = regions == "head"
    arm = regions == "arm"
    leg = regions == "leg"
    x, y, z = verts[:, 0], verts[:, 1], verts[:, 2]
    basis = np.zeros((FIXTURE_SHAPE_COEFFS, nv, 3))
    basis[0] = 0.10 * verts  # global scale about the pelvis
    basis[1][torso, 0] = 0.10 * x[torso]  # torso width
    basis[1][torso, 2] = 0.10 * z[torso]
    basis[2][:, 1] = 0.08 * y  # stature
    basis[3][head] = 0.12 * (verts[head] - np.array([0.0, 0.67, 0.0]))  # head size
    basis[4][arm | leg] = 0.03 * rdirs[arm | leg]  # limb girth
    basis[5][:, 1] = 0.08 * np.minimum(y, 0.0)  # leg length
    basis[6][:, 0] = 0.05 * y  # lean shear
    basis[7][torso, 2] = 0.06 * np.maximum(z[torso], 0.0)  # belly depth
    basis[8][arm, 0] = 0.05 * np.sign(x[arm])  # shoulder spread
    basis[9][:, 0] = 0.01 * np.sin(10.0 * y)  # low-amplitude ripple
    basis[9][:, 2] = 0.01 * np.cos(10.0 * y)
    return basis


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def body_to_dict(model: BodyModel) -> dict:
    return {
        "version": BODY_SCHEMA,
        "name": model.name,
        "vertices": model.vertices_template.tolist(),
        "faces": model.faces.tolist(),
        "shape_basis": model.shape_basis.tolist(),
        "joints_rest": model.joints_rest.tolist(),
        "parents": model.parents.tolist(),
        "skin_weights": [[[int(j), float(w)] for j, w in pairs] for pairs in model.skin_weights],
    }


def save_body_model(model: BodyModel, path) -> None:
    with open(path, "w", encoding="ascii") as f:
        json.dump(body_to_dict(model), f, separators=(",", ":"))
        f.write("\n")


def body_from_dict(doc: dict) -> BodyModel:
    if doc.get("version") != BODY_SCHEMA:
        raise SchemaError("version", f"expected {BODY_SCHEMA!r}, got {doc.get('version')!r}")
    for key in ("vertices", "faces", "shape_basis", "joints_rest", "parents", "skin_weights"):
        if key not in doc:
            raise SchemaError(key, "missing required field")
    return BodyModel(
        vertices_template=np.array(doc["vertices"], dtype=np.float64),
        faces=np.array(doc["faces"], dtype=np.int64),
        shape_basis=np.array(doc["shape_basis"], dtype=np.float64),
        joints_rest=np.array(doc["joints_rest"], dtype=np.float64),
        parents=np.array(doc["parents"], dtype=np.int64),
        skin_weights=[[(int(j), float(w)) for j, w in pairs] for pairs in doc["skin_weights"]],
        name=str(doc.get("name", "unnamed")),
    )


def load_body_model(path) -> BodyModel:
    with open(path, "r", encoding="ascii") as f:
        return body_from_dict(json.load(f))
