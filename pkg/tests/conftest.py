import numpy as np
import pytest

from occond.bodymodel import PoseSpec, ShapeVector, make_fixture_body
from occond.scene import Camera, HumanSpec, SceneSpec


@pytest.fixture(scope="session")
def body_small():
    return make_fixture_body("capsule-person", detail=0)


@pytest.fixture(scope="session")
def body_default():
    return make_fixture_body("capsule-person", detail=1)


def make_camera(size: int = 64, f: float = 70.0, depth_clip: float = 5.0) -> Camera:
    return Camera(
        fx=f * size / 64.0,
        fy=f * size / 64.0,
        cx=size / 2.0,
        cy=size / 2.0,
        width=size,
        height=size,
        depth_clip=depth_clip,
    )


def make_human(model, translation=(0.0, 0.0, 2.5), betas=None, rotations=None) -> HumanSpec:
    betas = np.zeros(model.num_shape_coeffs) if betas is None else np.asarray(betas)
    rots = np.zeros((model.num_joints, 3)) if rotations is None else np.asarray(rotations)
    return HumanSpec(
        beta=ShapeVector(betas),
        pose=PoseSpec(np.asarray(translation, dtype=np.float64), rots),
    )


def make_scene(model, humans=None, size: int = 64) -> SceneSpec:
    if humans is None:
        humans = (make_human(model),)
    return SceneSpec(camera=make_camera(size), humans=tuple(humans), model_ref="fixture")


def random_pose(model, rng, translation_z=(2.2, 3.2), max_joint_angle=0.5) -> PoseSpec:
    translation = np.array(
        [rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3), rng.uniform(*translation_z)]
    )
    rots = np.zeros((model.num_joints, 3))
    rots[0] = rng.uniform(-0.6, 0.6, size=3)
    for j in range(1, model.num_joints):
        rots[j] = rng.uniform(-max_joint_angle, max_joint_angle, size=3)
    return PoseSpec(translation, rots)


def random_scene(model, rng, n_humans: int | None = None, size: int = 64) -> SceneSpec:
    if n_humans is None:
        n_humans = int(rng.integers(1, 3))
    humans = tuple(
        HumanSpec(
            beta=ShapeVector(rng.uniform(-1.0, 1.0, size=model.num_shape_coeffs)),
            pose=random_pose(model, rng),
        )
        for _ in range(n_humans)
    )
    return SceneSpec(camera=make_camera(size), humans=humans, model_ref="fixture")
