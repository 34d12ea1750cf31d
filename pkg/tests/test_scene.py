import dataclasses

import numpy as np
import pytest

from occond.bodymodel import PoseSpec, ShapeVector
from occond.errors import SceneValidationError, SchemaError
from occond.scene import (
    Camera,
    HumanSpec,
    SceneSpec,
    collect_violations,
    load_scene,
    project,
    save_scene,
    scene_from_dict,
    scene_to_dict,
    validate_scene,
)

from conftest import make_human, make_scene


def simple_camera():
    return Camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)


class TestProject:
    def test_on_axis_point(self):
        assert project(simple_camera(), [0.0, 0.0, 2.0]) == (50.0, 50.0, 2.0)

    def test_off_axis_point(self):
        # u = 100 * (1 / 2) + 50 = 100 by hand
        assert project(simple_camera(), [1.0, 0.0, 2.0]) == (100.0, 50.0, 2.0)

    def test_behind_camera_marker(self):
        assert project(simple_camera(), [0.3, 0.2, 0.0]) is None
        assert project(simple_camera(), [0.3, 0.2, -1.0]) is None

    def test_scale_consistency(self):
        cam = simple_camera()
        rng = np.random.default_rng(5)
        for _ in range(50):
            x, y = rng.uniform(-3, 3, size=2)
            z = rng.uniform(0.5, 6.0)
            u1, v1, _ = project(cam, [x, y, z])
            u2, v2, _ = project(cam, [2 * x, 2 * y, z])
            # the +cx roundtrip costs at most an ulp
            assert u2 - cam.cx == pytest.approx(2 * (u1 - cam.cx), rel=1e-12, abs=1e-12)
            assert v2 - cam.cy == pytest.approx(2 * (v1 - cam.cy), rel=1e-12, abs=1e-12)

    def test_extrinsic_applied(self):
        rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        cam = Camera(
            fx=100, fy=100, cx=50, cy=50, width=100, height=100,
            rotation=rot, translation=np.array([0.0, 0.0, 1.0]),
        )
        # world (1, 0, 1) -> camera (0, 1, 2)
        u, v, depth = project(cam, [1.0, 0.0, 1.0])
        assert (u, v, depth) == (50.0, 100.0, 2.0)


class TestValidateScene:
    def test_accepts_well_formed_two_human_scene(self, body_small):
        scene = make_scene(
            body_small,
            humans=(make_human(body_small), make_human(body_small, translation=(0.4, 0, 2.8))),
        )
        assert validate_scene(scene, body_small) is scene

    def test_rejects_beta_length(self, body_small):
        bad = HumanSpec(
            beta=ShapeVector(np.zeros(9)),
            pose=PoseSpec(np.zeros(3), np.zeros((body_small.num_joints, 3))),
        )
        scene = make_scene(body_small, humans=(bad,))
        with pytest.raises(SceneValidationError) as err:
            validate_scene(scene, body_small)
        assert any(path == "humans[0].beta" for path, _ in err.value.violations)

    def test_rejects_empty_humans(self, body_small):
        scene = SceneSpec(camera=simple_camera(), humans=())
        with pytest.raises(SceneValidationError) as err:
            validate_scene(scene, body_small)
        assert any(path == "humans" for path, _ in err.value.violations)

    @pytest.mark.parametrize(
        "corrupt,expected_path",
        [
            (lambda s: dataclasses.replace(s, camera=dataclasses.replace(s.camera, fx=0.0)),
             "camera.fx"),
            (lambda s: dataclasses.replace(s, camera=dataclasses.replace(s.camera, near=9.0)),
             "camera.near"),
            (lambda s: dataclasses.replace(
                s, camera=dataclasses.replace(s.camera, rotation=np.eye(3) * 2.0)),
             "camera.extrinsic.rotation"),
            (lambda s: dataclasses.replace(s, humans=(dataclasses.replace(
                s.humans[0],
                pose=PoseSpec(np.array([np.nan, 0, 2.5]), s.humans[0].pose.joint_rotations)),)),
             "humans[0].pose.root_translation"),
            (lambda s: dataclasses.replace(s, humans=(dataclasses.replace(
                s.humans[0], face_landmarks=np.zeros((4, 2))),)),
             "humans[0].face_landmarks"),
            (lambda s: dataclasses.replace(s, humans=(dataclasses.replace(
                s.humans[0],
                pose=PoseSpec(s.humans[0].pose.root_translation,
                              np.full((s.humans[0].pose.joint_rotations.shape[0], 3), np.inf))),)),
             "humans[0].pose.joint_rotations"),
        ],
    )
    def test_single_field_corruptions(self, body_small, corrupt, expected_path):
        scene = make_scene(body_small)
        assert collect_violations(scene, body_small) == []
        violations = collect_violations(corrupt(scene), body_small)
        assert [path for path, _ in violations] == [expected_path]

    def test_five_landmarks_accepted(self, body_small):
        human = dataclasses.replace(
            make_human(body_small), face_landmarks=np.arange(10).reshape(5, 2).astype(float)
        )
        scene = make_scene(body_small, humans=(human,))
        assert collect_violations(scene, body_small) == []


class TestSceneIO:
    def test_roundtrip(self, tmp_path, body_small):
        human = dataclasses.replace(
            make_human(body_small, betas=np.linspace(-1, 1, 10)),
            face_landmarks=np.arange(10).reshape(5, 2).astype(float),
        )
        scene = make_scene(body_small, humans=(human,))
        path = tmp_path / "scene.json"
        save_scene(scene, path)
        loaded = load_scene(path)
        for name in ("fx", "fy", "cx", "cy", "width", "height", "near", "depth_clip"):
            assert getattr(loaded.camera, name) == getattr(scene.camera, name)
        np.testing.assert_array_equal(loaded.camera.rotation, scene.camera.rotation)
        np.testing.assert_array_equal(loaded.camera.translation, scene.camera.translation)
        np.testing.assert_array_equal(loaded.humans[0].beta.betas, human.beta.betas)
        np.testing.assert_array_equal(loaded.humans[0].face_landmarks, human.face_landmarks)
        assert loaded.model_ref == "fixture"

    def test_rejects_wrong_schema(self, body_small):
        doc = scene_to_dict(make_scene(body_small))
        doc["schema"] = "occond-scene/999"
        with pytest.raises(SchemaError, match="schema"):
            scene_from_dict(doc)

    def test_missing_field_names_path(self, body_small):
        doc = scene_to_dict(make_scene(body_small))
        del doc["humans"][0]["betas"]
        with pytest.raises(SchemaError, match=r"humans\[0\]"):
            scene_from_dict(doc)
