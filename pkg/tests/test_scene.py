import json

import numpy as np
import pytest

from nedf import nn
from nedf.errors import SceneValidationError
from nedf.fields import AnalyticOracle, Sphere
from nedf.geometry import RigidTransform, vec3
from nedf.model import ClassifierConfig, NedfModel, save_nedf
from nedf.pipeline import NedfDepthBackend, OracleDepthBackend, PointLight
from nedf.scene import (
    AnimationTrack,
    QuatTransform,
    dumps_scene,
    evaluate_animation,
    load_scene,
    loads_scene,
    matrix_to_quat,
    quat_slerp,
    quat_to_matrix,
)

MINIMAL = {
    "version": 1,
    "camera": {"position": [0, 0, -5], "look_at": [0, 0, 0],
               "fov_deg": 45, "width": 32, "height": 32},
    "clear_color": [0, 0, 0],
    "lights": [{"type": "point", "position": [0, 5, 0], "beta": 0.4}],
    "objects": [
        {"id": 0,
         "geometry": {"type": "sphere", "center": [0, 0, 0], "radius": 1.0},
         "transform": {"translation": [0, 0, 0],
                       "rotation_quat": [1, 0, 0, 0], "scale": 1.0}},
    ],
}


def scene_text(**overrides):
    doc = json.loads(json.dumps(MINIMAL))
    doc.update(overrides)
    return json.dumps(doc)


class TestQuaternions:
    def test_identity(self):
        np.testing.assert_allclose(quat_to_matrix(np.array([1.0, 0, 0, 0])), np.eye(3))

    def test_round_trip_random_rotations(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
            if np.linalg.det(q) < 0:
                q[:, 0] = -q[:, 0]
            back = quat_to_matrix(matrix_to_quat(q))
            np.testing.assert_allclose(back, q, atol=1e-9)

    def test_slerp_halfway_90_degrees(self):
        qa = np.array([1.0, 0, 0, 0])
        qb = matrix_to_quat(np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]]))  # 90deg z
        mid = quat_to_matrix(quat_slerp(qa, qb, 0.5))
        c, s = np.cos(np.pi / 4), np.sin(np.pi / 4)
        np.testing.assert_allclose(mid, [[c, -s, 0], [s, c, 0], [0, 0, 1]], atol=1e-9)


class TestLoadScene:
    def test_minimal_scene_parses_with_defaults(self):
        desc = loads_scene(scene_text())
        assert len(desc.objects) == 1
        cam = desc.camera()
        assert cam.width == 32
        cfg = desc.render_config()
        assert cfg.clear_color == (0.0, 0.0, 0.0)
        lights = desc.build_lights()
        assert isinstance(lights[0], PointLight)

    def test_duplicate_id_names_both_entries(self):
        doc = json.loads(scene_text())
        doc["objects"].append(dict(doc["objects"][0]))
        with pytest.raises(SceneValidationError) as exc:
            loads_scene(json.dumps(doc))
        assert "objects[1].id" in str(exc.value)
        assert "objects[0]" in str(exc.value)

    def test_missing_model_file_is_an_error(self, tmp_path):
        doc = json.loads(scene_text())
        doc["objects"][0]["nedf_model"] = "missing.nedm"
        path = tmp_path / "scene.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(SceneValidationError) as exc:
            load_scene(path)
        assert "nedf_model" in str(exc.value)

    def test_malformed_transform_named(self):
        doc = json.loads(scene_text())
        doc["objects"][0]["transform"]["rotation_quat"] = [1, 0, 0]
        with pytest.raises(SceneValidationError) as exc:
            loads_scene(json.dumps(doc))
        assert "objects[0].transform.rotation_quat" in str(exc.value)

    def test_non_unit_quaternion_rejected(self):
        doc = json.loads(scene_text())
        doc["objects"][0]["transform"]["rotation_quat"] = [2, 0, 0, 0]
        with pytest.raises(SceneValidationError):
            loads_scene(json.dumps(doc))

    def test_wrong_version_rejected(self):
        with pytest.raises(SceneValidationError):
            loads_scene(scene_text(version=99))

    def test_unknown_geometry_named(self):
        doc = json.loads(scene_text())
        doc["objects"][0]["geometry"] = {"type": "blob"}
        with pytest.raises(SceneValidationError) as exc:
            loads_scene(json.dumps(doc))
        assert "objects[0].geometry" in str(exc.value)

    def test_instances_share_one_model(self, tmp_path):
        rng = np.random.default_rng(0)
        mlp = nn.MlpModel.init(rng, d_in=1008, d_feat=8, n_blocks=1)
        model = NedfModel(mlp=mlp, config=ClassifierConfig(half_range=2.0),
                          relaxed_box=AnalyticOracle(Sphere(vec3(0, 0, 0), 1.0)).bounding_box)
        save_nedf(model, tmp_path / "shared.nedm")
        doc = json.loads(scene_text())
        doc["objects"] = [
            {"id": i,
             "geometry": {"type": "sphere", "radius": 1.0},
             "nedf_model": "shared.nedm",
             "transform": {"translation": [float(i), 0, 0]}}
            for i in range(50)
        ]
        path = tmp_path / "scene.json"
        path.write_text(json.dumps(doc))
        desc = load_scene(path)
        instances = desc.instantiate()
        models = {id(inst.depth.model) for inst in instances}
        assert len(models) == 1  # one shared handle for all 50 instances
        assert all(isinstance(inst.depth, NedfDepthBackend) for inst in instances)

    def test_oracle_backend_without_model(self):
        desc = loads_scene(scene_text())
        inst = desc.instantiate()[0]
        assert isinstance(inst.depth, OracleDepthBackend)

    def test_load_dump_load_fixed_point(self, tmp_path):
        doc = json.loads(scene_text())
        doc["objects"][0]["animation"] = {
            "keyframes": [
                {"time": 0.0, "transform": {"translation": [0, 0, 0]}},
                {"time": 1.0, "transform": {"translation": [1, 0, 0]}},
            ]}
        desc1 = loads_scene(json.dumps(doc))
        text1 = dumps_scene(desc1)
        desc2 = loads_scene(text1)
        text2 = dumps_scene(desc2)
        assert text1 == text2


class TestAnimation:
    def track(self, *frames):
        return AnimationTrack(keyframes=tuple(
            (t, QuatTransform(translation=np.asarray(tr, dtype=np.float64),
                              rotation_quat=np.asarray(q, dtype=np.float64),
                              scale=s))
            for t, tr, q, s in frames))

    def test_keyframe_time_is_exact(self):
        track = self.track((0.0, [0, 0, 0], [1, 0, 0, 0], 1.0),
                           (2.0, [4, 0, 0], [1, 0, 0, 0], 2.0))
        g = evaluate_animation(track, 2.0)
        np.testing.assert_allclose(g.translation, [4, 0, 0])
        assert g.scale == pytest.approx(2.0)

    def test_midpoint_translation_mean(self):
        track = self.track((0.0, [0, 0, 0], [1, 0, 0, 0], 1.0),
                           (1.0, [2, 4, -6], [1, 0, 0, 0], 1.0))
        g = evaluate_animation(track, 0.5)
        np.testing.assert_allclose(g.translation, [1, 2, -3])

    def test_rotation_slerp_halfway(self):
        q90 = matrix_to_quat(np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]]))
        track = self.track((0.0, [0, 0, 0], [1, 0, 0, 0], 1.0),
                           (1.0, [0, 0, 0], q90, 1.0))
        g = evaluate_animation(track, 0.5)
        c, s = np.cos(np.pi / 4), np.sin(np.pi / 4)
        np.testing.assert_allclose(g.rotation, [[c, -s, 0], [s, c, 0], [0, 0, 1]],
                                   atol=1e-9)

    def test_clamped_outside_range(self):
        track = self.track((1.0, [1, 1, 1], [1, 0, 0, 0], 1.0),
                           (2.0, [5, 5, 5], [1, 0, 0, 0], 1.0))
        np.testing.assert_allclose(evaluate_animation(track, 0.0).translation, [1, 1, 1])
        np.testing.assert_allclose(evaluate_animation(track, 9.0).translation, [5, 5, 5])

    def test_log_linear_scale(self):
        track = self.track((0.0, [0, 0, 0], [1, 0, 0, 0], 1.0),
                           (1.0, [0, 0, 0], [1, 0, 0, 0], 4.0))
        assert evaluate_animation(track, 0.5).scale == pytest.approx(2.0)

    def test_sampled_transforms_stay_rigid(self):
        rng = np.random.default_rng(1)
        q_mat, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        if np.linalg.det(q_mat) < 0:
            q_mat[:, 0] = -q_mat[:, 0]
        track = self.track((0.0, [0, 0, 0], [1, 0, 0, 0], 0.5),
                           (1.0, [1, 2, 3], matrix_to_quat(q_mat), 3.0))
        for t in np.linspace(-0.5, 1.5, 41):
            g = evaluate_animation(track, t)  # constructor enforces rigidity
            drift = np.abs(g.rotation.T @ g.rotation - np.eye(3)).max()
            assert drift < 1e-9

    def test_non_increasing_times_rejected(self):
        with pytest.raises(ValueError):
            self.track((0.0, [0, 0, 0], [1, 0, 0, 0], 1.0),
                       (0.0, [1, 0, 0], [1, 0, 0, 0], 1.0))
