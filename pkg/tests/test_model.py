import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nedf import model as nedf_model
from nedf import nn
from nedf.errors import TrainingDiverged
from nedf.fields import AnalyticOracle, Sphere
from nedf.geometry import (
    Aabb,
    Ray,
    RigidTransform,
    tangency_frame,
    vec3,
)
from nedf.model import (
    BinPair,
    ClassifierConfig,
    NedfModel,
    RaySampler,
    TrainProfile,
    build_training_batch,
    load_nedf,
    loss_and_grads,
    new_model,
    query,
    query_depth_world,
    query_depth_world_batch,
    save_nedf,
    segment,
    segment_batch,
    train,
    unsegment,
    unsegment_batch,
)

CFG2 = ClassifierConfig(half_range=2.0)


def tiny_model(rng=None, l=2.0):
    rng = rng or np.random.default_rng(0)
    mlp = nn.MlpModel.init(rng, d_in=1008, d_feat=16, n_blocks=1)
    return NedfModel(mlp=mlp, config=ClassifierConfig(half_range=l),
                     relaxed_box=Aabb(vec3(-1.5, -1.5, -1.5), vec3(1.5, 1.5, 1.5)))


class TestSegment:
    def test_lower_boundary(self):
        assert segment(-2.0, CFG2) == BinPair(0, 0)

    def test_center_is_exact_coarse_edge(self):
        assert segment(0.0, CFG2) == BinPair(32, 0)

    def test_interior_value(self):
        # u = 0.675 -> 0.675 * 64 = 43.2 -> coarse 43; 0.2 * 128 = 25.6 -> 25
        assert segment(0.7, CFG2) == BinPair(43, 25)

    def test_clamps_out_of_range(self):
        assert segment(-5.0, CFG2) == BinPair(0, 0)
        assert segment(5.0, CFG2) == BinPair(63, 127)

    def test_upper_boundary_stays_in_bins(self):
        b = segment(2.0, CFG2)
        assert b == BinPair(63, 127)


class TestUnsegment:
    def test_origin_bin(self):
        assert unsegment(BinPair(0, 0), CFG2) == pytest.approx(-2.0)

    def test_center_bin(self):
        assert unsegment(BinPair(32, 0), CFG2) == pytest.approx(0.0)

    def test_interior_bin_lower_edge(self):
        out = unsegment(BinPair(43, 25), CFG2)
        assert out == pytest.approx(0.699707, abs=1e-6)
        assert abs(0.7 - out) <= CFG2.fine_width

    def test_rejects_out_of_range_bins(self):
        with pytest.raises(ValueError):
            unsegment(BinPair(64, 0), CFG2)

    @given(st.floats(-2.0, 2.0, allow_nan=False))
    @settings(max_examples=300)
    def test_round_trip_within_one_fine_bin(self, mu):
        back = unsegment(segment(mu, CFG2), CFG2)
        assert abs(back - mu) <= CFG2.fine_width + 1e-12

    def test_round_trip_grid(self):
        mus = np.linspace(-2.0, 2.0, 10_001)
        c, f = segment_batch(mus, CFG2)
        back = unsegment_batch(c, f, CFG2)
        assert np.max(np.abs(back - mus)) <= CFG2.fine_width + 1e-12

    def test_monotone_bin_ordering(self):
        mus = np.sort(np.random.default_rng(0).uniform(-2, 2, size=2000))
        c, f = segment_batch(mus, CFG2)
        key = c * CFG2.n_fine + f
        assert np.all(np.diff(key) >= 0)


class TestClassifierConfig:
    def test_derived_steps(self):
        assert CFG2.lambda1 == pytest.approx(4.0)
        assert CFG2.lambda2 == pytest.approx(4.0 / 64)
        assert CFG2.fine_width == pytest.approx(4.0 / 8192)

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            ClassifierConfig(half_range=0.0)
        with pytest.raises(ValueError):
            ClassifierConfig(half_range=1.0, n_coarse=1)


class FixedRaySampler(RaySampler):
    """Deterministic sampler handing back a preset ray list."""

    def __init__(self, box, origins, dirs):
        super().__init__(box=box)
        self._fixed = (np.asarray(origins, dtype=np.float64),
                       np.asarray(dirs, dtype=np.float64))

    def sample(self, rng, n):
        o, d = self._fixed
        reps = int(np.ceil(n / len(o)))
        return np.tile(o, (reps, 1))[:n], np.tile(d, (reps, 1))[:n]


class TestBuildTrainingBatch:
    def setup_method(self):
        self.oracle = AnalyticOracle(Sphere(vec3(0, 0, 0), 1.0))
        self.box = Aabb(vec3(-1.5, -1.5, -1.5), vec3(1.5, 1.5, 1.5))
        self.cfg = ClassifierConfig(half_range=2.0)

    def test_axis_ray_targets(self):
        # mu = dist(3) - depth(2) = 1 -> u = 0.75 -> coarse 48, fine 0
        sampler = FixedRaySampler(self.box, [[0, 0, -3]], [[0, 0, 1]])
        batch = build_training_batch(self.oracle, sampler, self.cfg,
                                     np.random.default_rng(0), batch_size=4)
        assert segment(1.0, self.cfg) == BinPair(48, 0)
        assert batch.valid_mu.all()
        np.testing.assert_array_equal(batch.target_alpha, 1.0)
        assert np.all(batch.target_coarse.argmax(axis=1) == 48)
        assert np.all(batch.target_fine.argmax(axis=1) == 0)

    def test_missing_ray_has_alpha_zero_and_no_bins(self):
        # crosses the box corner region but misses the unit sphere
        sampler = FixedRaySampler(self.box, [[1.3, 1.3, -3]], [[0, 0, 1]])
        batch = build_training_batch(self.oracle, sampler, self.cfg,
                                     np.random.default_rng(0), batch_size=4)
        assert not batch.valid_mu.any()
        np.testing.assert_array_equal(batch.target_alpha, 0.0)
        np.testing.assert_array_equal(batch.target_coarse, 0.0)
        np.testing.assert_array_equal(batch.target_fine, 0.0)

    def test_default_batch_shape(self):
        sampler = RaySampler(box=self.box)
        batch = build_training_batch(self.oracle, sampler, self.cfg,
                                     np.random.default_rng(1))
        assert batch.encoded.shape == (4096, 1008)

    def test_views_mode_uses_fixed_origins(self):
        sampler = RaySampler(box=self.box, mode="views", n_views=8)
        rng = np.random.default_rng(2)
        o1, _ = sampler.sample(rng, 64)
        o2, _ = sampler.sample(rng, 64)
        views = np.unique(np.vstack([o1, o2]), axis=0)
        assert len(views) <= 8


class TestLossStructure:
    def test_hand_computed_two_ray_batch(self):
        # weights are exactly (1, 1, 0.1); verify on a 2-ray batch against
        # independently computed stabilized cross-entropies
        rng = np.random.default_rng(3)
        mlp = nn.MlpModel.init(rng, d_in=1008, d_feat=8, n_blocks=1,
                               n_coarse=4, n_fine=4)
        box = Aabb(vec3(-1.5, -1.5, -1.5), vec3(1.5, 1.5, 1.5))
        cfg = ClassifierConfig(half_range=2.0, n_coarse=4, n_fine=4)
        oracle = AnalyticOracle(Sphere(vec3(0, 0, 0), 1.0))
        sampler = FixedRaySampler(box, [[0, 0, -3], [1.3, 1.3, -3]],
                                  [[0, 0, 1], [0, 0, 1]])
        batch = build_training_batch(oracle, sampler, cfg,
                                     np.random.default_rng(0), batch_size=2)
        total, parts, _ = loss_and_grads(mlp, batch)

        lc, lf, la, _ = nn.forward(mlp, batch.encoded)

        def xent(z, t):
            return np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))

        # bin losses average over the hit row only; alpha over both rows
        hit = batch.valid_mu
        expect_c = xent(lc[hit], batch.target_coarse[hit]).mean()
        expect_f = xent(lf[hit], batch.target_fine[hit]).mean()
        expect_a = xent(la, batch.target_alpha).mean()
        assert parts[0] == pytest.approx(expect_c, abs=1e-12)
        assert parts[1] == pytest.approx(expect_f, abs=1e-12)
        assert parts[2] == pytest.approx(expect_a, abs=1e-12)
        assert total == pytest.approx(expect_c + expect_f + 0.1 * expect_a, abs=1e-12)


class TestTraining:
    def test_short_run_reduces_loss(self):
        rng = np.random.default_rng(0)
        oracle = AnalyticOracle(Sphere(vec3(0, 0, 0), 1.0))
        model = new_model(oracle, rng, profile=TrainProfile(16, 1, 128, 0))
        losses = train(model, oracle, rng, iterations=120, batch_size=128)
        assert len(losses) == 120
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_untrained_alpha_is_chance_on_balanced_rays(self):
        rng = np.random.default_rng(0)
        oracle = AnalyticOracle(Sphere(vec3(0, 0, 0), 1.0))
        model = new_model(oracle, rng, profile=TrainProfile(16, 1, 128, 0))
        sampler = RaySampler(box=model.relaxed_box)
        origins, dirs = sampler.sample(rng, 2048)
        _, hit = oracle.trace(origins, dirs)
        _, alpha = nedf_model.query_rays(model, origins, dirs)
        acc = (alpha == hit).mean()
        assert 0.2 < acc < 0.8

    def test_nan_loss_aborts(self):
        rng = np.random.default_rng(0)
        oracle = AnalyticOracle(Sphere(vec3(0, 0, 0), 1.0))
        model = new_model(oracle, rng, profile=TrainProfile(16, 1, 128, 0))
        model.mlp.head.weight[0, 0] = np.nan
        with pytest.raises(TrainingDiverged):
            train(model, oracle, rng, iterations=3, batch_size=32)

    def test_oracle_escaping_box_rejected(self):
        rng = np.random.default_rng(0)
        oracle = AnalyticOracle(Sphere(vec3(0, 0, 0), 1.0))
        model = new_model(oracle, rng, profile=TrainProfile(16, 1, 128, 0))
        big = AnalyticOracle(Sphere(vec3(0, 0, 0), 5.0))
        with pytest.raises(ValueError):
            train(model, big, rng, iterations=1, batch_size=32)


class TestQuery:
    def test_box_miss_skips_network(self, monkeypatch):
        model = tiny_model()

        def boom(*a, **k):
            raise AssertionError("network evaluated for a box-missing ray")

        monkeypatch.setattr(nn, "forward", boom)
        mu, alpha = query(model, Ray(vec3(5, 5, -3), vec3(0, 0, 1)))
        assert not alpha
        assert np.isnan(mu)

    def test_equal_logits_decode_to_lowest_bins(self):
        model = tiny_model()
        for p in model.mlp.parameters():
            p[:] = 0.0
        mu, alpha = query(model, Ray(vec3(0, 0, -3), vec3(0, 0, 1)))
        # coarse 0, fine 0 -> mu = -l; sigma(0) = 0.5 is not > 0.5
        assert mu == pytest.approx(-model.config.half_range)
        assert not alpha

    def test_argmax_invariant_under_monotone_logit_maps(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(32, 64))
        for f in (lambda z: 2 * z + 1, np.tanh, lambda z: z**3):
            np.testing.assert_array_equal(logits.argmax(1), f(logits).argmax(1))


class TestQueryDepthWorld:
    def perfect_query(self, oracle_radius=1.0):
        """Stand-in for query_rays returning exact oracle mu."""
        sphere = Sphere(vec3(0, 0, 0), oracle_radius)
        oracle = AnalyticOracle(sphere)

        def q(model, origins, dirs):
            depth, hit = oracle.trace(origins, dirs)
            from nedf.geometry import tangency_dist_batch
            mu = tangency_dist_batch(origins, dirs) - depth
            mu[~hit] = np.nan
            return mu, hit

        return q

    def test_identity_transform_reduces_to_depth_from_mu(self):
        model = tiny_model()
        rng = np.random.default_rng(6)
        for _ in range(20):
            o = rng.uniform(-3, 3, size=3)
            d = rng.normal(size=3)
            ray = Ray.unit(o, d)
            depth, alpha = query_depth_world(model, ray, RigidTransform.identity())
            mu, alpha2 = query(model, ray)
            if np.isnan(mu):
                assert not alpha and not alpha2
                continue
            frame = tangency_frame(ray)
            expect = frame.dist_o_pperp - mu
            if expect > 0:
                assert alpha == alpha2
                assert depth == expect
            else:
                # non-positive depths on predicted hits are demoted to misses
                assert not alpha

    def test_scaled_sphere_depth(self, monkeypatch):
        # radius-2 object as a scaled unit sphere: ray from z=-6 -> depth 4
        monkeypatch.setattr(nedf_model, "query_rays", self.perfect_query())
        model = tiny_model()
        g = RigidTransform(np.eye(3), np.zeros(3), scale=2.0)
        depth, alpha = query_depth_world(model, Ray(vec3(0, 0, -6), vec3(0, 0, 1)), g)
        assert alpha
        assert depth == pytest.approx(4.0, abs=1e-6)

    def test_translated_sphere_depth(self, monkeypatch):
        monkeypatch.setattr(nedf_model, "query_rays", self.perfect_query())
        model = tiny_model()
        g = RigidTransform(np.eye(3), vec3(0, 0, 2), scale=1.0)
        depth, alpha = query_depth_world(model, Ray(vec3(0, 0, -3), vec3(0, 0, 1)), g)
        assert alpha
        assert depth == pytest.approx(4.0, abs=1e-6)

    def test_random_rigid_transforms_match_closed_form(self, monkeypatch):
        monkeypatch.setattr(nedf_model, "query_rays", self.perfect_query())
        model = tiny_model()
        rng = np.random.default_rng(7)
        for _ in range(50):
            q_mat, _ = np.linalg.qr(rng.normal(size=(3, 3)))
            if np.linalg.det(q_mat) < 0:
                q_mat[:, 0] = -q_mat[:, 0]
            g = RigidTransform(q_mat, rng.uniform(-2, 2, size=3),
                               float(rng.uniform(0.5, 3.0)))
            origin = g.translation + rng.uniform(2.5, 5.0) * _unit(rng)
            target = g.translation + g.scale * 0.8 * _unit(rng)
            ray = Ray.through(origin, target)
            depth, alpha = query_depth_world_batch(
                model, g, ray.origin[None], ray.direction[None])
            # closed-form world intersection with the radius-s sphere at T
            b = ray.origin - g.translation
            tc = -float(b @ ray.direction)
            disc = tc**2 - float(b @ b) + g.scale**2
            assert alpha[0] == (disc >= 0 and tc - np.sqrt(max(disc, 0)) > 0)
            if alpha[0]:
                assert depth[0] == pytest.approx(tc - np.sqrt(disc), abs=1e-6)

    def test_nonpositive_depth_demoted_to_miss(self, monkeypatch):
        def fake_query(model, origins, dirs):
            return np.full(origins.shape[0], 10.0), np.ones(origins.shape[0], bool)

        monkeypatch.setattr(nedf_model, "query_rays", fake_query)
        model = tiny_model()
        # tangency distance ~0 for a ray through the origin: depth = -10 < 0
        depth, alpha = query_depth_world(
            model, Ray(vec3(0, 0, -3), vec3(0, 0, 1)), RigidTransform.identity())
        assert not alpha


def _unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


class TestNedfPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        model = tiny_model(rng)
        model.alpha_threshold = 0.625
        p1 = tmp_path / "m.nedm"
        p2 = tmp_path / "m2.nedm"
        save_nedf(model, p1)
        loaded = load_nedf(p1)
        assert loaded.alpha_threshold == pytest.approx(0.625)
        assert loaded.config.n_coarse == model.config.n_coarse
        assert loaded.config.half_range == pytest.approx(model.config.half_range, rel=1e-6)
        np.testing.assert_allclose(loaded.relaxed_box.min, model.relaxed_box.min, atol=1e-6)
        save_nedf(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_new_model_box_and_range(self):
        oracle = AnalyticOracle(Sphere(vec3(0, 0, 0), 1.0))
        model = new_model(oracle, np.random.default_rng(0))
        np.testing.assert_allclose(model.relaxed_box.min, [-1.5, -1.5, -1.5])
        assert model.config.half_range == pytest.approx(1.5 * np.sqrt(3))
