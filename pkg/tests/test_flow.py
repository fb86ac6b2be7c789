"""Flow composition: density bookkeeping, inversion, sampling, checkpoints."""

import numpy as np
import pytest

from resflow.checkpoint import load_checkpoint, save_checkpoint
from resflow.errors import ContractivityError, InitializationError, ShapeError
from resflow.flow import (
    ActNorm,
    FlowModel,
    ResidualBlock,
    actnorm_initialize,
    base_log_density,
    build_model,
    forward,
    inverse,
    log_density_batch,
    sample,
    set_identity_actnorms,
    transform,
)
from resflow.logdet import EstimatorConfig
from resflow.norms import checkpoint_constraint, init_block_params


def random_model(seed=0, n_blocks=4, hidden=24, actnorm=True):
    model = build_model(
        np.random.default_rng(seed), n_blocks=n_blocks, hidden=hidden, actnorm=actnorm
    )
    set_identity_actnorms(model)
    return model


class TestForward:
    def test_empty_model_is_base_density(self):
        model = FlowModel(dim=2, layers=[])
        z, res = forward(model, np.zeros(2))
        np.testing.assert_array_equal(z, np.zeros(2))
        assert res.logp == pytest.approx(-np.log(2 * np.pi), rel=1e-12)
        assert res.logp == pytest.approx(-1.83788, abs=5e-6)

    def test_single_actnorm_affine_change_of_variables(self):
        act = ActNorm(log_scale=np.log(np.array([2.0, 2.0])), shift=np.zeros(2), initialized=True)
        model = FlowModel(dim=2, layers=[act])
        z, res = forward(model, np.array([1.0, 1.0]))
        np.testing.assert_allclose(z, [2.0, 2.0], rtol=1e-15)
        assert res.per_layer_logdet[0] == pytest.approx(2 * np.log(2.0), rel=1e-12)
        assert res.logp == pytest.approx(base_log_density(z) + 2 * np.log(2.0), rel=1e-12)

    def test_additivity_bookkeeping(self):
        model = random_model(seed=1)
        x = np.random.default_rng(2).standard_normal(2)
        _, res = forward(model, x)
        assert res.logp == pytest.approx(
            res.base_logp + sum(res.per_layer_logdet), abs=1e-12
        )

    def test_uninitialized_actnorm_raises(self):
        model = build_model(np.random.default_rng(3), n_blocks=1, hidden=8)
        with pytest.raises(InitializationError):
            forward(model, np.zeros(2))

    def test_estimator_meta_population(self):
        model = random_model(seed=4, n_blocks=3)
        cfg = EstimatorConfig()
        _, res = forward(model, np.zeros(2), mode="unbiased", cfg=cfg, rng=np.random.default_rng(0))
        assert len(res.estimator_meta) == 3
        _, res_exact = forward(model, np.zeros(2))
        assert res_exact.estimator_meta == []

    def test_estimator_mode_consistent_with_exact(self):
        model = random_model(seed=5, n_blocks=2)
        x = np.array([0.3, -0.8])
        _, exact = forward(model, x)
        cfg = EstimatorConfig()
        rng = np.random.default_rng(1)
        X = np.broadcast_to(x, (10_000, 2))
        _, logp, _ = log_density_batch(model, X, mode="unbiased", cfg=cfg, rng=rng)
        se = logp.std(ddof=1) / np.sqrt(len(logp))
        assert abs(logp.mean() - exact.logp) < 3 * se

    def test_batch_consistent_with_single(self):
        model = random_model(seed=6)
        X = np.random.default_rng(7).standard_normal((5, 2))
        _, logp, _ = log_density_batch(model, X)
        singles = np.array([forward(model, x)[1].logp for x in X])
        np.testing.assert_allclose(logp, singles, rtol=1e-12)

    def test_shape_errors(self):
        model = random_model()
        with pytest.raises(ShapeError):
            forward(model, np.zeros(3))
        with pytest.raises(ValueError):
            forward(model, np.zeros(2), mode="unbiased")  # missing cfg/rng


class TestInverse:
    def test_zero_branch_inverts_in_one_iteration(self):
        params = init_block_params(np.random.default_rng(8), 2, hidden=8)
        for lay in params.layers:
            lay.weight[...] = 0.0
            lay.bias[...] = 0.0
        model = FlowModel(dim=2, layers=[ResidualBlock(params=params)])
        z = np.array([1.5, -2.0])
        x, residuals = inverse(model, z, return_residuals=True)
        np.testing.assert_allclose(x, z, rtol=1e-15)
        assert len(residuals[0]) == 1

    def test_round_trip_both_directions(self):
        model = random_model(seed=9, n_blocks=5)
        rng = np.random.default_rng(10)
        X = rng.standard_normal((1000, 2)) * 2.0
        Z = transform(model, X)
        X_back = inverse(model, Z, tol=1e-12)
        assert np.max(np.linalg.norm(X_back - X, axis=1)) < 1e-8
        Z2 = rng.standard_normal((200, 2))
        X2 = inverse(model, Z2, tol=1e-12)
        assert np.max(np.linalg.norm(transform(model, X2) - Z2, axis=1)) < 1e-7

    def test_geometric_residual_decay(self):
        model = random_model(seed=11, n_blocks=3, hidden=32)
        from resflow.norms import layer_norms

        for lay in model.layers:
            if isinstance(lay, ResidualBlock):
                checkpoint_constraint(lay.params, 0.98)
        z = np.random.default_rng(12).standard_normal((50, 2))
        _, residuals = inverse(model, z, tol=1e-12, return_residuals=True)
        for lay, block_res in zip(
            [l for l in reversed(model.layers) if isinstance(l, ResidualBlock)], residuals
        ):
            bound = float(np.prod(layer_norms(lay.params)))
            meaningful = [r for r in block_res if r > 1e-12]
            for a, b in zip(meaningful, meaningful[1:]):
                assert b <= bound * a * (1 + 1e-6)

    def test_nonconvergence_raises(self):
        model = random_model(seed=13, n_blocks=1)
        with pytest.raises(ContractivityError):
            inverse(model, np.zeros(2), tol=1e-10, max_iters=1)


class TestSample:
    def test_empty_model_samples_standard_normal(self):
        import scipy.stats

        model = FlowModel(dim=2, layers=[])
        pts = sample(model, np.random.default_rng(42), 4000)
        for j in range(2):
            stat = scipy.stats.kstest(pts[:, j], "norm")
            assert stat.pvalue > 0.01

    def test_seed_determinism(self):
        model = random_model(seed=15)
        a = sample(model, np.random.default_rng(99), 50)
        b = sample(model, np.random.default_rng(99), 50)
        np.testing.assert_array_equal(a, b)

    def test_zero_samples(self):
        model = random_model(seed=16)
        assert sample(model, np.random.default_rng(0), 0).shape == (0, 2)


class TestActnormInit:
    def test_standardized_batch_gives_identity(self):
        rng = np.random.default_rng(17)
        batch = rng.standard_normal((100_000, 2))
        batch = (batch - batch.mean(0)) / batch.std(0)
        act = ActNorm.uninitialized(2)
        act.initialize_from(batch)
        np.testing.assert_allclose(np.exp(act.log_scale), 1.0, atol=1e-12)
        np.testing.assert_allclose(act.shift, 0.0, atol=1e-12)

    def test_shifted_scaled_batch_standardized(self):
        rng = np.random.default_rng(18)
        batch = rng.standard_normal((50_000, 2)) * np.array([2.0, 2.0]) + np.array([3.0, -3.0])
        act = ActNorm.uninitialized(2)
        act.initialize_from(batch)
        out = act.forward(batch)
        np.testing.assert_allclose(out.mean(0), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(0), 1.0, atol=1e-10)
        # scale ~ 1/2, total shift equivalent to subtracting the mean first
        np.testing.assert_allclose(np.exp(act.log_scale), 0.5, atol=0.02)

    def test_single_element_batch_hits_variance_floor(self):
        act = ActNorm.uninitialized(2)
        with pytest.warns(UserWarning):
            act.initialize_from(np.array([[1.0, 2.0]]))
        assert np.all(np.isfinite(act.log_scale))

    def test_sequential_initialization_standardizes_through_stack(self):
        model = build_model(np.random.default_rng(19), n_blocks=2, hidden=8)
        rng = np.random.default_rng(20)
        batch = rng.uniform(-4, 4, (4096, 2))
        actnorm_initialize(model, batch)
        out = transform(model, batch)
        np.testing.assert_allclose(out.mean(0), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.std(0), 1.0, atol=1e-9)


class TestNormalizationQuadrature:
    def test_density_integrates_to_one(self):
        from resflow.grid import compute_grid

        model = random_model(seed=21, n_blocks=4, hidden=16)
        rng = np.random.default_rng(22)
        for lay in model.layers:
            if isinstance(lay, ResidualBlock):
                for sub in lay.params.layers:
                    sub.bias[...] = rng.uniform(-0.8, 0.8, sub.bias.shape)
                checkpoint_constraint(lay.params, 0.98)
        grid = compute_grid(model, (-8, 8, -8, 8), (400, 400), mode="exact")
        assert 0.98 <= grid.integral() <= 1.02


class TestCheckpoint:
    def test_round_trip_byte_identical(self, tmp_path):
        model = random_model(seed=23, n_blocks=2, hidden=8)
        # populate power-iteration caches so they serialize too
        for lay in model.layers:
            if isinstance(lay, ResidualBlock):
                checkpoint_constraint(lay.params, 0.98)
        meta = {"step": "17", "train.dataset": "checkerboard"}
        arrays = {"polyak.shadow": np.random.default_rng(24).standard_normal(10)}
        p1 = tmp_path / "a.txt"
        p2 = tmp_path / "b.txt"
        save_checkpoint(p1, model, meta=meta, arrays=arrays)
        loaded, meta2, arrays2 = load_checkpoint(p1)
        save_checkpoint(p2, loaded, meta=meta2, arrays=arrays2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_model_evaluates_identically(self, tmp_path):
        model = random_model(seed=25, n_blocks=3, hidden=8)
        path = tmp_path / "m.txt"
        save_checkpoint(path, model)
        loaded, _, _ = load_checkpoint(path)
        X = np.random.default_rng(26).standard_normal((20, 2))
        _, lp1, _ = log_density_batch(model, X)
        _, lp2, _ = log_density_batch(loaded, X)
        np.testing.assert_array_equal(lp1, lp2)

    def test_missing_file_is_config_error(self, tmp_path):
        from resflow.errors import ConfigError

        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "nope.txt")
