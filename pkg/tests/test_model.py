"""Composite-model behavior: layout, dynamics fit, variants, bundles, forecasts."""

import numpy as np
import pytest

from rraedy import linalg
from rraedy.model import (
    InferenceBundle,
    ModelConfig,
    NormStats,
    RraedyModel,
    SeriesTensor,
    bottleneck_train,
    build_inference_bundle,
    common_basis,
    dmd_fit,
    dmd_rollout,
    encode_series,
    flatten,
    forecast,
    forecast_batch,
    forward_train,
    unflatten,
)
from rraedy.nn import MlpParams, mlp_forward
from oracles import assert_close_grads, fd_grad, invert_2x2, match_complex_multisets


def rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def identity_net(n):
    return MlpParams(weights=[np.eye(n)], biases=[np.zeros(n)], activations=["linear"])


def linear_series(w, a0, timesteps):
    out = np.empty((w.shape[0], timesteps))
    out[:, 0] = a0
    for t in range(1, timesteps):
        out[:, t] = w @ out[:, t - 1]
    return out


class TestFlatten:
    def test_forced_layout(self):
        data = np.empty((1, 2, 2))
        for t in range(2):
            for s in range(2):
                data[0, t, s] = 10 * (s + 1) + (t + 1)
        flat = flatten(SeriesTensor(data))
        assert flat.tolist() == [[11.0, 12.0, 21.0, 22.0]]

    def test_round_trip_bitwise(self):
        rng = np.random.default_rng(0)
        t = SeriesTensor(rng.standard_normal((3, 5, 4)))
        assert np.array_equal(unflatten(flatten(t), 5, 4).data, t.data)

    def test_single_sample_is_reshape(self):
        rng = np.random.default_rng(1)
        t = SeriesTensor(rng.standard_normal((3, 6, 1)))
        assert np.array_equal(flatten(t), t.data[:, :, 0])

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            SeriesTensor(np.full((1, 2, 1), np.nan))


class TestEncodeSeries:
    def test_identity_encoder(self):
        rng = np.random.default_rng(2)
        t = SeriesTensor(rng.standard_normal((3, 4, 2)))
        out = encode_series(identity_net(3), t)
        assert np.allclose(out.data, t.data)

    def test_sample_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        enc = MlpParams(weights=[rng.standard_normal((4, 3))], biases=[rng.standard_normal(4)],
                        activations=["linear"])
        t = SeriesTensor(rng.standard_normal((3, 4, 5)))
        perm = np.array([3, 0, 4, 1, 2])
        out = encode_series(enc, t)
        out_perm = encode_series(enc, SeriesTensor(t.data[:, :, perm]))
        assert np.allclose(out_perm.data, out.data[:, :, perm])

    def test_hand_set_single_layer(self):
        w = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 2.0]])
        b = np.array([0.0, 1.0, -1.0])
        enc = MlpParams(weights=[w], biases=[b], activations=["linear"])
        t = SeriesTensor(np.arange(6, dtype=float).reshape(2, 3, 1))
        out = encode_series(enc, t)
        for j in range(3):
            col = t.data[:, j, 0]
            assert np.allclose(out.data[:, j, 0], w @ col + b)


class TestBottleneck:
    def test_exact_rank(self):
        rng = np.random.default_rng(4)
        base = rng.standard_normal((5, 2)) @ rng.standard_normal((2, 12))
        y = unflatten(base, 4, 3)
        tsvd, alpha = bottleneck_train(y, 2)
        assert np.max(np.abs(tsvd.u_k @ flatten(unflatten(tsvd.alpha, 4, 3)) - base)) < 1e-10
        assert alpha.shape == (2, 4, 3)

    def test_lossless_at_full_width(self):
        rng = np.random.default_rng(5)
        y = SeriesTensor(rng.standard_normal((4, 6, 2)))
        tsvd, _ = bottleneck_train(y, 4)
        assert np.max(np.abs(tsvd.reconstruct() - flatten(y))) < 1e-10

    def test_residual_identity(self):
        rng = np.random.default_rng(6)
        y = SeriesTensor(rng.standard_normal((6, 5, 2)))
        sigma = linalg.svd(flatten(y)).sigma
        tsvd, _ = bottleneck_train(y, 3)
        res = np.linalg.norm(flatten(y) - tsvd.reconstruct())
        assert abs(res - np.sqrt(np.sum(sigma[3:] ** 2))) < 1e-8


class TestDmdFit:
    def test_recovers_rotation(self):
        r = rotation(0.3)
        alpha = linear_series(r, np.array([1.0, 0.5]), 50)[:, :, None]
        op = dmd_fit(alpha)
        assert np.max(np.abs(op.w - r)) < 1e-8
        assert op.fit_residual < 1e-10

    def test_constant_sequence_fixed_point(self):
        a1 = np.array([1.0, -2.0, 0.5])
        alpha = np.repeat(a1[:, None], 20, axis=1)[:, :, None]
        op = dmd_fit(alpha)
        assert np.max(np.abs(op.w @ a1 - a1)) < 1e-8

    def test_spectrum_of_known_generator(self):
        gen = np.array([[0.95, 0.3], [0.0, 0.8]])  # eigenvalues 0.95, 0.8
        alpha = linear_series(gen, np.array([1.0, 1.0]), 40)[:, :, None]
        op = dmd_fit(alpha)
        match_complex_multisets(op.spectrum.eigenvalues, [0.95, 0.8], 1e-6)

    def test_shift_pairs_respect_sample_boundaries(self):
        # Two samples driven by the same operator from incompatible starts:
        # only a boundary-respecting fit recovers it exactly.
        w0 = rotation(0.4) * 0.97
        s1 = linear_series(w0, np.array([1.0, 0.0]), 30)
        s2 = linear_series(w0, np.array([-40.0, 25.0]), 30)
        alpha = np.stack([s1, s2], axis=2)
        op = dmd_fit(alpha)
        assert np.max(np.abs(op.w - w0)) < 1e-8
        for s in range(2):
            res = op.w @ alpha[:, :-1, s] - alpha[:, 1:, s]
            assert np.max(np.abs(res)) < 1e-8

    def test_incompatible_systems_match_normal_equations_oracle(self):
        w1, w2 = rotation(0.2), rotation(-0.5) * 0.9
        s1 = linear_series(w1, np.array([1.0, 0.3]), 15)
        s2 = linear_series(w2, np.array([0.2, -1.0]), 15)
        alpha = np.stack([s1, s2], axis=2)
        op = dmd_fit(alpha)
        a_m = np.hstack([s1[:, :-1], s2[:, :-1]])
        a_p = np.hstack([s1[:, 1:], s2[:, 1:]])
        want = (a_p @ a_m.T) @ invert_2x2(a_m @ a_m.T)
        assert np.max(np.abs(op.w - want)) < 1e-8

    def test_degeneracy_flag(self):
        alpha = np.zeros((2, 10, 1))
        alpha[0, :, 0] = 1.0  # rank-1 coefficients
        op = dmd_fit(alpha)
        assert op.degenerate


class TestDmdRollout:
    def test_single_step(self):
        out = dmd_rollout(np.eye(2), np.array([3.0, 4.0]), 1)
        assert np.array_equal(out, [[3.0], [4.0]])

    def test_identity_operator(self):
        a0 = np.array([1.0, -1.0])
        out = dmd_rollout(np.eye(2), a0, 5)
        assert np.allclose(out, a0[:, None])

    def test_scalar_geometric(self):
        out = dmd_rollout(np.array([[0.5]]), np.array([1.0]), 4)
        assert np.allclose(out[0], [1.0, 0.5, 0.25, 0.125])


def reference_forward(model, x, k, mu=None):
    """Plain-numpy re-composition of the training pipeline (no tape)."""
    cfg = model.config
    y = mlp_forward(model.encoder, flatten(x))
    if mu is not None:
        y_mu = np.repeat(mlp_forward(model.param_encoder, mu), x.T, axis=1)
        y = np.vstack([y, y_mu])
    if cfg.variant == "aedy":
        alpha_flat = model.bottleneck_down @ y
        lift = model.bottleneck_up
        k = cfg.bottleneck_dim
    else:
        tsvd = linalg.truncated_svd(y, k)
        alpha_flat = tsvd.alpha
        lift = tsvd.u_k
    if cfg.variant == "arrae":
        latent = alpha_flat
    else:
        alpha = unflatten(alpha_flat, x.T, x.N).data
        op = dmd_fit(alpha, rcond=cfg.dmd_rcond)
        rolled = np.stack([dmd_rollout(op.w, alpha[:, 0, s], x.T)
                           for s in range(x.N)], axis=2)
        latent = flatten(SeriesTensor(rolled))
    x_tilde = mlp_forward(model.decoder, lift @ latent)
    return unflatten(x_tilde, x.T, x.N).data


class TestForwardTrain:
    def exact_setup(self):
        # Exactly linear rank-2 latent data, identity encoder/decoder.
        rng = np.random.default_rng(7)
        u0 = np.linalg.qr(rng.standard_normal((4, 2)))[0]
        coeffs = np.stack(
            [linear_series(rotation(0.25), rng.standard_normal(2), 30) for _ in range(3)],
            axis=2)
        x = SeriesTensor(np.einsum("lk,ktn->ltn", u0, coeffs))
        cfg = ModelConfig(feature_dim=4, latent_dim=4, variant="rraedy",
                          encoder_hidden=(), decoder_hidden=())
        model = RraedyModel(cfg, seed=0)
        model.encoder = identity_net(4)
        model.decoder = identity_net(4)
        return model, x

    def test_exact_linear_data_reconstructed(self):
        model, x = self.exact_setup()
        result = forward_train(model, x, k=2)
        assert np.max(np.abs(result.reconstruction - x.data)) < 1e-6
        assert result.loss.item() < 1e-14

    def test_rollout_starts_at_first_coefficient(self):
        model, x = self.exact_setup()
        _, alpha = bottleneck_train(encode_series(model.encoder, x), 2)
        result = forward_train(model, x, k=2)
        op = dmd_fit(alpha)
        # Column 1 of the latent rollout is the untouched first coefficient,
        # which the exact reconstruction confirms end to end.
        assert np.max(np.abs(result.w - op.w)) < 1e-10

    def test_matches_reference_composition(self):
        rng = np.random.default_rng(8)
        x = SeriesTensor(rng.standard_normal((3, 12, 4)))
        for variant in ("rraedy", "f_rraedy", "arrae"):
            cfg = ModelConfig(feature_dim=3, latent_dim=5, variant=variant,
                              encoder_hidden=(8,), decoder_hidden=(8,))
            model = RraedyModel(cfg, seed=3)
            got = forward_train(model, x, k=2).reconstruction
            assert np.max(np.abs(got - reference_forward(model, x, 2))) < 1e-10

    def test_aedy_matches_reference(self):
        rng = np.random.default_rng(9)
        x = SeriesTensor(rng.standard_normal((3, 10, 2)))
        cfg = ModelConfig(feature_dim=3, latent_dim=5, variant="aedy",
                          bottleneck_dim=2, encoder_hidden=(8,), decoder_hidden=(8,))
        model = RraedyModel(cfg, seed=4)
        got = forward_train(model, x, k=99).reconstruction
        assert np.max(np.abs(got - reference_forward(model, x, None))) < 1e-10

    def test_arrae_latent_is_bottleneck_output(self):
        rng = np.random.default_rng(10)
        x = SeriesTensor(rng.standard_normal((3, 8, 2)))
        cfg = ModelConfig(feature_dim=3, latent_dim=4, variant="arrae",
                          encoder_hidden=(6,), decoder_hidden=(6,))
        model = RraedyModel(cfg, seed=5)
        result = forward_train(model, x, k=2)
        assert result.w is None
        y = encode_series(model.encoder, x)
        tsvd, _ = bottleneck_train(y, 2)
        want = mlp_forward(model.decoder, tsvd.u_k @ tsvd.alpha)
        assert np.max(np.abs(flatten(SeriesTensor(result.reconstruction)) - want)) < 1e-10

    def test_random_data_shapes_and_finite_loss(self):
        rng = np.random.default_rng(11)
        x = SeriesTensor(rng.standard_normal((5, 9, 3)))
        cfg = ModelConfig(feature_dim=5, latent_dim=6, variant="rraedy",
                          encoder_hidden=(8,), decoder_hidden=(8,))
        model = RraedyModel(cfg, seed=6)
        result = forward_train(model, x, k=3)
        assert result.reconstruction.shape == (5, 9, 3)
        assert np.isfinite(result.loss.item())

    def test_end_to_end_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        x = SeriesTensor(rng.standard_normal((2, 7, 2)))
        cfg = ModelConfig(feature_dim=2, latent_dim=3, variant="rraedy",
                          encoder_hidden=(4,), decoder_hidden=(4,))
        model = RraedyModel(cfg, seed=7)

        result = forward_train(model, x, k=2)
        result.tape.backward(result.loss)
        grads = result.gradients()
        params = model.parameters()

        w0 = params[0]

        def loss_of(w):
            saved = w0.copy()
            w0[...] = w
            out = forward_train(model, x, k=2).loss.item()
            w0[...] = saved
            return out

        assert_close_grads(grads[0], fd_grad(loss_of, w0.copy()), rel=2e-4,
                           absolute=1e-9)


class TestBundle:
    def trained_exact_bundle(self):
        rng = np.random.default_rng(13)
        u0 = np.linalg.qr(rng.standard_normal((4, 2)))[0]
        w_true = rotation(0.3)
        coeffs = np.stack(
            [linear_series(w_true, rng.standard_normal(2), 40) for _ in range(3)],
            axis=2)
        x = SeriesTensor(np.einsum("lk,ktn->ltn", u0, coeffs))
        cfg = ModelConfig(feature_dim=4, latent_dim=4, variant="rraedy",
                          encoder_hidden=(), decoder_hidden=())
        model = RraedyModel(cfg, seed=0)
        model.encoder = identity_net(4)
        model.decoder = identity_net(4)
        tsvd, _ = bottleneck_train(encode_series(model.encoder, x), 2)
        bundle = build_inference_bundle(model, x, 2, [tsvd.u_k],
                                        NormStats.identity(4))
        return bundle, x, w_true

    def test_single_basis_spans_same_subspace(self):
        bundle, x, _ = self.trained_exact_bundle()
        tsvd, _ = bottleneck_train(x, 2)
        p_bundle = bundle.u_f @ bundle.u_f.T
        p_batch = tsvd.u_k @ tsvd.u_k.T
        assert np.max(np.abs(p_bundle - p_batch)) < 1e-8

    def test_duplicate_and_rotated_bases(self):
        rng = np.random.default_rng(14)
        u1 = np.linalg.qr(rng.standard_normal((6, 3)))[0]
        q = np.linalg.qr(rng.standard_normal((3, 3)))[0]
        for other in (u1, u1 @ q):
            u_f = common_basis([u1, other], 3)
            assert np.max(np.abs(u_f @ u_f.T - u1 @ u1.T)) < 1e-8

    def test_requires_a_basis(self):
        with pytest.raises(ValueError):
            common_basis([], 2)

    def test_forecast_single_step_is_autoencoding(self):
        bundle, x, _ = self.trained_exact_bundle()
        x0 = x.data[:, 0, 0]
        got = forecast(bundle, x0, 1)
        y = mlp_forward(bundle.encoder, x0)
        want = mlp_forward(bundle.decoder, bundle.u_f @ (bundle.u_f.T @ y))
        assert got.data.shape == (4, 1, 1)
        assert np.max(np.abs(got.data[:, 0, 0] - want)) < 1e-12

    def test_forecast_matches_ground_truth_linear_system(self):
        bundle, x, _ = self.trained_exact_bundle()
        got = forecast(bundle, x.data[:, 0, 1], x.T)
        scale = np.linalg.norm(x.data[:, :, 1])
        assert np.linalg.norm(got.data[:, :, 0] - x.data[:, :, 1]) < 1e-3 * scale

    def test_forecast_norm_spectral_bound(self):
        bundle, x, _ = self.trained_exact_bundle()
        steps = 5 * x.T
        got = forecast(bundle, x.data[:, 0, 0], steps)
        rho = bundle.w.spectrum.max_modulus()
        alpha0 = bundle.u_f.T @ mlp_forward(bundle.encoder, x.data[:, 0, 0])
        bound = np.linalg.norm(alpha0) * max(1.0, rho) ** steps
        norms = np.linalg.norm(got.data[:, :, 0], axis=0)
        assert np.max(norms) <= bound * (1.0 + 1e-6) + 1e-9

    def test_bundle_invariants_enforced(self):
        bundle, _, _ = self.trained_exact_bundle()
        with pytest.raises(ValueError):
            InferenceBundle(
                encoder=bundle.encoder, decoder=bundle.decoder,
                u_f=bundle.u_f * 2.0, w=bundle.w, k_star=bundle.k_star,
                normalization=bundle.normalization, variant=bundle.variant)


class TestParametric:
    def make_model(self, seed=15):
        cfg = ModelConfig(feature_dim=2, latent_dim=3, variant="rraedy",
                          encoder_hidden=(6,), decoder_hidden=(6,),
                          param_dim=2, param_hidden=(4,), param_latent=2)
        return RraedyModel(cfg, seed=seed)

    def test_zeroed_param_encoder_matches_concatenated_zeros(self):
        rng = np.random.default_rng(16)
        model = self.make_model()
        for w in model.param_encoder.weights:
            w[...] = 0.0
        x = SeriesTensor(rng.standard_normal((2, 8, 3)))
        mu = rng.standard_normal((2, 3))
        got = forward_train(model, x, k=2, mu=mu).reconstruction
        want = reference_forward(model, x, 2, mu=mu)
        assert np.max(np.abs(got - want)) < 1e-10
        y_mu = mlp_forward(model.param_encoder, mu)
        assert np.max(np.abs(y_mu)) == 0.0

    def test_distinct_parameters_distinct_coefficients(self):
        rng = np.random.default_rng(17)
        model = self.make_model(seed=18)
        x0 = rng.standard_normal(2)
        x = SeriesTensor(np.repeat(x0[:, None, None], 6, axis=1))
        data = np.concatenate([x.data, x.data], axis=2)
        mu = np.array([[0.5, -1.5], [0.2, 2.0]])
        result = forward_train(model, SeriesTensor(data), k=2, mu=mu)
        y = mlp_forward(model.encoder, flatten(SeriesTensor(data)))
        y_mu = np.repeat(mlp_forward(model.param_encoder, mu), 6, axis=1)
        cat = np.vstack([y, y_mu])
        tsvd = linalg.truncated_svd(cat, 2)
        a0_first = tsvd.alpha[:, 0]
        a0_second = tsvd.alpha[:, 6]
        assert np.linalg.norm(a0_first - a0_second) > 1e-8
        assert result.reconstruction.shape == (2, 6, 2)

    def test_shape_contract(self):
        rng = np.random.default_rng(19)
        model = self.make_model(seed=20)
        x = SeriesTensor(rng.standard_normal((2, 5, 4)))
        mu = rng.standard_normal((2, 4))
        out = forward_train(model, x, k=3, mu=mu).reconstruction
        assert out.shape == (2, 5, 4)
        with pytest.raises(ValueError):
            forward_train(model, x, k=3, mu=rng.standard_normal((3, 4)))

    def test_parametric_bundle_forecast(self):
        rng = np.random.default_rng(21)
        model = self.make_model(seed=22)
        x = SeriesTensor(rng.standard_normal((2, 6, 4)))
        mu = rng.standard_normal((2, 4))
        y = mlp_forward(model.encoder, flatten(x))
        y_mu = np.repeat(mlp_forward(model.param_encoder, mu), x.T, axis=1)
        u_k = linalg.truncated_svd(np.vstack([y, y_mu]), 3).u_k
        bundle = build_inference_bundle(model, x, 3, [u_k],
                                        NormStats.identity(2), mu=mu)
        assert bundle.parametric
        out = forecast(bundle, x.data[:, 0, 0], 6, mu=mu[:, 0])
        assert out.data.shape == (2, 6, 1)
        with pytest.raises(ValueError):
            forecast(bundle, x.data[:, 0, 0], 6)

    def test_batch_forecast_matches_single(self):
        rng = np.random.default_rng(23)
        model = self.make_model(seed=24)
        x = SeriesTensor(rng.standard_normal((2, 6, 3)))
        mu = rng.standard_normal((2, 3))
        y = mlp_forward(model.encoder, flatten(x))
        y_mu = np.repeat(mlp_forward(model.param_encoder, mu), x.T, axis=1)
        u_k = linalg.truncated_svd(np.vstack([y, y_mu]), 2).u_k
        bundle = build_inference_bundle(model, x, 2, [u_k],
                                        NormStats.identity(2), mu=mu)
        batch = forecast_batch(bundle, x.data[:, 0, :], 6, mu=mu)
        for s in range(3):
            single = forecast(bundle, x.data[:, 0, s], 6, mu=mu[:, s])
            assert np.max(np.abs(batch.data[:, :, s] - single.data[:, :, 0])) < 1e-12
