"""Tests for the encoder, the unrolled decoder and the parameter mapping."""

import numpy as np
import pytest

from dmri_metsc import gradcore as gc
from dmri_metsc.errors import ConfigurationError, DimensionError
from dmri_metsc.forward_models import noddi_signal
from dmri_metsc.models import ModelKind, NoddiParams
from dmri_metsc.network import (
    DecoderConfig,
    EncoderConfig,
    analytic_decoder,
    center_offset,
    core_signals,
    encode,
    encode_batch,
    forward,
    init_weights,
    leaves,
    orientation_steering,
    parameter_box,
    unrolled_decode,
    unrolled_decode_batch,
)
from dmri_metsc.solvers import IhtConfig, iht_solve_batch, spectral_norm_sq
from dmri_metsc.sparse_dict import extract_ivim_batch, extract_noddi_batch, principal_direction


def ivim_windows(dictionary, n=6, patch_size=3, window=3, seed=0):
    """Random windows whose core voxel carries a noisy sparse IVIM signal."""
    rng = np.random.default_rng(seed)
    C = dictionary.atoms.shape[0]
    codes = np.zeros((n, dictionary.n_atoms))
    for k in range(n):
        codes[k, rng.choice(dictionary.j, 2, replace=False)] = rng.uniform(0.2, 0.5, 2)
        codes[k, dictionary.j + rng.integers(dictionary.j)] = 0.15
    y = codes @ dictionary.atoms.T + rng.normal(0.0, 0.005, (n, C))
    windows = rng.uniform(0.0, 1.0, (n, window * window, patch_size * patch_size * C))
    offset = center_offset(patch_size, C)
    windows[:, (window * window) // 2, offset : offset + C] = y
    return windows, y


def plain_iht(y, atoms, step, lam, n_iters):
    """Fixed-step non-negative IHT written out directly."""
    x = np.zeros(atoms.shape[1])
    for _ in range(n_iters):
        u = x + step * atoms.T @ (y - atoms @ x)
        x = np.where(u >= lam, u, 0.0)
    return x


@pytest.mark.unit
class TestConfigs:
    """Tests for encoder/decoder settings validation."""

    def test_heads_must_divide_embedding(self):
        """Test embed_dim must split evenly across heads."""
        with pytest.raises(ConfigurationError, match="divisible"):
            EncoderConfig(embed_dim=10, heads=4)

    def test_odd_sizes(self):
        """Test patch and window sizes must be odd."""
        with pytest.raises(ConfigurationError):
            EncoderConfig(patch_size=2)
        with pytest.raises(ConfigurationError):
            EncoderConfig(window=2)

    def test_unknown_kinds(self):
        """Test unknown encoder and decoder kinds are rejected."""
        with pytest.raises(ConfigurationError):
            EncoderConfig(kind="rnn")
        with pytest.raises(ConfigurationError):
            DecoderConfig(kind="lstm")

    def test_decoder_bounds(self):
        """Test the decoder needs a layer and a positive threshold."""
        with pytest.raises(ConfigurationError):
            DecoderConfig(n_layers=0)
        with pytest.raises(ConfigurationError):
            DecoderConfig(lambda_init=0.0)

    def test_derived_sizes(self):
        """Test head_dim and n_patches."""
        cfg = EncoderConfig(embed_dim=32, heads=4, window=5)

        assert cfg.head_dim == 8
        assert cfg.n_patches == 25


@pytest.mark.unit
class TestInitWeights:
    """Tests for network initialization."""

    def test_analytic_decoder(self, ivim_dictionary):
        """Test W0 and S0 are the IHT operators and lam the relative threshold."""
        atoms = ivim_dictionary.atoms
        W, S, lam = analytic_decoder(atoms, 0.01)
        step = 0.99 / spectral_norm_sq(atoms)

        np.testing.assert_allclose(W, step * atoms.T)
        np.testing.assert_allclose(S, np.eye(atoms.shape[1]) - step * atoms.T @ atoms)
        assert lam == pytest.approx(IhtConfig.for_dictionary(atoms, lam_rel=0.01).lam)

    def test_dict_size_filled_in(self, ivim_dictionary):
        """Test dict_size 0 resolves to the dictionary's atom count."""
        weights = init_weights(ivim_dictionary, EncoderConfig(embed_dim=16, depth=1))

        assert weights.decoder.dict_size == ivim_dictionary.n_atoms
        assert weights.params["log_lam"].shape == (8,)

    def test_dict_size_mismatch(self, ivim_dictionary):
        """Test an explicit dict_size must match the dictionary."""
        with pytest.raises(ConfigurationError, match="dict_size"):
            init_weights(ivim_dictionary, decoder=DecoderConfig(dict_size=7))

    def test_bypass_needs_wide_embedding(self, noddi_dictionary):
        """Test bypass requires embed_dim >= C."""
        with pytest.raises(ConfigurationError, match="bypass"):
            init_weights(noddi_dictionary, EncoderConfig(embed_dim=16), bypass=True)

    def test_ivim_grids_learned_in_display_units(self, ivim_dictionary):
        """Test learnable diffusivity grids are stored in um^2/ms."""
        weights = init_weights(ivim_dictionary, EncoderConfig(embed_dim=16))

        np.testing.assert_allclose(weights.params["grid.D"], ivim_dictionary.d_grid * 1e3)

    def test_unshared_layers(self, ivim_dictionary):
        """Test unshared decoders get one W and S per layer."""
        weights = init_weights(
            ivim_dictionary, EncoderConfig(embed_dim=16), DecoderConfig(n_layers=3, weights_shared=False)
        )

        assert {"W.0", "W.2", "S.1"} <= set(weights.params)
        assert "W" not in weights.params

    def test_copy_is_deep(self, ivim_dictionary):
        """Test copies do not share arrays."""
        weights = init_weights(ivim_dictionary, EncoderConfig(embed_dim=16))
        clone = weights.copy()
        clone.params["log_lam"][0] = 0.0

        assert weights.params["log_lam"][0] != 0.0

    def test_to_dict(self, ivim_dictionary):
        """Test MetscWeights.to_dict() method."""
        weights = init_weights(ivim_dictionary, EncoderConfig(embed_dim=16, depth=1))
        data = weights.to_dict()

        assert data["kind"] == "ivim"
        assert data["n_signals"] == 10
        assert data["parameter_count"] == weights.parameter_count()
        assert data["dictionary_hash"] == ivim_dictionary.dictionary_hash()

    def test_same_seed_same_weights(self, ivim_dictionary):
        """Test initialization is seeded."""
        a = init_weights(ivim_dictionary, EncoderConfig(embed_dim=16, depth=1), seed=3)
        b = init_weights(ivim_dictionary, EncoderConfig(embed_dim=16, depth=1), seed=3)

        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])


@pytest.mark.unit
class TestBypass:
    """The bypassed network reduces to classic IHT followed by extraction."""

    @pytest.mark.parametrize("patch_size,window", [(1, 1), (3, 3)])
    def test_matches_classic_iht(self, ivim_dictionary, patch_size, window):
        """Test bypass outputs equal IHT with the relative threshold and n_layers iterations."""
        windows, y = ivim_windows(ivim_dictionary, patch_size=patch_size, window=window)
        encoder = EncoderConfig(patch_size=patch_size, window=window, embed_dim=16, heads=4)
        decoder = DecoderConfig(n_layers=12, lambda_init=0.01)
        weights = init_weights(ivim_dictionary, encoder, decoder, bypass=True)
        result = forward(weights, ivim_dictionary, windows)

        cfg = IhtConfig.for_dictionary(ivim_dictionary.atoms, lam_rel=0.01, max_iters=12, tol=0.0)
        codes, _, _ = iht_solve_batch(y, ivim_dictionary.atoms, cfg)
        maps = extract_ivim_batch(codes, ivim_dictionary)
        expected = np.stack([maps["f"], maps["D"], maps["Dstar"]], axis=1)

        np.testing.assert_allclose(result.code.data, codes, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(result.params.data, expected, rtol=1e-8, atol=1e-12)

    def test_noddi_matches_rotated_iht(self, noddi_dictionary, small_noddi_scheme):
        """Test NODDI bypass equals IHT on atoms rotated onto each voxel's fibre."""
        fibres = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.6, 0.0, 0.8]])
        y = np.stack(
            [noddi_signal(NoddiParams(v_ic=0.6, v_iso=0.1, kappa=8.0, mu=mu), small_noddi_scheme) for mu in fibres]
        )
        windows = y[:, None, :]
        encoder = EncoderConfig(patch_size=1, window=1, embed_dim=48, heads=4)
        decoder = DecoderConfig(n_layers=8, lambda_init=0.01)
        weights = init_weights(noddi_dictionary, encoder, decoder, bypass=True)
        result = forward(weights, noddi_dictionary, windows)

        canonical = noddi_dictionary.atoms
        step = 0.99 / spectral_norm_sq(canonical)
        lam = IhtConfig.for_dictionary(canonical, lam_rel=0.01).lam
        rotated = [noddi_dictionary.atoms_for(principal_direction(signal, small_noddi_scheme)) for signal in y]
        codes = np.stack([plain_iht(signal, atoms, step, lam, 8) for signal, atoms in zip(y, rotated)])
        maps = extract_noddi_batch(codes, noddi_dictionary)
        unsteered = plain_iht(y[0], canonical, step, lam, 8)

        np.testing.assert_allclose(result.code.data, codes, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(result.params.data[:, 0], maps["v_ic"], rtol=1e-8)
        np.testing.assert_allclose(result.params.data[:, 1], maps["v_iso"], rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(result.params.data[:, 2], maps["od"], rtol=1e-8)
        assert np.abs(result.code.data[0] - unsteered).max() > 1e-3

    def test_encoder_passes_core_through(self, ivim_dictionary):
        """Test the bypassed encoder returns the core voxel signal."""
        windows, y = ivim_windows(ivim_dictionary)
        weights = init_weights(ivim_dictionary, EncoderConfig(embed_dim=16), bypass=True)

        np.testing.assert_allclose(encode(windows[0], weights.encoder, weights), y[0])
        np.testing.assert_allclose(core_signals(windows, 3, 10), y)


@pytest.mark.unit
class TestEncoderGradients:
    """Finite-difference checks through a full attention block."""

    @pytest.mark.parametrize("name", ["E", "block0.U_qkv", "block0.W1"])
    def test_matches_central_differences(self, ivim_dictionary, numeric_gradient, name):
        """Test backprop through the encoder matches numerical gradients of its weights."""
        windows, _ = ivim_windows(ivim_dictionary, n=2, patch_size=1, window=3)
        cfg = EncoderConfig(patch_size=1, window=3, embed_dim=8, heads=2, depth=1, ffn_dim=12, dropout=0.0)
        weights = init_weights(ivim_dictionary, cfg, seed=3)
        readout = np.random.default_rng(5).normal(size=(2, ivim_dictionary.atoms.shape[0]))
        p = leaves(weights, requires_grad=True)
        grads = gc.backward(gc.sum_(encode_batch(windows, p, cfg) * readout))

        def value(v):
            q = leaves(weights)
            q[name] = gc.Tensor(v)
            return gc.sum_(encode_batch(windows, q, cfg) * readout).item()

        np.testing.assert_allclose(
            grads[p[name]], numeric_gradient(value, weights.params[name]), rtol=1e-5, atol=1e-8
        )


@pytest.mark.unit
class TestOrientationSteering:
    """Tests for the per-voxel NODDI decoder corrections."""

    def test_z_fibre_needs_small_correction(self, noddi_dictionary, small_noddi_scheme):
        """Test a fibre along the build axis needs far smaller corrections than a crossing one."""
        signals = np.stack(
            [
                noddi_signal(NoddiParams(v_ic=0.6, v_iso=0.1, kappa=8.0, mu=mu), small_noddi_scheme)
                for mu in ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0])
            ]
        )
        steering = orientation_steering(noddi_dictionary, signals)

        assert len(steering) == 2
        assert np.abs(steering.dW_T[0]).max() < 0.05 * np.abs(steering.dW_T[1]).max()
        assert np.abs(steering.dS_T[0]).max() < 0.05 * np.abs(steering.dS_T[1]).max()

    def test_corrected_operators_are_rotated_iht(self, noddi_dictionary, small_noddi_scheme):
        """Test W + dW and S + dS equal the IHT operators of the rotated atoms."""
        signal = noddi_signal(NoddiParams(v_ic=0.5, v_iso=0.0, kappa=4.0, mu=[0.0, 1.0, 0.0]), small_noddi_scheme)
        steering = orientation_steering(noddi_dictionary, signal)
        W, S, _ = analytic_decoder(noddi_dictionary.atoms, 0.01)
        rotated = noddi_dictionary.atoms_for(principal_direction(signal, small_noddi_scheme))
        step = 0.99 / spectral_norm_sq(noddi_dictionary.atoms)

        np.testing.assert_allclose(W.T + steering.dW_T[0], step * rotated, atol=1e-12)
        np.testing.assert_allclose(
            S.T + steering.dS_T[0], np.eye(rotated.shape[1]) - step * rotated.T @ rotated, atol=1e-12
        )

    def test_measurement_mismatch(self, noddi_dictionary):
        """Test core signals must match the dictionary's measurement count."""
        with pytest.raises(DimensionError, match="measurements"):
            orientation_steering(noddi_dictionary, np.ones((2, 5)))

    def test_batch_mismatch(self, noddi_dictionary, small_noddi_scheme):
        """Test the decoder refuses steering built for another batch size."""
        signal = noddi_signal(NoddiParams(v_ic=0.5, v_iso=0.1, kappa=4.0), small_noddi_scheme)
        steering = orientation_steering(noddi_dictionary, signal)
        weights = init_weights(noddi_dictionary, EncoderConfig(embed_dim=48, heads=4))
        u = gc.Tensor(np.tile(signal, (2, 1)))

        with pytest.raises(DimensionError, match="steering"):
            unrolled_decode_batch(u, leaves(weights), weights.decoder, steering)


@pytest.mark.unit
class TestForward:
    """Tests for full forward passes."""

    @pytest.mark.parametrize("kind", ["transformer", "conv"])
    def test_ivim_outputs_in_box(self, ivim_dictionary, kind):
        """Test outputs stay inside the valid parameter box."""
        windows, _ = ivim_windows(ivim_dictionary, n=5)
        weights = init_weights(ivim_dictionary, EncoderConfig(embed_dim=16, depth=2, kind=kind), seed=1)
        params = forward(weights, ivim_dictionary, windows).params.data
        box = parameter_box(ModelKind.IVIM)

        assert params.shape == (5, 3)
        assert np.all(np.isfinite(params))
        assert np.all((params >= box[0]) & (params <= box[1]))

    def test_noddi_outputs_in_box(self, noddi_dictionary, small_noddi_scheme):
        """Test NODDI fractions and OD stay in [0, 1]."""
        C = small_noddi_scheme.n_measurements
        rng = np.random.default_rng(4)
        windows = rng.uniform(0.1, 1.0, (3, 9, 9 * C))
        weights = init_weights(noddi_dictionary, EncoderConfig(embed_dim=48, heads=4, depth=1), seed=2)
        params = forward(weights, noddi_dictionary, windows).params.data

        assert params.shape == (3, 3)
        assert np.all((params >= 0.0) & (params <= 1.0))

    def test_mlp_decoder(self, ivim_dictionary):
        """Test the MLP head returns clipped parameters and no code."""
        windows, _ = ivim_windows(ivim_dictionary, n=4)
        weights = init_weights(ivim_dictionary, EncoderConfig(embed_dim=16), DecoderConfig(kind="mlp"))
        result = forward(weights, ivim_dictionary, windows)
        box = parameter_box(ModelKind.IVIM)

        assert result.code is None
        assert np.all((result.params.data >= box[0]) & (result.params.data <= box[1]))

    def test_dropout_only_in_training(self, ivim_dictionary):
        """Test evaluation passes are deterministic and training passes use dropout."""
        windows, _ = ivim_windows(ivim_dictionary, n=3)
        weights = init_weights(ivim_dictionary, EncoderConfig(embed_dim=16, depth=1, dropout=0.5), seed=5)
        a = forward(weights, ivim_dictionary, windows).encoded.data
        b = forward(weights, ivim_dictionary, windows).encoded.data
        c = forward(weights, ivim_dictionary, windows, training=True, rng=np.random.default_rng(0)).encoded.data

        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c)

    def test_positional_embedding(self, ivim_dictionary):
        """Test a positional embedding is added per patch."""
        windows, _ = ivim_windows(ivim_dictionary, n=2)
        weights = init_weights(ivim_dictionary, EncoderConfig(embed_dim=16, depth=1, positional=True))

        assert weights.params["pos"].shape == (9, 16)
        assert forward(weights, ivim_dictionary, windows).params.data.shape == (2, 3)

    def test_window_shape_checked(self, ivim_dictionary):
        """Test malformed window arrays raise DimensionError."""
        weights = init_weights(ivim_dictionary, EncoderConfig(embed_dim=16))

        with pytest.raises(DimensionError):
            encode_batch(np.zeros((9, 90)), leaves(weights), weights.encoder)
        with pytest.raises(DimensionError):
            encode_batch(np.zeros((1, 9, 80)), leaves(weights), weights.encoder)

    def test_single_decode_matches_batch(self, ivim_dictionary):
        """Test the per-voxel decoder equals the batched one."""
        weights = init_weights(ivim_dictionary, EncoderConfig(embed_dim=16))
        _, y = ivim_windows(ivim_dictionary, n=2)
        batch = unrolled_decode_batch(gc.Tensor(y), leaves(weights), weights.decoder).data

        np.testing.assert_allclose(unrolled_decode(y[1], weights.decoder, weights), batch[1])

    def test_gradients_reach_every_used_parameter(self, ivim_dictionary):
        """Test a loss on the outputs back-propagates into encoder, decoder and grids."""
        windows, _ = ivim_windows(ivim_dictionary, n=4)
        weights = init_weights(ivim_dictionary, EncoderConfig(embed_dim=16, depth=1, dropout=0.0), seed=6)
        p = leaves(weights, requires_grad=True)
        loss = gc.mean(forward(weights, ivim_dictionary, windows, p).params * 1.0)
        grads = gc.backward(loss, p.values())

        for name in ("E", "block0.U_qkv", "P", "fuse", "W", "S", "grid.D"):
            assert np.any(grads[p[name]] != 0), name
