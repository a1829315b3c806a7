import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from informed_gpssm.data import TrajectoryDataset
from informed_gpssm.spectral import (
    AutoencoderConfig,
    SpectralFeatureSet,
    TrainingDivergedError,
    decode,
    direct_loss_and_grad,
    encode_quadrature,
    encoder_loss_and_grad,
    load_features,
    load_loss_trace,
    matern_spectrum_baseline,
    reconstruction_loss,
    save_features,
    save_loss_trace,
    spectral_density,
    train,
)


def central_diff(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def scalar_dataset(z, X):
    z = np.asarray(z, dtype=float)
    return TrajectoryDataset(z[:, None], np.asarray(X, dtype=float)[:, None], 1, 0)


class TestDecode:
    def test_zero_frequency(self):
        f = SpectralFeatureSet([[0.0, 0.0]], [1.0], [0.0])
        assert decode(f, [3.7, -1.2]) == 1.0

    def test_pi_frequency(self):
        f = SpectralFeatureSet([[np.pi]], [2.0], [0.0])
        assert decode(f, 1.0) == pytest.approx(-2.0, abs=1e-15)

    @pytest.mark.parametrize("z", [-2.0, 0.0, 0.3, 5.0])
    def test_destructive_interference(self, z):
        f = SpectralFeatureSet([[1.0], [1.0]], [1.0, 1.0], [0.0, np.pi])
        assert decode(f, z) == pytest.approx(0.0, abs=1e-14)

    def test_dimension_mismatch(self):
        f = SpectralFeatureSet([[1.0, 2.0]], [1.0], [0.0])
        with pytest.raises(ValueError):
            decode(f, [1.0])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_phase_periodicity(self, seed):
        rng = np.random.default_rng(seed)
        M, Dz = rng.integers(1, 5), rng.integers(1, 4)
        W, S, phi = rng.normal(size=(M, Dz)), rng.uniform(0, 2, M), rng.uniform(-np.pi, np.pi, M)
        z = rng.normal(size=Dz)
        a = decode(SpectralFeatureSet(W, S, phi), z)
        b = decode(SpectralFeatureSet(W, S, phi + 2 * np.pi), z)
        assert a == pytest.approx(b, abs=1e-12)

    def test_invariants(self):
        with pytest.raises(ValueError):
            SpectralFeatureSet([[1.0]], [-1.0], [0.0])
        with pytest.raises(ValueError):
            SpectralFeatureSet([[1.0], [2.0]], [1.0], [0.0])
        with pytest.raises(ValueError):
            SpectralFeatureSet([[np.nan]], [1.0], [0.0])


class TestReconstructionLoss:
    def test_exact_features(self):
        f = SpectralFeatureSet([[0.7]], [1.3], [0.2])
        z = np.linspace(-1, 1, 7)
        d = scalar_dataset(z, 1.3 * np.cos(0.7 * z + 0.2))
        assert reconstruction_loss(f, d, 0, 0.0) == pytest.approx(0.0, abs=1e-28)

    def test_zero_amplitudes(self):
        d = scalar_dataset([0.0, 1.0], [1.0, 1.0])
        f = SpectralFeatureSet([[2.0]], [0.0], [0.0])
        assert reconstruction_loss(f, d, 0, 0.0) == pytest.approx(1.0)
        assert reconstruction_loss(f, d, 0, 0.1) == pytest.approx(1.4)


class TestQuadrature:
    def test_zero_signal(self):
        d = scalar_dataset([0.1, 0.5, 0.9], [0.0, 0.0, 0.0])
        S, phi = encode_quadrature(d, 0, [[1.0], [2.0]], [0.3, 0.3, 0.3])
        np.testing.assert_array_equal(S, 0.0)
        np.testing.assert_array_equal(phi, 0.0)

    def test_single_term(self):
        d = TrajectoryDataset(np.zeros((1, 2)), [[1.0]], 1, 1)
        S, phi = encode_quadrature(d, 0, [[0.4, -2.0], [3.0, 1.0]], [1.0])
        np.testing.assert_allclose(S, 1.0)
        np.testing.assert_allclose(phi, 0.0)

    @pytest.mark.parametrize("wbar", [1.0, 2.0])
    def test_dense_cosine(self, wbar):
        n = 4000
        dz = 2 * np.pi / wbar / n
        z = (np.arange(n) + 0.5) * dz
        d = scalar_dataset(z, np.cos(wbar * z))
        S, phi = encode_quadrature(d, 0, [[wbar]], np.full(n, dz / np.pi))
        # Independent oracle: the Fourier integral over one period by adaptive quadrature.
        re = integrate.quad(lambda s: np.cos(wbar * s) ** 2, 0, 2 * np.pi / wbar)[0] / np.pi
        im = -integrate.quad(lambda s: np.cos(wbar * s) * np.sin(wbar * s), 0, 2 * np.pi / wbar)[0] / np.pi
        assert S[0] == pytest.approx(abs(re + 1j * im), abs=1e-2)
        if wbar == 1.0:
            assert S[0] == pytest.approx(1.0, abs=1e-2)

    def test_length_mismatch(self):
        d = scalar_dataset([0.0, 1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            encode_quadrature(d, 0, [[1.0]], [1.0])


class TestGradients:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_direct(self, seed):
        rng = np.random.default_rng(seed)
        M, Dz, T = rng.integers(1, 5), rng.integers(1, 4), rng.integers(2, 11)
        Z, X = rng.normal(size=(T, Dz)), rng.normal(size=T)
        S, phi, W = rng.uniform(0.1, 1.5, M), rng.uniform(-3, 3, M), rng.normal(size=(M, Dz))
        _, (gS, gphi, gW) = direct_loss_and_grad(S, phi, W, Z, X, 0.1)
        np.testing.assert_allclose(gS, central_diff(lambda s: direct_loss_and_grad(s, phi, W, Z, X, 0.1)[0], S), rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(gphi, central_diff(lambda p: direct_loss_and_grad(S, p, W, Z, X, 0.1)[0], phi), rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(gW, central_diff(lambda w: direct_loss_and_grad(S, phi, w, Z, X, 0.1)[0], W), rtol=1e-5, atol=1e-8)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_encoder(self, seed):
        rng = np.random.default_rng(seed)
        M, Dz, T = rng.integers(1, 5), rng.integers(1, 4), rng.integers(2, 11)
        Z, X = rng.normal(size=(T, Dz)), rng.normal(size=T)
        W, rho = rng.normal(size=(M, Dz)), rng.normal(size=T)
        _, (gW, grho) = encoder_loss_and_grad(W, rho, Z, X, 0.1)
        np.testing.assert_allclose(gW, central_diff(lambda w: encoder_loss_and_grad(w, rho, Z, X, 0.1)[0], W), rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(grho, central_diff(lambda r: encoder_loss_and_grad(W, r, Z, X, 0.1)[0], rho), rtol=1e-5, atol=1e-8)


class TestTrain:
    def test_single_epoch(self):
        d = scalar_dataset(np.linspace(-1, 1, 10), np.linspace(0, 1, 10))
        f, trace = train(d, 0, AutoencoderConfig(M=3, epochs=1))
        assert trace.shape == (1,)
        assert f.M == 3

    def test_pure_cosine_is_recovered(self):
        z = np.linspace(-3, 3, 40)
        d = scalar_dataset(z, 0.8 * np.cos(1.2 * z + 0.5))
        f, trace = train(d, 0, AutoencoderConfig(M=1, epochs=4000, learning_rate=0.05, lambda_w=0.0, freq_init=1.5, seed=2))
        assert trace[-1] < 1e-4
        assert reconstruction_loss(f, d, 0, 0.0) < 1e-4

    @pytest.mark.parametrize("mode", ["direct", "encoder"])
    def test_loss_decreases_and_finite(self, mode):
        z = np.linspace(-2, 2, 25)
        d = scalar_dataset(z, np.tanh(z) + 0.3)
        f, trace = train(d, 0, AutoencoderConfig(M=6, epochs=300, learning_rate=0.02, mode=mode))
        assert np.all(np.isfinite(trace))
        assert trace[-1] <= trace[0]
        assert np.all(f.amplitudes >= 0)
        assert np.all(f.phases >= -np.pi) and np.all(f.phases < np.pi)

    def test_encoder_amplitudes_nonnegative_each_step(self):
        z = np.linspace(-2, 2, 15)
        d = scalar_dataset(z, np.sin(z) - 0.2)
        for epochs in range(1, 6):
            f, _ = train(d, 0, AutoencoderConfig(M=4, epochs=epochs, mode="encoder"))
            assert np.all(f.amplitudes >= 0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch(self):
        d = scalar_dataset([0.0, 1.0], [1e200, -1e200])
        with pytest.raises(TrainingDivergedError) as err:
            train(d, 0, AutoencoderConfig(M=2, epochs=5))
        assert err.value.epoch == 0

    @pytest.mark.parametrize(
        "kwargs", [{"M": 0}, {"lambda_w": -1.0}, {"epochs": 0}, {"learning_rate": 0.0}, {"mode": "other"}]
    )
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            AutoencoderConfig(**kwargs)


class TestSpectralDensity:
    def test_matern_half_shape_and_symmetry(self):
        w = np.linspace(-5, 5, 11)[:, None]
        ell = 0.7
        S = spectral_density(w, "matern", ell, 1.0, 0.5)
        ratio = S * (1 / ell**2 + w[:, 0] ** 2)
        np.testing.assert_allclose(ratio, ratio[0])
        np.testing.assert_allclose(S, S[::-1])

    @pytest.mark.parametrize("kind,nu", [("matern", 0.5), ("matern", 1.5), ("matern", 2.5), ("se", None)])
    def test_integrates_to_variance(self, kind, nu):
        ell, var = 1.3, 2.0
        dens = lambda w: spectral_density([[w]], kind, ell, var, nu or 1.5)[0]
        total = integrate.quad(dens, -np.inf, np.inf, limit=400)[0] / (2 * np.pi)
        assert total == pytest.approx(var, rel=1e-6)

    def test_two_dimensional_matern_normalization(self):
        dens = lambda r: spectral_density([[r, 0.0]], "matern", 0.8, 1.0, 1.5)[0] * 2 * np.pi * r
        total = integrate.quad(dens, 0, np.inf, limit=400)[0] / (2 * np.pi) ** 2
        assert total == pytest.approx(1.0, rel=1e-6)

    def test_bad_lengthscale(self):
        with pytest.raises(ValueError):
            spectral_density([[0.0]], "matern", 0.0)
        d = scalar_dataset([0.0, 1.0], [0.0, 1.0])
        with pytest.raises(ValueError):
            matern_spectrum_baseline(d, 0, AutoencoderConfig(M=2, epochs=1), lengthscale=-1.0)

    def test_baseline_structure(self):
        z = np.linspace(-3, 3, 20)
        d = scalar_dataset(z, np.sin(z))
        cfg = AutoencoderConfig(M=5, epochs=50, seed=4)
        f = matern_spectrum_baseline(d, 0, cfg, lengthscale=1.0, nu=1.5)
        np.testing.assert_allclose(f.amplitudes, spectral_density(f.frequencies, "matern", 1.0, np.var(d.targets), 1.5))
        again = matern_spectrum_baseline(d, 0, cfg, lengthscale=1.0, nu=1.5)
        np.testing.assert_array_equal(f.phases, again.phases)


def test_feature_and_trace_files_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    f = SpectralFeatureSet(rng.normal(size=(4, 3)), rng.uniform(0, 1, 4), rng.uniform(-np.pi, np.pi, 4))
    save_features(f, tmp_path / "f.csv")
    g = load_features(tmp_path / "f.csv")
    assert g.frequencies.tobytes() == f.frequencies.tobytes()
    assert g.amplitudes.tobytes() == f.amplitudes.tobytes()
    assert g.phases.tobytes() == f.phases.tobytes()
    trace = rng.normal(size=7)
    save_loss_trace(trace, tmp_path / "trace.csv")
    assert load_loss_trace(tmp_path / "trace.csv").tobytes() == trace.tobytes()
