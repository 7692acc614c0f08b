import numpy as np
import pytest
import scipy.integrate

from imavae.autodiff import finite_diff_jacobian
from imavae.errors import ConfigurationError, DomainError, InconsistencyError, SingularityError
from imavae.ima import cima_local, cima_local_batch
from imavae.nets import MlpParams
from imavae.mixing import (ComposedMixing, Dataset, LinearMixing, MlpMixing, Moebius, SourceDistribution,
                           dataset_from_text, dataset_to_text, invert_mixing, make_dataset,
                           make_mlp_mixing, make_moebius, make_volume_preserving_linear,
                           mix_forward, pushforward_log_density, pushforward_log_density_batch,
                           sample_sources)

GAUSS3 = SourceDistribution("standard_gaussian", 3)


def test_identity_linear_mixing():
    x, J = mix_forward(LinearMixing(np.eye(3)), np.array([0.1, 2.0, -1.0]), want_jacobian=True)
    assert x.tolist() == [0.1, 2.0, -1.0]
    assert np.array_equal(J, np.eye(3))


def test_moebius_unit_sphere_inversion():
    m = Moebius(t=np.zeros(3), b=np.zeros(3), A=np.eye(3))
    x, J = mix_forward(m, np.array([1.0, 0.0, 0.0]), want_jacobian=True)
    np.testing.assert_allclose(x, [1.0, 0.0, 0.0])
    # radial direction flips, tangential ones are preserved
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(J)), [-1.0, 1.0, 1.0], atol=1e-14)
    np.testing.assert_allclose(J, np.diag([-1.0, 1.0, 1.0]), atol=1e-14)


def test_moebius_pole_is_domain_error():
    m = Moebius(t=np.zeros(2), b=np.array([2.0, 2.0]), A=np.eye(2))
    with pytest.raises(DomainError):
        mix_forward(m, np.array([2.0, 2.0]))


def test_moebius_validation():
    with pytest.raises(ConfigurationError):
        Moebius(t=np.zeros(2), b=np.ones(2), A=np.array([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(ConfigurationError):
        Moebius(t=np.zeros(2), b=np.ones(2), A=np.eye(2), epsilon=3.0)


def test_moebius_jacobian_matches_finite_differences(rng):
    for seed in range(5):
        m = make_moebius(3, seed=seed)
        for z in rng.uniform(size=(50, 3)):
            J = mix_forward(m, z, want_jacobian=True)[1]
            fd = finite_diff_jacobian(lambda v: mix_forward(m, v)[0], z)
            assert np.max(np.abs(J - fd)) / np.max(np.abs(fd)) < 1e-5


def test_moebius_is_conformal(rng):
    m = make_moebius(3, seed=3)
    J = m.jacobian(rng.uniform(size=(200, 3)))
    JtJ = np.einsum("bki,bkj->bij", J, J)
    scale = JtJ[:, 0, 0][:, None, None]
    np.testing.assert_allclose(JtJ / scale, np.broadcast_to(np.eye(3), JtJ.shape), atol=1e-8)
    assert np.max(np.abs(cima_local_batch(J))) < 1e-10


def test_moebius_pole_outside_support():
    for seed in range(20):
        m = make_moebius(3, seed=seed)
        outside = np.maximum(np.maximum(-m.b, m.b - 1.0), 0.0)
        assert np.linalg.norm(outside) >= 0.5 - 1e-9


def test_moebius_closed_form_inverse(rng):
    m = make_moebius(3, seed=8)
    z = rng.uniform(size=(100, 3))
    np.testing.assert_allclose(m.inverse(m.forward(z)), z, atol=1e-12)


def test_newton_round_trip(rng):
    z = rng.uniform(size=(200, 3))
    m = make_moebius(3, seed=1)
    z_hat, ok = invert_mixing(m, m.forward(z), z0=np.full_like(z, 0.5))
    assert ok.all() and np.max(np.abs(z_hat - z)) < 1e-6
    mlp = make_mlp_mixing(3, 3, seed=2)
    z = rng.standard_normal((200, 3))
    z_hat, ok = invert_mixing(mlp, mlp.forward(z))
    assert ok.all() and np.max(np.abs(z_hat - z)) < 1e-6


def test_mlp_mixing_gain_keeps_contrast(rng):
    a = make_mlp_mixing(2, 2, "upper_triangular", "sigmoid", seed=4)
    b = make_mlp_mixing(2, 2, "upper_triangular", "sigmoid", seed=4, gain=10.0)
    z = rng.standard_normal((50, 2))
    np.testing.assert_allclose(cima_local_batch(a.jacobian(z)), cima_local_batch(b.jacobian(z)),
                               atol=1e-10)


def test_composed_mixing(rng):
    M = make_volume_preserving_linear(3, 2.0, seed=0)
    inner = make_moebius(3, seed=0)
    c = ComposedMixing(inner, M)
    z = rng.uniform(size=(20, 3))
    np.testing.assert_allclose(c.forward(z), inner.forward(z) @ M.T)
    np.testing.assert_allclose(c.inverse(c.forward(z)), z, atol=1e-10)
    with pytest.raises(ConfigurationError):
        ComposedMixing(inner, np.zeros((3, 3)))


def test_sample_sources():
    z = sample_sources(GAUSS3, 100000, seed=0)
    assert np.all(np.abs(z.mean(axis=0)) < 0.02)
    assert np.all(np.abs(z.var(axis=0) - 1.0) < 0.03)
    u = sample_sources(SourceDistribution("uniform", 3), 100000, seed=0)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert np.array_equal(sample_sources(GAUSS3, 10, seed=5), sample_sources(GAUSS3, 10, seed=5))
    with pytest.raises(ValueError):
        sample_sources(GAUSS3, 0)


def test_pushforward_examples():
    ident = LinearMixing(np.eye(3))
    val = pushforward_log_density(ident, GAUSS3, np.zeros(3), np.zeros(3))
    assert val == pytest.approx(-1.5 * np.log(2 * np.pi), abs=1e-12)
    double = LinearMixing(2.0 * np.eye(2))
    g2 = SourceDistribution("standard_gaussian", 2)
    # x = 2z, so p(x) = N(x; 0, 4I) and at 0: -log(2 pi) - log 4
    assert pushforward_log_density(double, g2, np.zeros(2), np.zeros(2)) == pytest.approx(
        -3.224171427529236, abs=1e-12)


def test_pushforward_unit_determinant(rng):
    M = make_volume_preserving_linear(3, 1.5, seed=4)
    spec = ComposedMixing(LinearMixing(np.eye(3)), M)
    z = rng.standard_normal(3)
    assert pushforward_log_density(spec, GAUSS3, spec.forward(z[None])[0], z) == pytest.approx(
        GAUSS3.log_density(z)[0], abs=1e-10)


def test_pushforward_errors():
    ident = LinearMixing(np.eye(2))
    g2 = SourceDistribution("standard_gaussian", 2)
    with pytest.raises(InconsistencyError):
        pushforward_log_density(ident, g2, np.zeros(2), np.ones(2))
    # every hidden ReLU is inactive at z = 0, so the Jacobian vanishes there
    dead = MlpMixing(MlpParams([2, 2, 2], [np.eye(2), np.eye(2)], [np.full(2, -10.0), np.zeros(2)],
                               activation="relu"))
    with pytest.raises(SingularityError):
        pushforward_log_density(dead, g2, np.zeros(2), np.zeros(2))
    with pytest.raises(ConfigurationError):
        LinearMixing(np.diag([1e-160, 1e-160]))


def test_pushforward_integrates_to_one():
    W = np.array([[1.0, 0.5], [-0.3, 0.8]])
    spec = LinearMixing(W)
    g2 = SourceDistribution("standard_gaussian", 2)

    def density(x1, x0):
        x = np.array([[x0, x1]])
        z = spec.inverse(x)
        return float(np.exp(pushforward_log_density_batch(spec, g2, x, z)[0]))

    total, _ = scipy.integrate.dblquad(density, -8, 8, -8, 8, epsabs=1e-6)
    assert abs(total - 1.0) < 1e-2


def test_volume_preserving_linear():
    M0 = make_volume_preserving_linear(3, 0.0, seed=1)
    np.testing.assert_allclose(M0.T @ M0, np.eye(3), atol=1e-10)
    assert abs(cima_local(M0)) < 1e-10
    for seed in range(20):
        for sev in (0.5, 2.0, 6.0):
            assert abs(abs(np.linalg.det(make_volume_preserving_linear(3, sev, seed))) - 1) < 1e-10
    with pytest.raises(ConfigurationError):
        make_volume_preserving_linear(1, 1.0)


def test_volume_preserving_contrast_range():
    sev = np.linspace(0.0, 8.0, 17)
    values = np.array([[cima_local(make_volume_preserving_linear(3, s, seed)) for s in sev]
                       for seed in range(100)])
    mean = values.mean(axis=0)
    assert np.all(np.diff(mean) > 0)
    assert values.min() <= 0.3 and values.max() >= 6.8


def test_dataset_split_and_text_round_trip():
    spec = make_mlp_mixing(3, 3, seed=0)
    data = make_dataset(spec, GAUSS3, (30, 10, 5), seed=3)
    np.testing.assert_array_equal(data.observations, spec.forward(data.sources))
    assert len(data.train[0]) == 30 and len(data.val[0]) == 10 and len(data.test[0]) == 5
    back = dataset_from_text(dataset_to_text(data))
    assert np.array_equal(back.sources, data.sources)
    assert np.array_equal(back.observations, data.observations)
    assert back.split == data.split and back.seed == 3 and back.mixing_kind == "mlp"
    with pytest.raises(ConfigurationError):
        Dataset(data.sources, data.observations, (1, 1, 1))
