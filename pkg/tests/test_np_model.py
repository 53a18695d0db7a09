import numpy as np
import pytest

from gridnp.neural import adam_step
from gridnp.np_model import (
    NPConfig, NPModel, TrainingError, decode, elbo_terms, encode_deterministic, encode_latent,
    load_checkpoint, predict, sample_context, sample_z, save_checkpoint, train,
)
from gridnp.scenario import EpisodeBatch, make_episodes


def small_config(**kw):
    base = dict(x_dim=6, y_dim=6, r_dim=8, z_dim=8, hidden=16, n_context=10, n_target=20,
                batch=2, epochs=2, batches_per_epoch=5, lr=1e-3)
    base.update(kw)
    return NPConfig(**base)


@pytest.fixture
def model():
    return NPModel(small_config(), seed=0)


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(n_context=30, n_target=20)
    with pytest.raises(ValueError):
        small_config(hidden=0)


def test_encoder_permutation_invariant(model, rng):
    xi, v = rng.normal(size=(12, 6)), rng.normal(size=(12, 6))
    perm = rng.permutation(12)
    np.testing.assert_allclose(encode_deterministic(model, xi, v),
                               encode_deterministic(model, xi[perm], v[perm]), atol=1e-12)
    a, b = encode_latent(model, xi, v), encode_latent(model, xi[perm], v[perm])
    np.testing.assert_allclose(a.mu, b.mu, atol=1e-12)
    np.testing.assert_allclose(a.sigma, b.sigma, atol=1e-12)


def test_duplicated_context_gives_same_mean(model, rng):
    xi, v = rng.normal(size=(7, 6)), rng.normal(size=(7, 6))
    np.testing.assert_allclose(encode_deterministic(model, xi, v),
                               encode_deterministic(model, np.vstack([xi, xi]), np.vstack([v, v])),
                               atol=1e-12)


def test_single_pair_and_empty_context(model, rng):
    r = encode_deterministic(model, rng.normal(size=6), rng.normal(size=6))
    assert r.shape == (8,) and np.all(np.isfinite(r))
    with pytest.raises(ValueError):
        encode_deterministic(model, np.zeros((0, 6)), np.zeros((0, 6)))
    with pytest.raises(ValueError):
        encode_deterministic(model, np.zeros((3, 6)), np.zeros((2, 6)))


def test_sigma_floor(model, rng):
    lat = encode_latent(model, 50 * rng.normal(size=(5, 6)), 50 * rng.normal(size=(5, 6)))
    assert np.all(lat.sigma >= 1e-3)
    _, s = decode(model, 100 * rng.normal(size=(9, 6)), np.zeros(8), np.zeros(8))
    assert np.all(s >= 1e-3)


def test_sample_z_statistics():
    from gridnp.np_model import LatentState
    lat = LatentState(np.array([0.5, -1.0]), np.array([0.2, 2.0]))
    z = sample_z(LatentState(np.tile(lat.mu, (50_000, 1)), np.tile(lat.sigma, (50_000, 1))),
                 np.random.default_rng(0))
    np.testing.assert_allclose(z.mean(axis=0), lat.mu, atol=0.03)
    np.testing.assert_allclose(z.std(axis=0), lat.sigma, rtol=0.02)


def test_decode_shapes_and_input_check(model, rng):
    mu, s = decode(model, rng.normal(size=(11, 6)), np.zeros(8), np.zeros(8))
    assert mu.shape == s.shape == (11, 6)
    with pytest.raises(ValueError):
        decode(model, rng.normal(size=(11, 5)), np.zeros(8), np.zeros(8))


def _batch(rng, b=2, nc=10, nt=20):
    xt, vt = rng.normal(size=(b, nt, 6)), rng.normal(size=(b, nt, 6))
    return EpisodeBatch(np.arange(b), xt[:, :nc], vt[:, :nc], xt, vt)


def test_kl_zero_when_context_equals_targets(model, rng):
    batch = _batch(rng, nc=20)
    assert np.all(elbo_terms(model, batch, rng).kl == 0.0)


def test_kl_positive_with_smaller_context(model, rng):
    terms = elbo_terms(model, _batch(rng), rng)
    assert np.all(terms.kl > 0)
    assert np.isfinite(terms.loss.item())


def test_elbo_gradient_matches_finite_differences(rng):
    m = NPModel(small_config(hidden=6, r_dim=3, z_dim=3, layers=2), seed=1)
    batch = _batch(rng, nc=4, nt=7)
    eps = rng.standard_normal((2, 3))
    m.params.zero_grad()
    elbo_terms(m, batch, eps=eps).loss.backward()
    analytic = m.params.flat_grad()
    flat = m.params.flat
    h = 1e-6
    num = np.zeros_like(flat)
    for i in range(len(flat)):
        old = flat[i]
        flat[i] = old + h
        up = elbo_terms(m, batch, eps=eps).loss.item()
        flat[i] = old - h
        down = elbo_terms(m, batch, eps=eps).loss.item()
        flat[i] = old
        num[i] = (up - down) / (2 * h)
    err = np.abs(analytic - num) / np.maximum(1.0, np.abs(num))
    assert err.max() < 1e-4


def test_sine_family_loss_decreases():
    rng = np.random.default_rng(0)
    cfg = NPConfig(1, 1, r_dim=16, z_dim=16, hidden=32, n_context=10, n_target=20, lr=1e-3)
    m = NPModel(cfg, seed=0)
    losses = []
    for _ in range(500):
        amp = rng.uniform(0.5, 2.0, size=(4, 1, 1))
        phase = rng.uniform(0, np.pi, size=(4, 1, 1))
        x = rng.uniform(-3, 3, size=(4, 20, 1))
        y = amp * np.sin(x + phase)
        terms = elbo_terms(m, EpisodeBatch(np.zeros(4), x[:, :10], y[:, :10], x, y), rng)
        m.params.zero_grad()
        terms.loss.backward()
        adam_step([m.params.flat], [m.params.flat_grad()], m.optimizer)
        losses.append(terms.loss.item())
    avg = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert avg[-1] < avg[0] - 5


def test_zero_epochs_leaves_model_unchanged(small_ds):
    m = NPModel(small_config(epochs=0), seed=0)
    before = m.params.flat.copy()
    _, hist = train(m, small_ds, seed=0)
    assert np.array_equal(before, m.params.flat)
    assert hist.loss == [] and sorted(m.scalers) == sorted(small_ds.topologies)


def test_training_deterministic(small_ds):
    a, ha = train(NPModel(small_config(), seed=3), small_ds, seed=3, topology_ids=[1, 7])
    b, hb = train(NPModel(small_config(), seed=3), small_ds, seed=3, topology_ids=[1, 7])
    assert np.array_equal(a.params.flat, b.params.flat)
    assert ha.loss == hb.loss and len(ha.loss) == 2
    assert ha.min_kl >= 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_rejects_nan(small_ds):
    m = NPModel(small_config(), seed=0)
    m.params.flat[:] = np.nan
    with pytest.raises(TrainingError):
        train(m, small_ds, seed=0)


def test_callback_sees_every_epoch(small_ds):
    seen = []
    train(NPModel(small_config(), seed=0), small_ds, seed=0, topology_ids=[2],
          callback=lambda e, h: seen.append((e, len(h.loss))))
    assert seen == [(0, 1), (1, 2)]


def test_checkpoint_roundtrip(small_ds, tmp_path):
    m, hist = train(NPModel(small_config(), seed=4), small_ds, seed=4, topology_ids=[1, 3])
    path = save_checkpoint(m, tmp_path / "m.json", hist)
    again = load_checkpoint(path)
    assert np.array_equal(again.params.flat, m.params.flat)
    assert again.config == m.config and again.optimizer.step == m.optimizer.step
    for k in range(len(m.optimizer.m)):
        assert np.array_equal(again.optimizer.m[k], m.optimizer.m[k])
    td = small_ds.topologies[3]
    xc, vc = sample_context(small_ds, 3, 10, 0)
    a = predict(m, 3, xc, vc, td.xi_test)
    b = predict(again, 3, xc, vc, td.xi_test)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.json")


def test_predict_modes(small_ds):
    m, _ = train(NPModel(small_config(epochs=1), seed=0), small_ds, seed=0, topology_ids=[5])
    td = small_ds.topologies[5]
    xc, vc = sample_context(small_ds, 5, 10, 1)
    mu, sigma = predict(m, 5, xc, vc, td.xi_test)
    assert mu.shape == sigma.shape == td.v_test.shape
    assert np.all(sigma > 0)
    with pytest.raises(KeyError):
        predict(m, 6, xc, vc, td.xi_test)
    with pytest.raises(ValueError):
        predict(m, 5, xc, vc, td.xi_test, mode="median")
    with pytest.raises(ValueError):
        predict(m, 5, xc, vc, td.xi_test, mode="mc:0")


def test_single_draw_mixture_is_one_decode(small_ds):
    m, _ = train(NPModel(small_config(epochs=1), seed=0), small_ds, seed=0, topology_ids=[2])
    xc, vc = sample_context(small_ds, 2, 10, 1)
    xt = small_ds.topologies[2].xi_test[:5]
    mu, sigma = predict(m, 2, xc, vc, xt, mode="mc:1", rng=np.random.default_rng(8))
    sc = m.scalers[2]
    lat = encode_latent(m, sc.transform_xi(xc), sc.transform_v(vc))
    z = sample_z(lat, np.random.default_rng(8))
    r = encode_deterministic(m, sc.transform_xi(xc), sc.transform_v(vc))
    mu1, s1 = decode(m, sc.transform_xi(xt), r, z)
    np.testing.assert_allclose(mu, sc.inverse_v(mu1), atol=1e-12)
    np.testing.assert_allclose(sigma, s1 * sc.v_std, atol=1e-9)


def test_episode_stream_feeds_model(small_ds):
    m = NPModel(small_config(), seed=0)
    batch = next(make_episodes(small_ds, 10, 20, 2, seed=0))
    assert np.isfinite(elbo_terms(m, batch, np.random.default_rng(0)).loss.item())
