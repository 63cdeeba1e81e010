import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pimcancel import metrics, models, sim
from pimcancel.metrics import MetricError


def rand_complex(rng, shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


# --- APE ---------------------------------------------------------------------------

def test_ape_identity():
    p = np.random.default_rng(0).uniform(0.1, 2, size=(3, 20))
    r = metrics.ape(p, p)
    assert r.linear == 0.0 and r.db == 0.0 and r.exclusions == 0


def test_ape_hand_case():
    r = metrics.ape([[2.0, 1.0]], [[1.0, 1.0]])
    assert abs(r.db - (abs(10 * math.log10(2.0)) + 0.0) / 2) <= 1e-12
    assert round(r.db, 4) == 1.5051
    assert r.linear == 0.5


def test_ape_channel_mean():
    rng = np.random.default_rng(1)
    m, ref = rng.uniform(0.1, 1, (2, 30)), rng.uniform(0.1, 1, (2, 30))
    a, b = metrics.ape(m[:1], ref[:1]).db, metrics.ape(m[1:], ref[1:]).db
    assert metrics.ape(m, ref).db == pytest.approx((a + b) / 2, abs=1e-12)


def test_ape_exclusions_reported():
    r = metrics.ape([[1.0, 2.0, 3.0]], [[0.0, 2.0, -1.0]])
    assert r.exclusions == 2 and r.db == 0.0


def test_ape_shape_mismatch():
    with pytest.raises(MetricError):
        metrics.ape(np.ones((2, 3)), np.ones((3, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_ape_symmetric_and_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    m, ref = rng.uniform(0.01, 5, (2, 16)), rng.uniform(0.01, 5, (2, 16))
    assert metrics.ape(m, ref).db == pytest.approx(metrics.ape(ref, m).db, abs=1e-12)
    assert metrics.ape(m, ref).db > 0
    assert metrics.ape(m, m).db == 0


# --- depth ---------------------------------------------------------------------------

def test_depth_cases():
    z = rand_complex(np.random.default_rng(2), (2, 100))
    np.testing.assert_array_equal(metrics.cancellation_depth(z, np.zeros_like(z)), [0.0, 0.0])
    half = metrics.cancellation_depth(z, z / 2)
    np.testing.assert_allclose(half, 10 * math.log10(1 / 0.25), atol=1e-12)
    assert round(float(half[0]), 4) == 6.0206
    assert np.all(np.isposinf(metrics.cancellation_depth(z, z)))
    assert np.all(metrics.cancellation_depth(z, -z) < 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 2**31))
def test_depth_scale_invariant(c, seed):
    rng = np.random.default_rng(seed)
    z = rand_complex(rng, (2, 64))
    zh = z + 0.1 * rand_complex(rng, (2, 64))
    np.testing.assert_allclose(metrics.cancellation_depth(c * z, c * zh), metrics.cancellation_depth(z, zh),
                               atol=1e-9)


def test_ape_report_fields():
    z = rand_complex(np.random.default_rng(3), (2, 50))
    rep = metrics.ape_report(z, z / 2)
    assert rep.n_channels == 2 and rep.n_samples == 50
    assert rep.mean_depth_db == pytest.approx(6.0206, abs=1e-4)
    assert rep.mean_ape_db == pytest.approx(abs(10 * math.log10(0.25)), abs=1e-12)
    perfect = metrics.ape_report(z, z)
    assert perfect.perfect_channels == [0, 1] and perfect.to_dict()["mean_depth_db"] == "inf"


# --- heatmap ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_like():
    spec = models.preset("desk", 2, 1)
    params = models.build(spec, 0)
    rng = np.random.default_rng(4)
    for p in params.values():
        p.data[...] = rng.normal(scale=0.3, size=p.shape)
    s = sim.make_scenario(2, 1, seed=1)
    x, z = sim.synthesize_split(sim.default_plan(), s, 6000, 6000, 0, "test")
    return spec, params, x.to_channels(), z.to_channels()


def test_heatmap_full_cell_equals_whole(trained_like):
    spec, params, x, z = trained_like
    grid = metrics.heatmap_sweep(params, spec, x, z, [0, 1000], [1000, 6000], margin=16)
    al = metrics.align(params, spec, x, z, 16)
    whole = float(np.mean(metrics.cancellation_depth(al.z, al.z_hat)))
    assert grid.cell(0, 6000) == whole
    assert grid.cell(1000, 6000) is None
    assert grid.n_valid == 3


def test_heatmap_disjoint_segments(trained_like):
    spec, params, x, z = trained_like
    grid = metrics.heatmap_sweep(params, spec, x, z, [1000, 3000], [2000], margin=16)
    al = metrics.align(params, spec, x, z, 16)
    for s in (1000, 3000):
        a, b = s - al.first, s + 2000 - al.first
        ref = float(np.mean(metrics.cancellation_depth(al.z[:, a:b], al.z_hat[:, a:b])))
        assert grid.cell(s, 2000) == ref


def test_heatmap_errors(trained_like):
    spec, params, x, z = trained_like
    with pytest.raises(MetricError):
        metrics.heatmap_sweep(params, spec, x, z, [5000], [2000])
    al = metrics.align(params, spec, x, z, 16)
    with pytest.raises(MetricError, match="no valid"):
        metrics.heatmap_from_aligned(al, 6000, [5000], [2000])


def test_parse_range():
    assert metrics.parse_range("0:29:1", 1000)[-1] == 29000
    assert len(metrics.parse_range("0:29:1")) == 30
    assert metrics.parse_range("2:8:3") == [2, 5, 8]
    for bad in ("5:1", "1:2:0", "a:b", "1:2:3:4"):
        with pytest.raises(ValueError):
            metrics.parse_range(bad)


# --- spectrum ----------------------------------------------------------------------

def test_tone_single_bin():
    x = np.exp(2j * np.pi * 32 * np.arange(4096) / 1024)
    p = metrics.periodogram(x)
    assert int(np.argmax(p)) == 32
    others = np.delete(p, 32)
    assert 10 * np.log10(p[32] / max(others.max(), 1e-300)) >= 60


def test_white_noise_flat():
    rng = np.random.default_rng(5)
    x = rand_complex(rng, 64 * 1024) / math.sqrt(2)
    p = metrics.periodogram(x)
    db = 10 * np.log10(p / p.mean())
    assert np.all(np.abs(db) <= 3.0)


def test_parseval():
    rng = np.random.default_rng(6)
    x = rand_complex(rng, (2, 5 * 1024 + 100))
    p = metrics.periodogram(x)
    frames = x[:, : 5 * 1024].reshape(2, 5, 1024)
    energy = (np.abs(frames) ** 2).sum(axis=-1).mean(axis=-1)
    np.testing.assert_allclose(p.sum(axis=-1), energy, rtol=1e-9)


def test_spectrum_report():
    rng = np.random.default_rng(7)
    z = rand_complex(rng, (2, 3000))
    rep = metrics.spectrum(z, z / 2, channel=1)
    assert rep.true.shape == (1, 1024) and rep.frames == 2
    np.testing.assert_allclose(rep.residual, rep.pred, rtol=1e-12)
    assert rep.freqs[1] == 1 / 1024
    with pytest.raises(MetricError):
        metrics.spectrum(z[:, :1000], z[:, :1000])
