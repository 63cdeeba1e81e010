import math
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pimcancel import autodiff as ad
from pimcancel import models, sim, train
from pimcancel.autodiff import Tensor
from pimcancel.train import ConfigError, NonFiniteError, OptimizerState, TrainConfig


@pytest.fixture(scope="module")
def small_data():
    s = sim.make_scenario(2, 1, seed=3)
    x, z = sim.synthesize_split(sim.default_plan(), s, 6000, 2048, 0, "train")
    return x.to_channels(), z.to_channels()


def small_cfg(**kw):
    base = dict(window_len=600, batch_windows=2, steps=60, eval_every=20, cycle_period=40,
                lr_max=3e-3, truncate_margin=16)
    base.update(kw)
    return TrainConfig(**base)


# --- schedule ----------------------------------------------------------------------

def test_clr_endpoints():
    cfg = TrainConfig(lr_min=1e-4, lr_max=2e-3, cycle_period=2000)
    assert train.clr_lr(0, cfg) == 1e-4
    assert train.clr_lr(1000, cfg) == 2e-3
    assert train.clr_lr(2000, cfg) == 1e-4
    assert train.clr_lr(500, cfg) == pytest.approx(1e-4 + 0.5 * 1.9e-3, rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**7), st.sampled_from([2, 10, 100, 2000]))
def test_clr_periodic(step, period):
    cfg = TrainConfig(cycle_period=period)
    assert train.clr_lr(step, cfg) == train.clr_lr(step + period, cfg)
    assert cfg.lr_min <= train.clr_lr(step, cfg) <= cfg.lr_max


# --- clipping ------------------------------------------------------------------------

def test_clip_hand_case():
    out, scale, norm = train.clip_gradients(OrderedDict(g=np.array([3.0, 4.0])), 1.0)
    np.testing.assert_allclose(out["g"], [0.6, 0.8], rtol=0, atol=1e-15)
    assert norm == 5.0 and scale == pytest.approx(0.2)
    assert train.global_norm(out.values()) == pytest.approx(1.0, abs=1e-15)


def test_clip_below_threshold_and_zero():
    g = OrderedDict(g=np.array([0.3, 0.4]))
    out, scale, _ = train.clip_gradients(g, 1.0)
    assert scale == 1.0 and np.array_equal(out["g"], g["g"])
    out, scale, norm = train.clip_gradients(OrderedDict(g=np.zeros(3)), 1.0)
    assert scale == 1.0 and norm == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 10))
def test_clip_direction_and_bound(seed, tau):
    rng = np.random.default_rng(seed)
    g = OrderedDict((f"p{i}", rng.normal(scale=rng.uniform(0.01, 10), size=rng.integers(1, 6, size=2)))
                    for i in range(3))
    out, _, _ = train.clip_gradients(g, tau)
    a = np.concatenate([v.ravel() for v in g.values()])
    b = np.concatenate([v.ravel() for v in out.values()])
    assert np.linalg.norm(b) <= tau * (1 + 1e-12)
    assert abs(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) - 1.0) <= 1e-12


# --- Adam ----------------------------------------------------------------------------

def _scalar(v):
    return OrderedDict(theta=Tensor(np.array([v]), requires_grad=True))


def test_adam_hand_case():
    p = _scalar(0.0)
    state = OptimizerState.for_params(p)
    train.adam_step(p, OrderedDict(theta=np.array([1.0])), state, lr=0.1, weight_decay=0.0)
    # t=1: m_hat = 1, v_hat = 1, update = 1 / (1 + 1e-8)
    assert abs(p["theta"].data[0] - (-0.1 / (1 + 1e-8))) <= 1e-12
    assert state.t == 1


def test_adam_zero_gradient_no_decay():
    p = _scalar(1.5)
    state = OptimizerState.for_params(p)
    for _ in range(5):
        train.adam_step(p, OrderedDict(theta=np.zeros(1)), state, lr=0.1, weight_decay=0.0)
    assert p["theta"].data[0] == 1.5


def test_adam_pure_decay():
    p = _scalar(2.0)
    state = OptimizerState.for_params(p)
    lr, lam = 0.05, 0.01
    expected = 2.0
    for _ in range(10):
        train.adam_step(p, OrderedDict(theta=np.zeros(1)), state, lr=lr, weight_decay=lam)
        expected *= 1 - lr * lam
        assert abs(p["theta"].data[0] - expected) <= 1e-12


def test_adam_two_steps_match_formula():
    p = _scalar(0.5)
    state = OptimizerState.for_params(p)
    b1, b2, eps, lr, lam = 0.9, 0.999, 1e-8, 0.01, 0.01
    theta, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate([0.3, -1.2], start=1):
        train.adam_step(p, OrderedDict(theta=np.array([g])), state, lr=lr, weight_decay=lam)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * ((m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps) + lam * theta)
        assert abs(p["theta"].data[0] - theta) <= 1e-12


def test_adam_rejects_non_finite():
    p = OrderedDict(a=Tensor(np.ones(2), requires_grad=True), b=Tensor(np.ones(2), requires_grad=True))
    state = OptimizerState.for_params(p)
    with pytest.raises(NonFiniteError, match=r"'b'.*batch 7"):
        train.adam_step(p, OrderedDict(a=np.ones(2), b=np.array([1.0, np.nan])), state, 0.1,
                        context="batch 7")
    assert np.array_equal(p["a"].data, np.ones(2)) and state.t == 0


# --- loss ------------------------------------------------------------------------------

def test_truncated_mse_cases():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(2, 50))
    assert float(train.truncated_mse(Tensor(z), z, 5).data) == 0.0
    zh = z + rng.normal(size=z.shape) * 0.1
    base = float(train.truncated_mse(Tensor(zh), z, 5).data)
    bad = zh.copy()
    bad[:, :5] = 1e6
    bad[:, -5:] = -1e6
    assert float(train.truncated_mse(Tensor(bad), z, 5).data) == base
    oracle = sum((zh[c, i] - z[c, i]) ** 2 for c in range(2) for i in range(50)) / 100
    assert abs(float(train.truncated_mse(Tensor(zh), z, 0).data) - oracle) <= 1e-12
    with pytest.raises(ValueError):
        train.truncated_mse(Tensor(z), z, 25)


def test_truncated_mse_margin_gradient_zero():
    rng = np.random.default_rng(1)
    zh = Tensor(rng.normal(size=(2, 40)), requires_grad=True)
    ad.backward(train.truncated_mse(zh, rng.normal(size=(2, 40)), 7))
    assert np.all(zh.grad[:, :7] == 0) and np.all(zh.grad[:, -7:] == 0)
    assert np.all(zh.grad[:, 7:-7] != 0)


# --- config ------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError, match="1024"):
        TrainConfig(window_len=512, batch_windows=2).validate()
    TrainConfig(window_len=513, batch_windows=2).validate()
    with pytest.raises(ConfigError, match="even"):
        TrainConfig(cycle_period=7).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr_min=1e-2, lr_max=1e-3).validate()
    with pytest.raises(ConfigError, match="truncate_margin"):
        TrainConfig(truncate_margin=5).validate(receptive_field=25)
    TrainConfig(truncate_margin=12).validate(receptive_field=25)


# --- loop ---------------------------------------------------------------------------

def _run(data, tmp_path=None, **kw):
    x, z = data
    spec = models.preset("desk", 2, 1)
    params = models.build(spec, 0)
    cfg = small_cfg(**kw)
    log = None if tmp_path is None else tmp_path / "m.csv"
    return train.train(spec, params, x[:, :5000], z[:, :5000], cfg, val=(x[:, 5000:], z[:, 5000:]),
                       log_path=log), spec


def test_training_deterministic(small_data, tmp_path):
    (a, _), (b, _) = _run(small_data, tmp_path, steps=30), _run(small_data, steps=30)
    assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


def test_log_columns_and_lr(small_data, tmp_path):
    res, _ = _run(small_data, tmp_path, steps=40)
    lines = (tmp_path / "m.csv").read_text().split("\n")
    assert lines[0] == "step,lr,loss,grad_norm,clip_scale,eval_depth_db"
    assert len(lines) == 42 and lines[-1] == ""
    cfg = small_cfg()
    for line in lines[1:-1]:
        f = line.split(",")
        assert float(f[1]) == train.clr_lr(int(f[0]), cfg)
    assert lines[20].split(",")[5] != "" and lines[19].split(",")[5] == ""
    assert all(np.isfinite(p.data).all() for p in res.params.values())


def test_loss_decreases_in_most_seeds(small_data):
    x, z = small_data
    spec = models.preset("desk", 2, 1)
    ok = 0
    for seed in range(10):
        params = models.build(spec, seed)
        xb, zb = train.make_batch(x, z, [100, 2000], 600, spec)
        first = float(train.truncated_mse(models.forward(params, spec, xb), zb, 16).data)
        cfg = small_cfg(steps=100, seed=seed, lr_min=1e-3, lr_max=1e-3)
        train.train(spec, params, x, z, cfg)
        last = float(train.truncated_mse(models.forward(params, spec, xb), zb, 16).data)
        ok += last <= first
    assert ok >= 9


def test_resume_matches_uninterrupted(small_data, tmp_path):
    x, z = small_data
    spec = models.preset("desk", 2, 1)
    cfg = small_cfg(steps=100, eval_every=50)
    val = (x[:, 5000:], z[:, 5000:])
    full = train.train(spec, models.build(spec, 0), x[:, :5000], z[:, :5000], cfg, val=val,
                       log_path=tmp_path / "full.csv")
    ck = tmp_path / "ck.pimm"
    train.train(spec, models.build(spec, 0), x[:, :5000], z[:, :5000], cfg, val=val, stop_step=50,
                log_path=tmp_path / "part.csv", checkpoint_path=ck)
    c = train.load_checkpoint(ck)
    assert c.step == 50 and c.config == cfg
    rest = train.train(c.spec, c.params, x[:, :5000], z[:, :5000], c.config, val=val, state=c.state,
                       start_step=c.step, best=c.best, log_path=tmp_path / "part.csv")
    assert all(full.params[k].data.tobytes() == rest.params[k].data.tobytes() for k in full.params)
    assert all(full.best_params[k].data.tobytes() == rest.best_params[k].data.tobytes() for k in full.params)
    assert (tmp_path / "full.csv").read_bytes() == (tmp_path / "part.csv").read_bytes()


def test_non_finite_loss_keeps_checkpoint(small_data, tmp_path):
    x, z = small_data
    spec = models.preset("desk", 2, 1)
    cfg = small_cfg(steps=20, eval_every=10)
    ck = tmp_path / "ck.pimm"
    params = models.build(spec, 0)
    train.train(spec, params, x, z, cfg, checkpoint_path=ck)
    before = ck.read_bytes()
    c = train.load_checkpoint(ck)
    with pytest.raises(NonFiniteError, match="step 20"):
        train.train(spec, c.params, np.full_like(x, np.nan), z, small_cfg(steps=40, eval_every=10), state=c.state,
                    start_step=20, checkpoint_path=ck)
    assert ck.read_bytes() == before


def test_evaluate_untrained_is_zero_depth(small_data):
    x, z = small_data
    spec = models.preset("desk", 2, 1)
    mse, depth = train.evaluate(models.build(spec, 0), spec, x, z, 16)
    assert depth == 0.0 and mse > 0
