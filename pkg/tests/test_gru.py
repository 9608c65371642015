import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from koopman_mpc import gru, koopman
from koopman_mpc import experiment as ex
from koopman_mpc.gru import AblationSpec, GruCell, GruConfig, GruModel, gru_cell, hard_sigmoid


def _random_cell(rng, m=2, p=3, scale=0.8):
    return GruCell(*[rng.normal(scale=scale, size=(p, m)) for _ in range(3)],
                   *[rng.normal(scale=scale, size=(p, p)) for _ in range(3)],
                   *[rng.normal(scale=scale, size=p) for _ in range(3)])


def _zero_cell(m=1, p=2):
    return GruCell(*[np.zeros((p, m)) for _ in range(3)], *[np.zeros((p, p)) for _ in range(3)],
                   *[np.zeros(p) for _ in range(3)])


def _cell_scalar(x, v, w):
    """Elementwise transcription of the gated update with explicit loops."""
    p, m = w.Wi_z.shape

    def hs(a):
        return min(1.0, max(0.0, 0.2 * a + 0.5))

    z, r = [], []
    for i in range(p):
        az = w.b_z[i] + sum(w.Wi_z[i, j] * v[j] for j in range(m)) + sum(w.Wx_z[i, j] * x[j] for j in range(p))
        ar = w.b_r[i] + sum(w.Wi_r[i, j] * v[j] for j in range(m)) + sum(w.Wx_r[i, j] * x[j] for j in range(p))
        z.append(hs(az))
        r.append(hs(ar))
    out = []
    for i in range(p):
        ah = w.b_h[i] + sum(w.Wi_h[i, j] * v[j] for j in range(m))
        ah += sum(w.Wx_h[i, j] * r[j] * x[j] for j in range(p))
        h = math.tanh(ah)
        out.append(z[i] * x[i] + (1 - z[i]) * h)
    return out


def test_hard_sigmoid_shape():
    assert hard_sigmoid(0.0) == 0.5
    assert hard_sigmoid(10.0) == 1.0 and hard_sigmoid(-10.0) == 0.0
    assert hard_sigmoid(1.0) == pytest.approx(0.7)
    x = np.linspace(-5, 5, 1001)
    y = hard_sigmoid(x)
    assert np.all((0 <= y) & (y <= 1)) and np.all(np.diff(y) >= 0)


def test_cell_zero_weights_halves_state():
    c = np.array([1.5, -2.0])
    np.testing.assert_allclose(gru_cell(c, np.array([0.3]), _zero_cell()), 0.5 * c)


def test_cell_saturated_update_gate_carries(rng):
    w = _random_cell(rng, m=1, p=2)
    w.b_z[:] = 100.0
    x = np.array([0.4, -0.7])
    np.testing.assert_array_equal(gru_cell(x, np.array([2.0]), w), x)


def test_cell_closed_update_gate_gives_candidate(rng):
    w = _random_cell(rng, m=1, p=2)
    w.b_z[:] = -100.0
    x, v = np.array([0.4, -0.7]), np.array([2.0])
    r = hard_sigmoid(w.Wi_r @ v + w.Wx_r @ x + w.b_r)
    h = np.tanh(w.Wi_h @ v + w.Wx_h @ (r * x) + w.b_h)
    np.testing.assert_allclose(gru_cell(x, v, w), h, rtol=1e-15)


@given(st.integers(0, 10_000))
def test_cell_matches_scalar_transcription(seed):
    rng = np.random.default_rng(seed)
    w = _random_cell(rng)
    x, v = rng.normal(size=3), rng.normal(size=2)
    np.testing.assert_allclose(gru_cell(x, v, w), _cell_scalar(x, v, w), rtol=1e-12, atol=1e-12)


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3),
       st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2))
def test_gate_ranges(x, v):
    w = _random_cell(np.random.default_rng(0))
    x, v = np.array(x), np.array(v)
    out, cache = gru._cell_forward(x[:, None], v[:, None], w)
    _, _, _, _, z, r, h = cache
    assert np.all((0 <= z) & (z <= 1)) and np.all((0 <= r) & (r <= 1))
    assert np.all(np.abs(h) <= 1)


def test_cell_dimension_check(rng):
    with pytest.raises(ValueError):
        gru_cell(np.zeros(4), np.zeros(2), _random_cell(rng))
    with pytest.raises(ValueError):
        GruCell(*[np.zeros((2, 1))] * 3, *[np.zeros((2, 3))] * 3, *[np.zeros(2)] * 3)


def _toy_gru(rng):
    cfg = GruConfig(n_prev_inputs=3, n_prev_outputs=2, horizon=4, init_hidden=3, out_hidden=3, units=2,
                    n_inputs=1, n_outputs=1)
    model = GruModel.initialise(cfg, rng)
    for p in model.params():
        p[...] = rng.normal(scale=0.6, size=p.shape)
    B = 3
    hist = rng.normal(size=(5, B))
    fut = rng.normal(size=(4, 1, B))
    tgt = rng.normal(size=(4, 1, B))
    return model, hist, fut, tgt


def test_bptt_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    model, hist, fut, tgt = _toy_gru(rng)
    _, grads = gru.gru_loss(model, hist, fut, tgt)
    h = 1e-5
    for p, g in zip(model.params(), grads):
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = gru.gru_loss(model, hist, fut, tgt, need_grad=False)[0]
            p[idx] = old - h
            fm = gru.gru_loss(model, hist, fut, tgt, need_grad=False)[0]
            p[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        rel = np.linalg.norm(num - g) / max(np.linalg.norm(num) + np.linalg.norm(g), 1e-12)
        assert rel < 1e-4


def test_config_validation():
    with pytest.raises(ValueError):
        GruConfig(units=0)
    assert GruConfig().history == 25


def test_sequences_alignment():
    cfg = GruConfig(n_prev_inputs=2, n_prev_outputs=3, horizon=4)
    y = np.arange(20.0)[:, None]
    u = 100 + np.arange(20.0)[:, None]
    hist, fut, tgt = gru._sequences(y, u, [5], cfg)
    np.testing.assert_array_equal(hist[:, 0], [103, 104, 3, 4, 5])
    np.testing.assert_array_equal(fut[:, 0, 0], [105, 106, 107, 108])
    np.testing.assert_array_equal(tgt[:, 0, 0], [6, 7, 8, 9])


def test_constant_trace_is_learned():
    cfg = GruConfig(horizon=30, epochs=2)
    y = np.full((200, 1), 3.25)
    model = gru.train_gru(y, cfg)
    pred = gru.predict_gru(model, y, 100, 60)
    assert np.mean((pred - 3.25) ** 2) < 1e-6


def test_training_deterministic_and_checkpoint_roundtrip(tmp_path, seizure_trace):
    cfg = GruConfig(horizon=40, epochs=1, units=8, init_hidden=8, out_hidden=8)
    tr = seizure_trace.segment(0, 400)
    a = gru.train_gru(tr, cfg)
    b = gru.train_gru(tr, cfg)
    for p, q in zip(a.params(), b.params()):
        np.testing.assert_array_equal(p, q)
    back = gru.load_gru(gru.save_gru(a, tmp_path / "g.json"))
    np.testing.assert_array_equal(gru.predict_gru(a, seizure_trace, 500, 90),
                                  gru.predict_gru(back, seizure_trace, 500, 90))
    with pytest.raises(ValueError):
        gru.gru_from_dict(koopman.model_to_dict(koopman.KoopmanModel.initialise(koopman.LiftingConfig())))


def test_predict_gru_validation(seizure_trace):
    model = GruModel.initialise(GruConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        gru.predict_gru(model, seizure_trace, 10, 5)
    with pytest.raises(ValueError):
        gru.train_gru(seizure_trace.segment(0, 100), GruConfig())


# -- ablations


def test_ablation_specs_drop_exactly_one_term():
    assert AblationSpec.FULL.active_terms == koopman.ALL_TERMS
    dropped = []
    for spec in AblationSpec:
        if spec is AblationSpec.FULL:
            continue
        missing = koopman.ALL_TERMS - spec.active_terms
        assert len(missing) == 1
        dropped.extend(missing)
    assert sorted(dropped) == sorted(koopman.LOSS_TERMS)
    assert AblationSpec("model4").dropped == "zpred"
    assert AblationSpec.FULL.label == "Koopman" and AblationSpec.NO_LIN.label == "model 5"


def test_full_ablation_bit_matches_trainer(seizure_trace):
    cfg = koopman.LiftingConfig(epochs=3, seed=5)
    tr = seizure_trace.segment(0, 400)
    a = gru.train_ablation(tr, cfg, AblationSpec.FULL)
    b = koopman.train(tr, cfg)
    for p, q in zip(a.params(), b.params()):
        np.testing.assert_array_equal(p, q)
    np.testing.assert_array_equal(a.operator, b.operator)


def _row(result, label):
    return next(r for r in result.rows if r.model == label)


def test_model4_worse_than_full(ablation_study):
    res = ablation_study["single"]["result"]
    assert _row(res, "model 4").mse_mean > _row(res, "Koopman").mse_mean


def _lin_residual(model, series):
    lat = model.encode_series(series)
    return float(np.linalg.norm(lat[:, 1:] - model.operator @ lat[:, :-1]) / np.sqrt(lat[:, 1:].size))


def test_model5_has_larger_latent_residual(ablation_study):
    run = ablation_study["single"]
    cfg = run["cfg"]
    held_out = ex.load_simulated(cfg).eeg[cfg.split.train:cfg.split.train + cfg.split.test]
    wins = 0
    for i in range(cfg.ablation.runs):
        sub = cfg.with_seed(cfg.seed + i)
        full = _lin_residual(ex.load_trained(sub, "full"), held_out)
        no_lin = _lin_residual(ex.load_trained(sub, "model5"), held_out)
        wins += no_lin >= full
    assert wins > cfg.ablation.runs // 2


def test_gru_r2_near_reference(ablation_study):
    row = _row(ablation_study["single"]["result"], "GRU")
    assert abs(row.r2_mean - 0.85) <= 0.1
