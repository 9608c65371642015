import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from koopman_mpc import neural_mass as nm
from koopman_mpc.neural_mass import (DoubleColumnParams, IntegrationError, JansenRitParams, Plant,
                                     SimTrace, double_column_rhs, generate_trace, integrate,
                                     single_column_rhs)

P = JansenRitParams()


# -- independent transcriptions of the column equations, written with scalar math


def _S(v, e0, r, v0):
    z = r * (v0 - v)
    if z > 0:
        e = math.exp(-z)
        return 2 * e0 * e / (1 + e)
    return 2 * e0 / (1 + math.exp(z))


def _single_oracle(y, u, q):
    y1, y2, y3, y4, y5, y6 = (float(v) for v in y)
    S = lambda v: _S(v, q.e0, q.r, q.v0)  # noqa: E731
    return [
        y4,
        y5 + u,
        y6,
        q.A * q.a * S(y2 - y3) - 2 * q.a * y4 - q.a ** 2 * y1,
        q.A * q.a * (q.p + q.C2 * S(q.C1 * y1)) - 2 * q.a * y5 - q.a ** 2 * y2,
        q.B_inh * q.b * q.C4 * S(q.C3 * y1) - 2 * q.b * y6 - q.b ** 2 * y3,
    ]


def _double_oracle(y, u, dp):
    c, c2 = dp.col1, dp.col2
    a, b, ad = c.a, c.b, dp.a_d
    S1 = lambda v: _S(v, c.e0, c.r, c.v0)  # noqa: E731
    S2 = lambda v: _S(v, c2.e0, c2.r, c2.v0)  # noqa: E731
    y = [float(v) for v in y]
    out = [0.0] * 16
    out[0] = y[3]
    out[3] = c.A * a * S1(y[1] - y[2]) - 2 * a * y[3] - a ** 2 * y[0]
    out[1] = y[4] + u
    out[4] = c.A * a * (c.p + c.C2 * S1(c.C1 * y[0]) + dp.K2 * y[13]) - 2 * a * y[4] - a ** 2 * y[1]
    out[2] = y[5]
    out[5] = c.B_inh * b * c.C4 * S1(c.C3 * y[0]) - 2 * b * y[5] - b ** 2 * y[2]
    out[6] = y[9]
    out[9] = c2.A * a * S2(y[7] - y[8]) - 2 * a * y[9] - a ** 2 * y[6]
    out[7] = y[10]
    out[10] = c2.A * a * (c2.p + c2.C2 * S2(c2.C1 * y[6]) + dp.K1 * y[12]) - 2 * a * y[10] - a ** 2 * y[7]
    out[8] = y[11]
    out[11] = c2.B_inh * b * c2.C4 * S2(c2.C3 * y[6]) - 2 * b * y[11] - b ** 2 * y[8]
    out[12] = y[14]
    out[14] = c2.A * ad * S1(y[1] - y[2]) - 2 * ad * y[14] - a ** 2 * y[12]
    out[13] = y[15]
    out[15] = c2.A * ad * S2(y[7] - y[8]) - 2 * ad * y[15] - a ** 2 * y[13]
    return out


# -- sigmoid


def test_sigmoid_examples():
    assert nm.sigmoid(6.0, P) == pytest.approx(2.5, abs=1e-15)
    assert nm.sigmoid(1e4, P) == pytest.approx(5.0)
    assert nm.sigmoid(-1e4, P) == pytest.approx(0.0, abs=1e-12)
    assert nm.sigmoid(0.0, P) == pytest.approx(5.0 / (1.0 + math.exp(3.36)), rel=1e-14)
    assert nm.sigmoid(0.0, P) == pytest.approx(0.1678, abs=5e-5)


def test_sigmoid_monotone_and_bounded_on_grid():
    # float64 resolves strict increase only while the tails stay above one ulp
    v = np.linspace(-50, 50, 20001)
    s = nm.sigmoid(v, P)
    assert np.all(np.diff(s) > 0)
    assert np.all((s > 0) & (s < 2 * P.e0))


# -- right-hand sides


def test_single_rhs_zero_state():
    d = single_column_rhs(np.zeros(6), 0.0, 0.0, P)
    s0 = nm.sigmoid(0.0, P)
    assert d[0] == d[1] == d[2] == 0.0
    assert d[3] == pytest.approx(P.A * P.a * s0)
    assert d[4] == pytest.approx(P.A * P.a * P.C2 * s0)
    assert d[5] == pytest.approx(P.B_inh * P.b * P.C4 * s0)


def test_single_rhs_input_is_additive():
    d0 = single_column_rhs(np.zeros(6), 0.0, 0.0, P)
    d3 = single_column_rhs(np.zeros(6), 0.0, 3.0, P)
    assert d3[1] == 3.0
    np.testing.assert_array_equal(np.delete(d3, 1), np.delete(d0, 1))


@given(st.lists(st.floats(-30, 30), min_size=6, max_size=6), st.floats(-50, 50),
       st.floats(6.5, 8.5), st.floats(0, 300))
def test_single_rhs_matches_transcription(y, u, A, p):
    q = JansenRitParams(A=A, p=p)
    got = single_column_rhs(np.array(y), 0.0, u, q)
    np.testing.assert_allclose(got, _single_oracle(y, u, q), rtol=1e-12, atol=1e-12 * 1e4)


@given(st.lists(st.floats(-30, 30), min_size=16, max_size=16), st.floats(-50, 50),
       st.floats(0, 200), st.floats(0, 200), st.floats(6.5, 8.5), st.floats(6.5, 8.5))
def test_double_rhs_matches_transcription(y, u, K1, K2, A1, A2):
    dp = DoubleColumnParams(col1=JansenRitParams(A=A1, p=10.0), col2=JansenRitParams(A=A2, C2=100.0),
                            K1=K1, K2=K2)
    got = double_column_rhs(np.array(y), 0.0, u, dp)
    np.testing.assert_allclose(got, _double_oracle(y, u, dp), rtol=1e-12, atol=1e-8)


def test_double_rhs_zero_coupling_pattern():
    dp = DoubleColumnParams(K1=0.0, K2=0.0)
    d = double_column_rhs(np.zeros(16), 0.0, 0.0, dp)
    np.testing.assert_allclose(d[:6], single_column_rhs(np.zeros(6), 0.0, 0.0, dp.col1), rtol=1e-15)
    np.testing.assert_allclose(d[6:12], single_column_rhs(np.zeros(6), 0.0, 0.0, dp.col2), rtol=1e-15)


def test_double_rhs_input_enters_first_column_only():
    dp = DoubleColumnParams()
    y = np.random.default_rng(0).normal(size=16)
    d0 = double_column_rhs(y, 0.0, 0.0, dp)
    d3 = double_column_rhs(y, 0.0, 3.0, dp)
    diff = d3 - d0
    assert diff[1] == pytest.approx(3.0, abs=1e-12)
    assert np.all(np.delete(diff, 1) == 0.0)


def test_rhs_dimension_checks():
    with pytest.raises(ValueError):
        single_column_rhs(np.zeros(5), 0.0, 0.0, P)
    with pytest.raises(ValueError):
        double_column_rhs(np.zeros(6), 0.0, 0.0, DoubleColumnParams())


def test_param_validation():
    with pytest.raises(ValueError):
        JansenRitParams(a=0.0)
    with pytest.raises(ValueError):
        JansenRitParams(C3=-1.0)
    with pytest.raises(ValueError):
        DoubleColumnParams(a_d=-1.0)
    assert DoubleColumnParams().a_d == pytest.approx(100.0 / 3.0)


# -- integrator


def _decay(y, t, u):
    return -y


def test_rk4_decay_accuracy():
    _, ys = integrate(_decay, [1.0], 1.0, 1e-3)
    assert abs(ys[-1, 0] - math.exp(-1.0)) < 1e-8


def _decay_error(h):
    t, ys = integrate(_decay, [1.0], 1.0, h)
    return np.max(np.abs(ys[:, 0] - np.exp(-t)))


def test_rk4_fourth_order():
    e1, e2 = _decay_error(0.1), _decay_error(0.05)
    assert 12.0 <= e1 / e2 <= 20.0
    assert 3.5 <= math.log2(e1 / e2) <= 4.5


def test_rk4_oscillator_energy():
    w = 2 * math.pi

    def osc(y, t, u):
        return np.array([y[1], -w * w * y[0]])

    _, ys = integrate(osc, [1.0, 0.0], 10.0, 1e-3)
    energy = 0.5 * ys[:, 1] ** 2 + 0.5 * w * w * ys[:, 0] ** 2
    assert np.max(np.abs(energy / energy[0] - 1.0)) < 1e-6


def test_integrate_zero_order_hold():
    t, ys = integrate(lambda y, t, u: np.array([u]), [0.0], 1.0, 0.01,
                      input_signal=[1.0, -1.0], input_rate=2.0)
    assert ys[50, 0] == pytest.approx(0.5, abs=1e-12)
    assert ys[-1, 0] == pytest.approx(0.0, abs=1e-12)


def test_integrate_reports_blow_up():
    with pytest.raises(IntegrationError) as err, np.errstate(over="ignore", invalid="ignore"):
        integrate(lambda y, t, u: y * y, [1.0], 2.0, 1e-2)
    assert 0.9 < err.value.t < 1.2


def test_integrate_validation():
    with pytest.raises(ValueError):
        integrate(_decay, [1.0], 1.0, 0.0)
    with pytest.raises(ValueError):
        integrate(_decay, [1.0], 1e-4, 1e-3)


# -- traces


def test_zero_coupling_factorises():
    dp = DoubleColumnParams(col1=JansenRitParams(A=7.8), col2=JansenRitParams(A=7.3), K1=0.0, K2=0.0)
    rng = np.random.default_rng(3)
    y0 = rng.normal(scale=0.5, size=16)
    _, yd = integrate(lambda y, t, u: double_column_rhs(y, t, u, dp), y0, 1.0, 1e-3)
    _, y1 = integrate(lambda y, t, u: single_column_rhs(y, t, u, dp.col1), y0[:6], 1.0, 1e-3)
    _, y2 = integrate(lambda y, t, u: single_column_rhs(y, t, u, dp.col2), y0[6:12], 1.0, 1e-3)
    np.testing.assert_allclose(yd[:, :6], y1, atol=1e-9)
    np.testing.assert_allclose(yd[:, 6:12], y2, atol=1e-9)


def test_trace_is_deterministic():
    a = generate_trace(P, 5.0)
    b = generate_trace(P, 5.0)
    np.testing.assert_array_equal(a.eeg, b.eeg)
    c = generate_trace(P, 5.0, noise_seed=7)
    d = generate_trace(P, 5.0, noise_seed=7)
    np.testing.assert_array_equal(c.eeg, d.eeg)


def test_plant_reproduces_trace_bitwise():
    u = np.where(np.arange(300) > 200, -5.0, 0.0)
    tr = generate_trace(P, 6.0, input_signal=u)
    plant = Plant(P)
    out = []
    for i in range(300):
        out.append(plant.output())
        plant.advance(u[i])
    np.testing.assert_array_equal(np.array(out)[100:], tr.eeg)


def test_trace_layout(seizure_trace):
    tr = seizure_trace
    assert tr.rate == 50.0
    assert tr.t[0] == pytest.approx(2.0)
    assert len(tr) == 2000
    np.testing.assert_allclose(np.diff(tr.t), 0.02, atol=1e-12)
    assert tr.u is None


def test_normal_trace_rests():
    tr = generate_trace(JansenRitParams(A=7.0), 20.0)
    e = tr.eeg[:, 0]
    assert np.all(np.isfinite(e)) and np.max(np.abs(e)) < 50
    h = len(e) // 2
    assert np.ptp(e[h:]) <= np.ptp(e[:h]) + 1e-9
    assert np.ptp(e) < 1.0


def test_seizure_trace_is_periodic_and_large(seizure_trace):
    e = seizure_trace.eeg[:, 0]
    assert np.ptp(e) > 20.0
    h = len(e) // 2
    assert np.ptp(e[h:]) == pytest.approx(np.ptp(e[:h]), rel=0.05)


def test_double_column_induced_seizure(double_trace):
    healthy_alone = generate_trace(JansenRitParams(A=7.0), 20.0)
    assert np.ptp(double_trace.eeg[:, 0]) > 20.0
    assert np.ptp(double_trace.eeg[:, 1]) > 10.0 * max(np.ptp(healthy_alone.eeg), 1e-3)


def test_generate_trace_validation():
    with pytest.raises(ValueError):
        generate_trace(P, 1.0, burn_in=2.0)
    with pytest.raises(ValueError):
        generate_trace(P, 5.0, input_signal=np.zeros(10))
    with pytest.raises(ValueError):
        generate_trace(P, 5.0, sample_rate=300.0)


def test_simtrace_validation():
    with pytest.raises(ValueError):
        SimTrace(50.0, np.array([0.0, 0.02, 0.05]), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        SimTrace(50.0, np.array([0.0, 0.02]), np.zeros((3, 1)))


def test_trace_csv_roundtrip(tmp_path):
    u = np.linspace(-3, 0, 250)
    tr = generate_trace(DoubleColumnParams(), 5.0, input_signal=u)
    path = nm.save_trace(tr, tmp_path / "t.csv")
    assert path.read_text().splitlines()[0] == "t,ch0,ch1,u"
    back = nm.load_trace(path)
    np.testing.assert_array_equal(back.eeg, tr.eeg)
    np.testing.assert_array_equal(back.t, tr.t)
    np.testing.assert_array_equal(back.u, tr.u)
    assert back.rate == 50.0
