import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmcctl import _kernels
from mmcctl.analysis import steady_state_metrics, steady_state_window
from mmcctl.errors import ConfigError, SimulationDiverged
from mmcctl.model import exogenous_initial_state, exogenous_matrix, samples_per_period
from mmcctl.simulator import (
    SimConfig,
    SimTrace,
    exogenous_step,
    run_closed_loop,
    steady_state_trajectories,
)
from mmcctl.synthesis import Controller, closed_loop_matrix, synthesize


def test_exogenous_full_grid_rotation(table1):
    S = table1.plant.model.S
    w0 = exogenous_initial_state(table1.plant.spec, 0.4)
    w = w0.copy()
    for _ in range(samples_per_period(50.0, 2e-5)):
        w = exogenous_step(S, w)
    assert np.abs(w[:6] - w0[:6]).max() <= 1e-9 * np.abs(w0[:6]).max()


def test_exogenous_amplitude_invariant(table1):
    S = table1.plant.model.S
    w = exogenous_initial_state(table1.plant.spec, 0.4)
    target = w[0] ** 2 + w[1] ** 2
    for _ in range(100_000):
        w = S @ w
    assert w[0] ** 2 + w[1] ** 2 == pytest.approx(target, rel=1e-7)
    assert w[6] ** 2 + w[7] ** 2 == pytest.approx(10e3**2, rel=1e-7)


def test_output_quadrature_quarter_period(table1):
    # 1 kHz has 12.5 samples per quarter period at 50 kHz, so use 500 Hz (25 samples)
    spec = table1.plant.spec.__class__(25e3, 50.0, 10e3, 500.0, 80.0)
    S = exogenous_matrix(table1.cfg.circuit, spec)
    quarter = samples_per_period(500.0, 2e-5) // 4
    series = [exogenous_initial_state(spec, 0.3)]
    for _ in range(quarter * 4):
        series.append(S @ series[-1])
    series = np.array(series)
    # v' now equals v a quarter output period later
    assert np.allclose(series[:-quarter, 7], series[quarter:, 6], rtol=0, atol=1e-9 * 10e3)


def test_steady_state_trajectories_zero(table1):
    xs, us = steady_state_trajectories(table1.plant.sylvester, np.zeros((5, 8)))
    assert not xs.any() and not us.any()


def test_steady_state_trajectories_track_reference(table1):
    m, sol = table1.plant.model, table1.plant.sylvester
    W = [exogenous_initial_state(table1.plant.spec, 0.0)]
    for _ in range(999):
        W.append(m.S @ W[-1])
    W = np.array(W)
    xs, us = steady_state_trajectories(sol, W)
    r = W @ m.O.T
    assert np.abs(xs @ m.C_bar.T - r).max() <= 1e-9 * np.abs(r).max()
    nxt = xs[:-1] @ m.A_bar.T + us[:-1] @ m.B_bar.T + W[:-1] @ m.E.T
    assert np.abs(nxt - xs[1:]).max() <= 1e-9 * np.abs(xs).max()


@pytest.mark.parametrize("kw", [dict(steps=0), dict(steps=2.5), dict(scenario="pwm"), dict(record_stride=0),
                                dict(total_arm_voltage_init=-1.0), dict(initial_full_state=np.zeros(12)),
                                dict(initial_reduced_state=np.zeros(5))])
def test_sim_config_rejects(kw):
    with pytest.raises(ConfigError):
        SimConfig(**kw)


def _linear(case, x0, steps, jit=None):
    cfg = SimConfig(scenario="linear", steps=steps, initial_reduced_state=x0)
    return run_closed_loop(case.plant.model, case.controller, cfg, jit=jit)


def test_zero_error_from_steady_state_start(table1):
    w0 = exogenous_initial_state(table1.plant.spec, 0.0)
    tr = _linear(table1, table1.plant.sylvester.Pi @ w0, 100_000)
    rnorm = np.linalg.norm(tr.r, axis=1)
    assert np.all(np.linalg.norm(tr.e, axis=1) <= 1e-9 * np.maximum(rnorm, 1.0))


def test_linear_decay_rate_fixed_gain(table1):
    ctrl = synthesize(table1.plant.model, table1.plant.polytopes, "max-margin", fixed_Kx=-148.62 * np.eye(6))
    cfg = SimConfig(scenario="linear", steps=6, initial_reduced_state=np.zeros(6))
    tr = run_closed_loop(table1.plant.model, ctrl, cfg)
    ratios = np.linalg.norm(tr.e_x[1:], axis=1) / np.linalg.norm(tr.e_x[:-1], axis=1)
    assert np.allclose(ratios, 0.0088667, rtol=1e-3)


def test_linear_decay_rate_synthesized(table1):
    # the max-margin gain is close to deadbeat, so bound the decay instead of taking ratios
    rho = max(abs(np.linalg.eigvals(closed_loop_matrix(table1.plant.model, table1.controller.Kx))))
    assert rho < 1e-3
    tr = _linear(table1, np.zeros(6), 5)
    n0 = np.linalg.norm(tr.e_x[0])
    for k in range(1, 5):
        assert np.linalg.norm(tr.e_x[k]) <= rho**k * n0 + 1e-9 * n0


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")
def test_jit_matches_numpy_linear(table2):
    a = _linear(table2, np.ones(6), 3000, jit=True)
    b = _linear(table2, np.ones(6), 3000, jit=False)
    assert np.allclose(a.x, b.x, rtol=1e-12, atol=1e-12)
    assert np.allclose(a.u, b.u, rtol=1e-12, atol=1e-9)


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")
def test_jit_matches_numpy_bilinear(table1):
    cfg = SimConfig(scenario="bilinear", steps=3000)
    a = run_closed_loop(table1.plant.model, table1.controller, cfg, jit=True)
    b = run_closed_loop(table1.plant.model, table1.controller, cfg, jit=False)
    assert np.allclose(a.x, b.x, rtol=1e-10, atol=1e-8)
    assert np.array_equal(a.saturation_active, b.saturation_active)


@pytest.mark.parametrize("jit", [False, True])
def test_divergence_guard(table1, jit):
    if jit and not _kernels.HAVE_NUMBA:
        pytest.skip("numba not installed")
    bad = Controller(+1e5 * np.eye(6), np.zeros((6, 8)), np.eye(6))
    cfg = SimConfig(scenario="linear", steps=5000, initial_reduced_state=np.ones(6))
    with pytest.raises(SimulationDiverged) as exc:
        run_closed_loop(table1.plant.model, bad, cfg, jit=jit)
    assert 0 < exc.value.step < 5000


def test_csv_roundtrip(tmp_path, table1):
    tr = run_closed_loop(
        table1.plant.model, table1.controller, SimConfig(steps=200, record_stride=2), Q_phase=table1.certificate.Q_phase
    )
    path = tmp_path / "trace.csv"
    with open(path, "w", newline="") as fh:
        tr.write_csv(fh)
    back = SimTrace.read_csv(path)
    assert back.columns() == tr.columns()
    assert np.array_equal(back.matrix(), tr.matrix())
    assert back.sample_period == pytest.approx(tr.sample_period)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:2] == ["time", "w1"] and header[-3:] == ["V_lyap", "levelset", "sat_flag"]
    assert len(header) == 1 + 8 + 12 + 6 * 6 + 12 + 3


def test_record_stride(table1):
    tr = _linear(table1, np.zeros(6), 100)
    tr2 = run_closed_loop(
        table1.plant.model, table1.controller, SimConfig(scenario="linear", steps=100, record_stride=10)
    )
    assert len(tr2) == 10
    assert np.array_equal(tr2.x, tr.x[::10])


def test_linear_scenario_has_nan_deviation(table1):
    tr = _linear(table1, np.zeros(6), 10)
    assert np.all(np.isnan(tr.eps)) and np.all(np.isnan(tr.lyapunov_V))
    buf = io.StringIO()
    tr.write_csv(buf)
    assert "xbar1" in buf.getvalue().splitlines()[0]


@pytest.mark.xfail(
    strict=True,
    reason="the L di/dt drop at 1 kHz pushes the demanded arm voltage past Vg + Vz, so the clamp engages",
)
def test_saturation_inactive_in_nominal_operation(case):
    assert not case.bilinear_trace.saturation_active.any()


def test_saturation_is_rare(case):
    # the clamp engages, but only on a small fraction of steps
    frac = case.bilinear_trace.saturation_active.mean()
    assert frac < 0.1


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), radius=st.floats(0.0, 1.0))
def test_level_set_containment_linear(table1, seed, radius):
    P = table1.controller.P
    d = np.random.default_rng(seed).normal(size=6)
    e0 = np.linalg.cholesky(np.linalg.inv(P)) @ (radius * d / np.linalg.norm(d))
    w0 = exogenous_initial_state(table1.plant.spec, 0.0)
    tr = _linear(table1, table1.plant.sylvester.Pi @ w0 + e0, 4000)
    assert tr.levelset[0] == pytest.approx(radius**2, abs=1e-9)
    assert np.all(tr.levelset <= 1.0 + 1e-9)


def test_energy_bookkeeping(case):
    tr, spec = case.bilinear_trace, case.plant.spec
    win = steady_state_window(tr, spec, 10)
    x, W = tr.x[win], tr.w[win]
    iu, il = x[:, [0, 4, 8]], x[:, [1, 5, 9]]
    p_grid = np.mean(W[:, [0, 2, 4]] * (iu - il) / 2, axis=0)
    p_out = np.mean(W[:, 6:7] * (iu + il) / 2, axis=0)
    losses = case.cfg.circuit.arm_resistance * np.mean(iu**2 + il**2, axis=0)
    assert np.all(np.abs(p_grid - p_out) <= case.plant.sigma.power_mismatch + losses)


def test_arm_voltage_modes(case):
    m = steady_state_metrics(case.bilinear_trace, case.plant.spec)
    vb = case.plant.spec.arm_voltage_base
    assert np.allclose(m["common_mode_mean"], vb, rtol=0.01)
    assert np.all(np.abs(m["differential_mode_mean"]) <= 0.01 * case.plant.spec.grid_peak_voltage)


def test_deviation_bounded(case):
    tr = case.bilinear_trace
    assert np.all(np.isfinite(tr.eps))
    n_per = samples_per_period(case.plant.spec.grid_frequency, tr.sample_period)
    assert len(tr) >= 20 * n_per
    peaks = np.abs(tr.eps).reshape(-1, n_per, 12).max(axis=(1, 2))
    # the last ten periods never exceed the largest envelope seen after the transient
    assert peaks[-10:].max() <= peaks[10:].max()


def test_currents_reach_targets(table1):
    m = steady_state_metrics(table1.bilinear_trace, table1.plant.spec)
    assert np.allclose(m["grid_amplitude"], 80.0, rtol=0.02)
    assert np.allclose(m["output_amplitude"], 101.15, rtol=0.02)


def test_ideal_copy_keeps_voltages(table1):
    tr = run_closed_loop(table1.plant.model, table1.controller, SimConfig(steps=500))
    xt = tr.x - tr.eps
    assert np.all(xt[:, [2, 3, 6, 7, 10, 11]] == table1.plant.spec.arm_voltage_base)
