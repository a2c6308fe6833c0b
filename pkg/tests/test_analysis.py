import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmcctl.analysis import (
    acceptance_checks,
    ellipse_projection,
    points_in_polygon,
    report,
    ripple_metrics,
    shadow_value,
    spectrum,
    steady_state_metrics,
    trend_test,
)
from mmcctl.simulator import SimConfig, run_closed_loop

TS = 2e-5
N1 = 1000  # samples per 50 Hz period


def tone(amp, f, periods=4, phase=0.0, dc=0.0):
    t = TS * np.arange(periods * N1)
    return dc + amp * np.cos(2 * np.pi * f * t + phase)


def test_single_tone():
    sp = spectrum(tone(3.0, 50.0, phase=0.7), TS, 50.0)
    assert sp.fundamental == pytest.approx(3.0, abs=1e-9)
    others = np.delete(sp.amplitudes, sp.fundamental_bin)
    assert np.all(np.abs(others) < 1e-9 * 3.0)


def test_constant_signal_dc_bin():
    sp = spectrum(np.full(2 * N1, -4.5), TS, 50.0)
    assert sp.amplitudes[0] == pytest.approx(-4.5, abs=1e-12)


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        spectrum(np.ones(N1 + 3), TS, 50.0)
    with pytest.raises(ValueError):
        spectrum(np.ones(0), TS, 50.0)


def test_amplitude_at_off_grid():
    sp = spectrum(tone(1.0, 50.0), TS, 50.0)
    assert sp.amplitude_at(1000.0) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError):
        sp.amplitude_at(30.0)


@settings(max_examples=25)
@given(
    amps=st.lists(st.floats(-10, 10), min_size=4, max_size=4),
    dc=st.floats(-5, 5),
)
def test_parseval(amps, dc):
    t = TS * np.arange(2 * N1)
    x = dc + sum(a * np.cos(2 * np.pi * 50.0 * (k + 1) * t + k) for k, a in enumerate(amps))
    sp = spectrum(x, TS, 50.0)
    # single-sided: mean square = DC^2 + sum(A_k^2) / 2
    lhs = np.sum(sp.amplitudes[1:] ** 2) + 2 * sp.amplitudes[0] ** 2
    rhs = 2 * np.mean(x**2)
    assert lhs == pytest.approx(rhs, rel=1e-6, abs=1e-12)


@settings(max_examples=25)
@given(scale=st.floats(1e-3, 1e3), sign=st.sampled_from([-1.0, 1.0]))
def test_percent_metrics_scale_invariant(scale, sign):
    x = tone(2.0, 50.0) + tone(0.01, 150.0) + 35.0
    sp1, sp2 = spectrum(x, TS, 50.0), spectrum(sign * scale * x, TS, 50.0)
    assert sp2.non_fundamental_max() == pytest.approx(sp1.non_fundamental_max(), rel=1e-9)
    r1 = ripple_metrics(x, TS, 50.0, 1000.0)
    r2 = ripple_metrics(sign * scale * x, TS, 50.0, 1000.0)
    assert r2["ripple_percent"] == pytest.approx(r1["ripple_percent"], rel=1e-9)
    assert r2["peak_to_peak_percent"] == pytest.approx(r1["peak_to_peak_percent"], rel=1e-9)


def test_ripple_of_constant():
    r = ripple_metrics(np.full(N1, 35e3), TS, 50.0, 1000.0)
    assert r["mean"] == 35e3
    assert r["ripple_percent"] == pytest.approx(0.0, abs=1e-12)
    assert r["peak_to_peak_percent"] == 0.0


def test_ripple_components():
    v = 35e3 + tone(35.0, 1000.0) + tone(7.0, 950.0)
    r = ripple_metrics(v, TS, 50.0, 1000.0)
    assert r["ripple_percent"] == pytest.approx(0.1, rel=1e-9)
    assert r["components"]["f2"] == pytest.approx(35.0, rel=1e-9)
    assert r["components"]["f2-f1"] == pytest.approx(7.0, rel=1e-9)


def test_ripple_empty_window():
    with pytest.raises(ValueError):
        ripple_metrics([], TS, 50.0, 1000.0)


def test_ellipse_unit_circle():
    poly = ellipse_projection(np.eye(6), (0, 1))
    assert poly.shape == (361, 2)
    assert np.allclose(np.hypot(poly[:, 0], poly[:, 1]), 1.0)
    assert np.array_equal(poly[0], poly[-1])


def test_ellipse_semi_axes():
    P = np.diag([4.0, 1.0, 1.0, 1.0, 1.0, 1.0])
    poly = ellipse_projection(P, (0, 1))
    assert np.abs(poly[:, 0]).max() == pytest.approx(0.5)
    assert np.abs(poly[:, 1]).max() == pytest.approx(1.0)


@pytest.mark.parametrize("P", [np.diag([1.0, -1.0, 1, 1, 1, 1]), np.triu(np.ones((6, 6))) + np.eye(6)])
def test_ellipse_rejects_non_pd(P):
    with pytest.raises(ValueError):
        ellipse_projection(P, (0, 1))


def test_projection_soundness(table1):
    P = table1.controller.P
    L = np.linalg.cholesky(np.linalg.inv(P))
    d = np.random.default_rng(0).normal(size=(10_000, 6))
    boundary = (L @ (d / np.linalg.norm(d, axis=1, keepdims=True)).T).T
    for pair in [(0, 1), (2, 3), (0, 5)]:
        vals = shadow_value(P, pair, boundary[:, pair])
        assert vals.max() <= 1.0 + 1e-9
        # a slightly shrunk copy of every point must be inside the polyline
        poly = ellipse_projection(P, pair, points=3600)
        assert points_in_polygon(0.99 * boundary[:, pair], poly).all()


def test_simulated_errors_inside_projection(table1):
    P = table1.controller.P
    e0 = 0.9 * np.linalg.cholesky(np.linalg.inv(P)) @ (np.ones(6) / np.sqrt(6))
    from mmcctl.model import exogenous_initial_state

    x0 = table1.plant.sylvester.Pi @ exogenous_initial_state(table1.plant.spec, 0.0) + e0
    tr = run_closed_loop(table1.plant.model, table1.controller, SimConfig("linear", 2000, initial_reduced_state=x0))
    for m in range(3):
        pair = (2 * m, 2 * m + 1)
        assert shadow_value(P, pair, tr.e_x[:, pair]).max() <= 1.0 + 1e-9


def test_polygon_membership_square():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]], dtype=float)
    inside = points_in_polygon([[0.5, 0.5], [1.5, 0.5], [0.5, -0.1]], sq)
    assert inside.tolist() == [True, False, False]


def test_trend_flat_vs_growing():
    rng = np.random.default_rng(1)
    flat = 1.0 + 0.01 * rng.normal(size=40 * 100)
    assert trend_test(flat, 100)["no_growth"]
    growing = np.linspace(1.0, 2.0, 40 * 100)
    res = trend_test(growing, 100)
    assert not res["no_growth"] and res["slope"] > 0


def test_trend_needs_blocks():
    with pytest.raises(ValueError):
        trend_test(np.ones(1200), 100)


def test_acceptance_checks_flags():
    from conftest import TABLE1_PORTS

    spec = TABLE1_PORTS.with_output_current(101.15, 0.0)
    good = {
        "grid_amplitude": [80.0] * 3,
        "output_amplitude": [101.0] * 3,
        "grid_non_fundamental_percent": [0.1] * 3,
        "output_non_fundamental_percent": [0.1] * 3,
    }
    assert all(acceptance_checks(good, spec).values())
    bad = dict(good, grid_non_fundamental_percent=[0.1, 0.3, 0.1])
    assert not acceptance_checks(bad, spec)["grid_purity"]


def test_report_files_and_determinism(tmp_path, table1):
    tr = run_closed_loop(
        table1.plant.model, table1.controller, SimConfig(steps=15 * N1), Q_phase=table1.certificate.Q_phase
    )
    kw = dict(spec=table1.plant.spec, certification=table1.certificate, references=table1.plant.sigma)
    s1 = report(tr, table1.controller, out_dir=tmp_path / "a", **kw)
    report(tr, table1.controller, out_dir=tmp_path / "b", **kw)
    for name in ("summary.json", "spectra.csv", "trace.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["scenario"] == "bilinear"
    assert set(summary["checks"]) >= {"grid_amplitude", "output_purity", "arm_ripple", "deviation_bounded"}
    assert summary["all_checks_pass"] == s1["all_checks_pass"]


def test_report_plots(tmp_path, table1):
    pytest.importorskip("matplotlib")
    tr = run_closed_loop(table1.plant.model, table1.controller, SimConfig(steps=12 * N1))
    report(tr, table1.controller, spec=table1.plant.spec, out_dir=tmp_path, plots=True)
    for name in ("currents.svg", "spectra.svg", "levelset.svg"):
        assert (tmp_path / name).stat().st_size > 0


def test_empty_trace_writes_nothing(tmp_path, table1):
    tr = run_closed_loop(table1.plant.model, table1.controller, SimConfig(steps=10))
    empty = tr.__class__(**{k: (v[:0] if isinstance(v, np.ndarray) else v) for k, v in vars(tr).items()})
    with pytest.raises(ValueError):
        report(empty, table1.controller, spec=table1.plant.spec, out_dir=tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_short_trace_rejected(table1):
    tr = run_closed_loop(table1.plant.model, table1.controller, SimConfig(steps=5 * N1))
    with pytest.raises(ValueError):
        steady_state_metrics(tr, table1.plant.spec)
