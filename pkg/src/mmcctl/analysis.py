"""Spectra, ripple and containment metrics, and report generation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .bundle import atomic_write_text
from .model import N_PHASES, samples_per_period

logger = logging.getLogger(__name__)

# steady-state acceptance thresholds (percent)
PURITY_LIMIT = 0.125
RIPPLE_LIMIT = 0.1
SLACK = 2.0
AMPLITUDE_TOL = 0.02
MEAN_TOL = 0.01


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Single-sided amplitude spectrum over an integer number of periods."""

    frequencies: np.ndarray
    amplitudes: np.ndarray
    fundamental_bin: int

    @property
    def fundamental(self) -> float:
        return float(self.amplitudes[self.fundamental_bin])

    @property
    def relative(self) -> np.ndarray:
        """Amplitudes in percent of the fundamental."""
        return 100.0 * self.amplitudes / self.fundamental

    def non_fundamental_max(self, include_dc: bool = True) -> float:
        """Largest non-fundamental component in percent of the fundamental."""
        rel = self.relative.copy()
        rel[self.fundamental_bin] = 0.0
        if not include_dc:
            rel[0] = 0.0
        return float(np.max(np.abs(rel)))

    def amplitude_at(self, frequency: float) -> float:
        k = int(round(frequency / self.frequencies[1]))
        if k >= self.amplitudes.size or abs(self.frequencies[k] - frequency) > 1e-6 * max(1.0, frequency):
            raise ValueError(f"{frequency} Hz is not on the frequency grid")
        return float(self.amplitudes[k])


def spectrum(signal, sample_period: float, fundamental: float) -> Spectrum:
    """Rectangular-window DFT magnitudes, single-sided.

    Bin amplitude is ``2 |X_k| / N`` except at DC (the signed mean) and at
    Nyquist.  The length must be a whole number of fundamental periods.
    """
    x = np.asarray(signal, dtype=float).reshape(-1)
    n_per = samples_per_period(fundamental, sample_period, "fundamental")
    N = x.size
    if N == 0 or N % n_per:
        raise ValueError(f"series length {N} is not a multiple of the {n_per}-sample period")
    X = np.fft.rfft(x)
    amp = 2.0 * np.abs(X) / N
    amp[0] = X[0].real / N
    if N % 2 == 0:
        amp[-1] = np.abs(X[-1]) / N
    freqs = np.fft.rfftfreq(N, sample_period)
    return Spectrum(freqs, amp, N // n_per)


def ripple_metrics(voltage, sample_period: float, grid_frequency: float, output_frequency: float) -> dict:
    """Ripple of a total arm voltage series over a steady-state window.

    ``ripple_percent`` is the largest non-DC Fourier component relative to the
    mean; ``peak_to_peak_percent`` is ``(max - min) / mean``.  Components at
    ``f1``, ``2 f1``, ``f2``, ``2 f2`` and ``f2 +/- f1`` are tabulated.
    """
    v = np.asarray(voltage, dtype=float).reshape(-1)
    if v.size == 0:
        raise ValueError("empty ripple window")
    sp = spectrum(v, sample_period, grid_frequency)
    mean = float(v.mean())
    if mean == 0:
        raise ValueError("ripple is undefined for a zero-mean signal")
    table = {}
    for name, f in (
        ("f1", grid_frequency),
        ("2f1", 2 * grid_frequency),
        ("f2", output_frequency),
        ("2f2", 2 * output_frequency),
        ("f2-f1", output_frequency - grid_frequency),
        ("f2+f1", output_frequency + grid_frequency),
    ):
        try:
            table[name] = sp.amplitude_at(abs(f))
        except ValueError:
            table[name] = float("nan")
    return {
        "mean": mean,
        "ripple_percent": 100.0 * float(np.max(sp.amplitudes[1:])) / abs(mean),
        "peak_to_peak_percent": 100.0 * float(v.max() - v.min()) / abs(mean),
        "components": table,
    }


def ellipse_projection(P, pair: Sequence[int], points: int = 360) -> np.ndarray:
    """Boundary of the shadow of ``{e : e' P e <= 1}`` on two coordinates.

    The shadow is the ellipse ``{p : p' M^-1 p <= 1}`` with ``M`` the matching
    2x2 block of ``P^-1``.  Returns ``points + 1`` rows, last equal to first.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError("P must be square")
    if np.abs(P - P.T).max() > 1e-12 * max(1.0, np.abs(P).max()) or np.linalg.eigvalsh(P)[0] <= 0:
        raise ValueError("P must be symmetric positive definite")
    i, j = pair
    M = np.linalg.inv(P)[np.ix_([i, j], [i, j])]
    L = np.linalg.cholesky(M)
    th = 2.0 * np.pi * np.arange(points + 1) / points
    th[-1] = 0.0
    return (L @ np.vstack([np.cos(th), np.sin(th)])).T


def shadow_value(P, pair: Sequence[int], pts) -> np.ndarray:
    """``p' M^-1 p`` for 2-D points; at most one inside the projected ellipse."""
    i, j = pair
    M = np.linalg.inv(np.asarray(P, dtype=float))[np.ix_([i, j], [i, j])]
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    return np.einsum("ki,ij,kj->k", pts, np.linalg.inv(M), pts)


def points_in_polygon(pts, polygon) -> np.ndarray:
    """Even-odd ray casting; ``polygon`` rows are vertices (closing row optional)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    poly = np.asarray(polygon, dtype=float)
    if np.allclose(poly[0], poly[-1]):
        poly = poly[:-1]
    x, y = pts[:, 0:1], pts[:, 1:2]
    x1, y1 = poly[:, 0], poly[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    crosses = (y1 > y) != (y2 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    return np.count_nonzero(crosses & (x < xint), axis=1) % 2 == 1


def trend_test(values, samples_per_block: int, transient_blocks: int = 10) -> dict:
    """Least-squares slope of block means, with its standard error.

    ``no_growth`` is true when the slope does not exceed twice its standard
    error, i.e. no positive trend is distinguishable from the periodic
    residue.
    """
    v = np.asarray(values, dtype=float)
    nblk = v.size // samples_per_block
    means = v[: nblk * samples_per_block].reshape(nblk, samples_per_block).mean(axis=1)[transient_blocks:]
    if means.size < 3:
        raise ValueError("need at least three blocks after the transient")
    k = np.arange(means.size, dtype=float)
    A = np.vstack([k, np.ones_like(k)]).T
    coef, res, *_ = np.linalg.lstsq(A, means, rcond=None)
    dof = means.size - 2
    resid = means - A @ coef
    s2 = float(resid @ resid) / dof if dof > 0 else 0.0
    se = math.sqrt(s2 / float(((k - k.mean()) ** 2).sum()))
    slope = float(coef[0])
    return {
        "blocks": int(means.size),
        "slope": slope,
        "slope_stderr": se,
        "relative_slope": slope / abs(float(means.mean())) if means.mean() else float("nan"),
        "no_growth": bool(slope <= 2.0 * se),
    }


def steady_state_window(trace, spec, transient_periods: int = 10):
    """Slice of recorded rows after the transient, trimmed to whole grid periods."""
    n_per = samples_per_period(spec.grid_frequency, trace.sample_period, "grid_frequency")
    start = transient_periods * n_per
    usable = (len(trace) - start) // n_per * n_per
    if usable <= 0:
        raise ValueError(f"trace shorter than the {transient_periods}-period transient plus one period")
    return slice(start, start + usable)


def steady_state_metrics(trace, spec, transient_periods: int = 10) -> dict:
    """Per-phase amplitudes, spectral purity and (bilinear scenario) arm-voltage metrics."""
    if len(trace) == 0:
        raise ValueError("empty trace")
    win = steady_state_window(trace, spec, transient_periods)
    Ts = trace.sample_period
    grid_amp, out_amp, grid_pur, out_pur = [], [], [], []
    for m in range(N_PHASES):
        sg = spectrum(trace.y[win, 2 * m], Ts, spec.grid_frequency)
        sz = spectrum(trace.y[win, 2 * m + 1], Ts, spec.output_frequency)
        grid_amp.append(sg.fundamental)
        out_amp.append(sz.fundamental)
        grid_pur.append(sg.non_fundamental_max())
        out_pur.append(sz.non_fundamental_max())
    out = {
        "window_start_s": float(trace.time[win.start]),
        "window_periods": int((win.stop - win.start) // samples_per_period(spec.grid_frequency, Ts)),
        "grid_amplitude": grid_amp,
        "output_amplitude": out_amp,
        "grid_non_fundamental_percent": grid_pur,
        "output_non_fundamental_percent": out_pur,
        "max_abs_error": float(np.max(np.abs(trace.e[win]))),
        "saturation_steps": int(np.count_nonzero(trace.saturation_active)),
    }
    v = trace.arm_voltages
    if v is not None:
        vu, vl = v[win, 0::2], v[win, 1::2]
        common = 0.5 * (vu + vl)
        diff = 0.5 * (vu - vl)
        arms = [ripple_metrics(v[win, i], Ts, spec.grid_frequency, spec.output_frequency) for i in range(6)]
        out.update(
            {
                "common_mode_mean": [float(c) for c in common.mean(axis=0)],
                "differential_mode_mean": [float(d) for d in diff.mean(axis=0)],
                "arm_voltage_mean": [a["mean"] for a in arms],
                "arm_ripple_percent": [a["ripple_percent"] for a in arms],
                "arm_peak_to_peak_percent": [a["peak_to_peak_percent"] for a in arms],
                "arm_ripple_components_a_upper": arms[0]["components"],
            }
        )
        if np.all(np.isfinite(trace.lyapunov_V)):
            n_per = samples_per_period(spec.grid_frequency, Ts)
            out["lyapunov_trend"] = trend_test(trace.lyapunov_V, n_per, transient_periods)
    return out


def acceptance_checks(metrics: dict, spec) -> dict:
    """Steady-state pass/fail flags for a bilinear-scenario run."""
    Ig, Iz = spec.grid_peak_current, spec.output_peak_current
    Vb = spec.arm_voltage_base
    checks = {
        "grid_amplitude": all(abs(a - Ig) <= AMPLITUDE_TOL * Ig for a in metrics["grid_amplitude"]),
        "output_amplitude": all(abs(a - Iz) <= AMPLITUDE_TOL * Iz for a in metrics["output_amplitude"]),
        "grid_purity": max(metrics["grid_non_fundamental_percent"]) <= SLACK * PURITY_LIMIT,
        "output_purity": max(metrics["output_non_fundamental_percent"]) <= SLACK * PURITY_LIMIT,
    }
    if "common_mode_mean" in metrics:
        checks["common_mode_mean"] = all(abs(c - Vb) <= MEAN_TOL * Vb for c in metrics["common_mode_mean"])
        checks["arm_ripple"] = max(metrics["arm_ripple_percent"]) <= SLACK * RIPPLE_LIMIT
        checks["differential_mode_mean"] = all(
            abs(d) <= MEAN_TOL * spec.grid_peak_voltage for d in metrics["differential_mode_mean"]
        )
    if "lyapunov_trend" in metrics:
        checks["deviation_bounded"] = metrics["lyapunov_trend"]["no_growth"]
    return checks


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _spectrum_csv(spectra: dict) -> str:
    names = sorted(spectra)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["signal", "frequency_hz", "amplitude", "percent_of_fundamental"])
    for name in names:
        sp = spectra[name]
        for f, a, r in zip(sp.frequencies, sp.amplitudes, sp.relative):
            w.writerow([name, f"{f:.17g}", f"{a:.17g}", f"{r:.17g}"])
    return buf.getvalue()


def report(
    trace,
    controller,
    certification=None,
    references=None,
    *,
    spec,
    out_dir,
    verification=None,
    transient_periods: int = 10,
    plots: bool = False,
) -> dict:
    """Write ``summary.json``, ``spectra.csv`` and ``trace.csv`` into ``out_dir``.

    Returns the summary.  Nothing is written if the metrics cannot be
    computed (for example for an empty trace).  Optional SVG plots need
    matplotlib.
    """
    import pathlib

    if trace is None or len(trace) == 0:
        raise ValueError("cannot report on an empty trace")
    metrics = steady_state_metrics(trace, spec, transient_periods)
    checks = acceptance_checks(metrics, spec) if trace.scenario == "bilinear" else {}
    win = steady_state_window(trace, spec, transient_periods)
    Ts = trace.sample_period
    spectra = {
        "grid_current_a": spectrum(trace.y[win, 0], Ts, spec.grid_frequency),
        "output_current_a": spectrum(trace.y[win, 1], Ts, spec.output_frequency),
    }
    if trace.arm_voltages is not None:
        spectra["arm_voltage_a_upper"] = spectrum(trace.arm_voltages[win, 0], Ts, spec.grid_frequency)
    summary = {
        "scenario": trace.scenario,
        "targets": {
            "grid_peak_current": spec.grid_peak_current,
            "output_peak_current": spec.output_peak_current,
            "arm_voltage_base": spec.arm_voltage_base,
        },
        "steady_state": metrics,
        "containment": {
            "max_levelset": float(np.nanmax(trace.levelset)) if np.any(np.isfinite(trace.levelset)) else None,
        },
        "checks": checks,
        "all_checks_pass": bool(all(checks.values())) if checks else None,
        "controller": {"Kx_diagonal": np.diag(controller.Kx), **({"verification": verification} if verification else {})},
    }
    if certification is not None:
        summary["certification"] = certification.as_dict()
    if references is not None:
        summary["references"] = references.as_record() if hasattr(references, "as_record") else references
    text = json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n"
    spectra_text = _spectrum_csv(spectra)
    trace_buf = io.StringIO()
    trace.write_csv(trace_buf)

    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "summary.json", text)
    atomic_write_text(out / "spectra.csv", spectra_text)
    atomic_write_text(out / "trace.csv", trace_buf.getvalue())
    if plots:
        _plots(trace, spectra, controller, out)
    return summary


def _plots(trace, spectra, controller, out):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib not installed; skipping plots")
        return
    # fixed metadata keeps the SVG byte-stable across runs
    meta = {"Date": None, "Creator": None}
    fig, ax = plt.subplots(2, 1, figsize=(7, 5))
    ax[0].plot(trace.time, trace.y[:, 0::2], lw=0.6)
    ax[0].set_ylabel("grid current [A]")
    ax[1].plot(trace.time, trace.y[:, 1::2], lw=0.6)
    ax[1].set_ylabel("output current [A]")
    ax[1].set_xlabel("time [s]")
    fig.savefig(out / "currents.svg", metadata=meta)
    plt.close(fig)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for name, sp in sorted(spectra.items()):
        rel = sp.relative.copy()
        ax.semilogy(sp.frequencies[1:], np.maximum(np.abs(rel[1:]), 1e-8), lw=0.6, label=name)
    ax.set_xlim(0, 3000)
    ax.set_xlabel("frequency [Hz]")
    ax.set_ylabel("% of fundamental")
    ax.legend(fontsize=7)
    fig.savefig(out / "spectra.svg", metadata=meta)
    plt.close(fig)
    if np.any(np.isfinite(trace.e_x)):
        fig, ax = plt.subplots(figsize=(4, 4))
        poly = ellipse_projection(controller.P, (0, 1))
        ax.plot(poly[:, 0], poly[:, 1], "k-", lw=0.8)
        ax.plot(trace.e_x[:, 0], trace.e_x[:, 1], lw=0.5)
        ax.set_xlabel("e_x1 [A]")
        ax.set_ylabel("e_x2 [A]")
        fig.savefig(out / "levelset.svg", metadata=meta)
        plt.close(fig)
