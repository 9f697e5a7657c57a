"""Self-contained HTML evaluation reports.

One file, no external resources: metric tables plus inline SVG plots of
commanded-versus-achieved channels and per-joint velocity spectra.
"""

from __future__ import annotations

import html
import io
import json
from pathlib import Path

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evaluation import CHANNELS, MotionMetrics, Recording, TrackingMetrics
from .serialization import read_blob, write_blob

_STYLE = """
body { font-family: sans-serif; margin: 2em; color: #222; }
h1, h2, h3 { color: #113; }
table { border-collapse: collapse; margin: 1em 0; }
th, td { border: 1px solid #aaa; padding: 4px 10px; text-align: right; }
th { background: #eef; }
td:first-child, th:first-child { text-align: left; }
.plot { margin: 1em 0; }
"""


def _fig_to_svg(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg")
    plt.close(fig)
    svg = buf.getvalue()
    # strip the XML prolog so the SVG can be inlined
    return svg[svg.index("<svg"):]


def _tracking_plot(rec: Recording) -> str:
    fig, axes = plt.subplots(2, 1, figsize=(7, 4.5), sharex=True)
    achieved = [rec.base_vel[:, 0, 0], rec.base[:, 0, 1]]
    labels = ["forward velocity [m/s]", "base height [m]"]
    for ax, ach, cmd, label in zip(
            axes, achieved, [rec.commands[:, 0, 0], rec.commands[:, 0, 1]],
            labels):
        ax.plot(rec.time, cmd, "k--", lw=1.0, label="commanded")
        ax.plot(rec.time, ach, "-", lw=1.0, label="achieved")
        ax.set_ylabel(label)
        ax.legend(loc="upper right", fontsize=8)
    axes[-1].set_xlabel("time [s]")
    fig.suptitle(f"{rec.scenario}: command tracking (env 0)")
    fig.tight_layout()
    return _fig_to_svg(fig)


def _spectrum_plot(rec: Recording) -> str:
    fig, ax = plt.subplots(figsize=(7, 3.2))
    n = rec.qd.shape[0]
    freqs = np.fft.rfftfreq(n, rec.dt)
    window = np.hanning(n)[:, None]
    for j, name in enumerate(rec.joint_names):
        x = rec.qd[:, 0, j]
        power = np.abs(np.fft.rfft((x - x.mean()) * window[:, 0])) ** 2
        ax.semilogy(freqs[1:], np.maximum(power[1:], 1e-12), lw=0.8,
                    label=name)
    ax.axvline(10.0, color="r", ls=":", lw=1.0)
    ax.set_xlabel("frequency [Hz]")
    ax.set_ylabel("velocity power")
    ax.set_title(f"{rec.scenario}: joint-velocity spectra (env 0)")
    ax.legend(fontsize=7, ncol=3)
    fig.tight_layout()
    return _fig_to_svg(fig)


def _motion_table(mm: MotionMetrics) -> str:
    head = ("<tr><th>joint</th><th>rms accel [rad/s^2]</th>"
            "<th>rms jerk [rad/s^3]</th><th>limit violation</th>"
            "<th>hf energy ratio</th></tr>")
    rows = []
    for j, name in enumerate(mm.joint_names):
        rows.append(
            f"<tr><td>{html.escape(name)}</td>"
            f"<td>{mm.rms_accel[j]:.3f}</td><td>{mm.rms_jerk[j]:.1f}</td>"
            f"<td>{mm.limit_violation[j]:.4f}</td>"
            f"<td>{mm.hf_energy[j]:.4f}</td></tr>")
    agg = mm.aggregates()
    rows.append(
        "<tr><td><b>mean</b></td>"
        f"<td>{agg['rms_accel_mean']:.3f}</td>"
        f"<td>{agg['rms_jerk_mean']:.1f}</td>"
        f"<td>{agg['limit_violation_mean']:.4f}</td>"
        f"<td>{agg['hf_energy_mean']:.4f}</td></tr>")
    return f"<table>{head}{''.join(rows)}</table>"


def _tracking_table(tm: TrackingMetrics) -> str:
    head = "<tr><th>channel</th><th>rmse mean</th><th>rmse std</th></tr>"
    rows = "".join(
        f"<tr><td>{ch}</td><td>{tm.mean[ch]:.4f}</td>"
        f"<td>{tm.std[ch]:.4f}</td></tr>" for ch in CHANNELS)
    return f"<table>{head}{rows}</table>"


def render_report(scenarios: list[dict], metadata: dict,
                  out_path: str | Path) -> Path:
    """Write a standalone HTML report.

    ``scenarios`` is a list of dicts with keys ``recording`` (Recording),
    ``motion`` (MotionMetrics) and ``tracking`` (TrackingMetrics).
    """
    parts = [f"<!DOCTYPE html><html><head><meta charset='utf-8'>"
             f"<title>evaluation report</title><style>{_STYLE}</style>"
             f"</head><body><h1>Evaluation report</h1>"]
    meta_rows = "".join(
        f"<tr><td>{html.escape(str(k))}</td>"
        f"<td>{html.escape(str(v))}</td></tr>"
        for k, v in sorted(metadata.items()))
    parts.append(f"<table>{meta_rows}</table>")

    if not scenarios:
        parts.append("<p><b>No scenarios evaluated.</b></p>")
    for sc in scenarios:
        rec: Recording = sc["recording"]
        parts.append(f"<h2>{html.escape(rec.scenario)}</h2>")
        parts.append("<h3>Tracking</h3>")
        parts.append(_tracking_table(sc["tracking"]))
        parts.append("<h3>Motion quality</h3>")
        parts.append(_motion_table(sc["motion"]))
        parts.append(f"<div class='plot'>{_tracking_plot(rec)}</div>")
        parts.append(f"<div class='plot'>{_spectrum_plot(rec)}</div>")
    parts.append("</body></html>")

    out_path = Path(out_path)
    out_path.write_text("".join(parts))
    return out_path


_REC_ARRAYS = ("time", "commands", "base", "base_vel", "q", "qd", "actions")


def save_recordings(recordings: list[Recording], path: str | Path) -> Path:
    """Persist recorded trajectories so reports can be re-rendered later."""
    meta, arrays = [], {}
    for i, rec in enumerate(recordings):
        meta.append({"scenario": rec.scenario, "dt": rec.dt,
                     "joint_names": list(rec.joint_names),
                     "reward_terms": sorted(rec.reward_terms)})
        for name in _REC_ARRAYS:
            arrays[f"{i}/{name}"] = getattr(rec, name)
        for term, v in rec.reward_terms.items():
            arrays[f"{i}/reward/{term}"] = v
        arrays[f"{i}/diverged"] = rec.diverged.astype(float)
    return write_blob(path, "recordings", {"scenarios": meta}, arrays)


def load_recordings(path: str | Path) -> list[Recording]:
    meta, arrays = read_blob(path, expected_kind="recordings")
    out = []
    for i, m in enumerate(meta["scenarios"]):
        out.append(Recording(
            scenario=m["scenario"], dt=m["dt"],
            joint_names=tuple(m["joint_names"]),
            reward_terms={t: arrays[f"{i}/reward/{t}"]
                          for t in m["reward_terms"]},
            diverged=arrays[f"{i}/diverged"].astype(bool),
            **{name: arrays[f"{i}/{name}"] for name in _REC_ARRAYS}))
    return out


def metrics_json(scenarios: list[dict], metadata: dict) -> str:
    """The report's numbers as machine-readable JSON."""
    out = {"metadata": {k: str(v) for k, v in metadata.items()},
           "scenarios": []}
    for sc in scenarios:
        out["scenarios"].append({
            "name": sc["recording"].scenario,
            "tracking": sc["tracking"].as_dict(),
            "motion": sc["motion"].as_dict(),
            "diverged_envs": int(sc["recording"].diverged.sum()),
        })
    return json.dumps(out, indent=2, sort_keys=True)
