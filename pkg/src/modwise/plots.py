"""Matplotlib figures for a benchmark manifest, written as PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import DIRECTION, GROUPS, MODE_LABELS, MODE_ORDER, PRIMARY, RunManifest  # noqa: E402
from .metrics import HORIZONS  # noqa: E402

COLORS = {"none": "#4d4d4d", "image-agnostic": "#6baed6", "image-specific": "#2171b5", "module-wise": "#cb181d"}
_LABELS = {col: label for _, cols in GROUPS for col, label, _ in cols}


def _modes(manifest: RunManifest) -> list[str]:
    return [m for m in MODE_ORDER if m in manifest.modes and manifest.modes[m].aggregate is not None]


def degradation_figure(manifest: RunManifest, path) -> Path:
    """One panel per task group showing its headline column for every mode."""
    modes = _modes(manifest)
    fig, axes = plt.subplots(1, len(PRIMARY), figsize=(3.0 * len(PRIMARY), 3.2))
    for ax, (group, col) in zip(axes, PRIMARY.items()):
        vals = [getattr(manifest.modes[m].aggregate, col) for m in modes]
        vals = [np.nan if v is None else v for v in vals]
        ax.bar(range(len(modes)), vals, color=[COLORS[m] for m in modes])
        ax.set_xticks(range(len(modes)))
        ax.set_xticklabels([MODE_LABELS[m] for m in modes], rotation=35, ha="right", fontsize=8)
        ax.set_title(f"{group}: {_LABELS[col]} {DIRECTION[col]}", fontsize=9)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def horizon_figure(manifest: RunManifest, path) -> Path:
    """Planning L2 at each horizon, one line per mode."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for m in _modes(manifest):
        agg = manifest.modes[m].aggregate
        ax.plot(HORIZONS, [agg.plan_l2_1s, agg.plan_l2_2s, agg.plan_l2_3s], marker="o", color=COLORS[m],
                label=MODE_LABELS[m])
    ax.set_xlabel("horizon (s)")
    ax.set_ylabel("plan L2 (m)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def attack_curve_figure(manifest: RunManifest, path) -> Path:
    """Mean adversarial loss per iteration, relative to the clean task loss."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for m in ("image-specific", "module-wise"):
        r = manifest.modes.get(m)
        if r is None or not r.rows:
            continue
        curves = np.array([[v / row["losses"]["clean"]["l_att"] for v in row["trace"]] for row in r.rows])
        ax.plot(np.arange(curves.shape[1]), curves.mean(axis=0), marker=".", color=COLORS[m], label=MODE_LABELS[m])
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("L_adv / clean L_att")
    if ax.lines:
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_figures(manifest: RunManifest, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not _modes(manifest):
        return []
    return [degradation_figure(manifest, out_dir / "degradation.png"),
            horizon_figure(manifest, out_dir / "plan_l2_horizons.png"),
            attack_curve_figure(manifest, out_dir / "attack_curves.png")]
