"""Self-contained SVG line charts of position standard deviations and mean gains."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids and no timestamp, so identical data gives identical files
matplotlib.rcParams["svg.hashsalt"] = "rknet"
matplotlib.rcParams["svg.fonttype"] = "none"
_SVG_META = {"Date": None, "Creator": "rknet"}


def _label(estimator_id: str) -> str:
    parts = estimator_id.split(":")
    if parts[0] == "rkn" and len(parts) >= 3:
        return f"{parts[1]} ({parts[2][:6]})"
    return {"kf:oracle": "o-KF", "kf:fixed=1": "so-KF"}.get(estimator_id, estimator_id)


def plot_std(data: dict, path: str | Path) -> Path:
    """Estimated (solid) and empirical (dash-dot) RMS position standard deviation."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for i, (est, cols) in enumerate(data.items()):
        if "sd_pos_est" not in cols:
            raise ValueError("metrics file lacks sd_pos_est/sd_pos_emp columns")
        color = f"C{i % 10}"
        ax.plot(cols["t"], cols["sd_pos_est"], "-", color=color, label=f"{_label(est)} estimated")
        ax.plot(cols["t"], cols["sd_pos_emp"], "-.", color=color, label=f"{_label(est)} empirical")
    ax.set_xlabel("t")
    ax.set_ylabel("position standard deviation")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return Path(path)


def plot_gains(data: dict, path: str | Path) -> Path:
    """Mean position gain over the test set for every estimator."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for i, (est, cols) in enumerate(data.items()):
        ax.plot(cols["t"], cols["k_pos_mean"], "-", color=f"C{i % 10}", label=_label(est))
    ax.set_xlabel("t")
    ax.set_ylabel("mean position gain")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return Path(path)
