"""SVG plots of Stage-2/Stage-3 score curves along the range axis."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Fixed salt and no date stamp keep the SVG bytes stable across runs.
_RC = {"svg.hashsalt": "ric-fusion", "font.size": 9, "axes.spines.top": False, "axes.spines.right": False}


def profile_plot(path, profile, pixel: float, range_mono: float, range_gt: float | None = None,
                 stage3=None, title: str = "") -> Path:
    """Plot a matching profile against absolute range with monocular and GT markers.

    ``stage3`` (65 Stage-3 probabilities on the 0.1 m grid) goes on a twin axis when given.
    """
    s = np.asarray(profile, dtype=float)
    half = len(s) // 2
    ranges = range_mono + np.arange(-half, half + 1) * pixel
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 2.6))
        ax.plot(ranges, s, color="0.2", lw=1.2, label="matching score")
        ax.axvline(range_mono, color="tab:blue", ls="--", lw=1.0, label="monocular")
        if range_gt is not None:
            ax.axvline(range_gt, color="tab:green", ls="-", lw=1.0, label="ground truth")
        ax.set_xlabel("range [m]")
        ax.set_ylabel("score")
        handles, labels = ax.get_legend_handles_labels()
        if stage3 is not None:
            p = np.asarray(stage3, dtype=float)
            h3 = len(p) // 2
            ax2 = ax.twinx()
            (line,) = ax2.plot(range_mono + np.arange(-h3, h3 + 1) * 0.1, p, color="tab:orange", lw=1.0)
            ax2.set_ylabel("stage-3 prob.")
            ax2.spines["top"].set_visible(False)
            ax2.spines["right"].set_visible(True)
            handles.append(line)
            labels.append("stage 3")
        ax.legend(handles, labels, loc="upper left", frameon=False, fontsize=7)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"Date": None} if path.suffix == ".svg" else None
        fig.savefig(path, metadata=meta)
        plt.close(fig)
    return path
