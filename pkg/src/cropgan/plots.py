"""FID-vs-kimg figures and plain-text plot data."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

SERIES_LABELS = {"cropped-augmented": "cropped", "augmented": "uncropped"}
SERIES_COLORS = {"cropped": "tab:blue", "uncropped": "tab:red"}


def write_plot_data(series: Mapping[str, Sequence[tuple[float, float]]], path: str | Path) -> Path:
    """One block per series: a ``# <label>`` line followed by the fid_log rows."""
    path = Path(path)
    blocks = []
    for label, log in series.items():
        rows = "".join(f"{k:.3f}\t{v:.6f}\n" for k, v in log)
        blocks.append(f"# {label}\nkimg\tfid\n{rows}")
    path.write_text("\n".join(blocks))
    return path


def read_plot_data(path: str | Path) -> dict[str, list[tuple[float, float]]]:
    series: dict[str, list[tuple[float, float]]] = {}
    current = None
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            current = line[2:]
            series[current] = []
        elif line and line != "kimg\tfid" and current is not None:
            k, v = line.split("\t")
            series[current].append((float(k), float(v)))
    return series


def plot_fid_curves(
    fid_logs: Mapping[tuple[str, float], Sequence[tuple[float, float]]], out_dir: str | Path
) -> list[Path]:
    """One figure per data fraction with cropped/uncropped FID series.

    ``fid_logs`` maps ``(variant, fraction)`` to ``(kimg, fid)`` rows. The
    raw rows are written next to every figure.
    """
    if not fid_logs or not any(fid_logs.values()):
        raise ValueError("no FID logs to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fraction in sorted({f for _, f in fid_logs}):
        series = {
            SERIES_LABELS.get(v, v): list(log)
            for (v, f), log in sorted(fid_logs.items())
            if f == fraction and log
        }
        if not series:
            continue
        stem = f"fid_{round(fraction * 100):03d}"
        written.append(write_plot_data(series, out_dir / f"{stem}.tsv"))
        fig, ax = plt.subplots(figsize=(4, 3))
        for label, log in series.items():
            ax.plot([k for k, _ in log], [v for _, v in log], label=label, color=SERIES_COLORS.get(label))
        ax.set_title(f"{fraction:.0%} subset")
        ax.set_xlabel("kimg")
        ax.set_ylabel("FID")
        ax.grid(True, alpha=0.3)
        if len(series) > 1:
            ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / f"{stem}.png", dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(out_dir / f"{stem}.png")
    return written
