"""Figures for training logs, ranking curves and merge reports.

Everything renders off-screen through the Agg backend and is written to
PNG files; nothing here opens a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["STYLE", "plot_cmc", "plot_diagnostics", "plot_losses", "plot_training"]

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "lines.linewidth": 1.4,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def _series(log, name):
    xs, ys = [], []
    for r in log.records:
        v = getattr(r, name)
        if v is not None:
            xs.append(r.epoch)
            ys.append(v)
    return xs, ys


def plot_losses(log, path, ccta_start: int | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(*_series(log, "pctd_loss"), label="classification")
        ax.plot(*_series(log, "ccta_loss"), label="association")
        if ccta_start is not None:
            ax.axvline(ccta_start, color="0.5", linestyle="--", linewidth=0.8)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean batch loss")
        ax.legend()
        return _save(fig, path)


def plot_diagnostics(log, path, ccta_start: int | None = None) -> Path:
    """MPS, discovered pair count and precision, plus any ranking metrics."""
    with plt.rc_context(STYLE):
        fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=(6.0, 6.0))
        top.plot(*_series(log, "mps"), label="MPS")
        top.plot(*_series(log, "pair_precision"), label="pair precision")
        xs, r1 = _series(log, "rank1")
        if r1:
            top.plot(xs, r1, "o-", markersize=3, label="rank-1")
            top.plot(*_series(log, "map"), "s-", markersize=3, label="mAP")
        top.set_ylabel("score")
        top.legend(loc="lower right")
        bottom.plot(*_series(log, "num_pairs"), color="C3")
        bottom.set_ylabel("discovered pairs")
        bottom.set_xlabel("epoch")
        if ccta_start is not None:
            for ax in (top, bottom):
                ax.axvline(ccta_start, color="0.5", linestyle="--", linewidth=0.8)
        return _save(fig, path)


def plot_training(log, out_dir, ccta_start: int | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    return [
        plot_losses(log, out_dir / "losses.png", ccta_start),
        plot_diagnostics(log, out_dir / "diagnostics.png", ccta_start),
    ]


def plot_cmc(report, path, label: str | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ranks = range(1, len(report.cmc) + 1)
        ax.step(ranks, report.cmc, where="post", label=label or f"mAP {report.map:.3f}")
        ax.set_xlabel("rank")
        ax.set_ylabel("matching rate")
        ax.set_ylim(0.0, 1.02)
        ax.legend(loc="lower right")
        return _save(fig, path)
