"""SVG figure rendering with byte-stable output.

All figures are built through the object-oriented matplotlib API (no
pyplot, no global state) and saved as SVG with a pinned hash salt,
text left as text, and the Date metadata suppressed, so rerunning a
command reproduces the file byte for byte.
"""

from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure

# light-to-dark ramp; one entry per severity level when there are six
_SEVERITY_RAMP = (
    "#c6dbef",
    "#9ecae1",
    "#6baed6",
    "#4292c6",
    "#2171b5",
    "#084594",
)

_CON_COLOR = "#4292c6"
_PRO_COLOR = "#d95f02"
_ACC_COLOR = "#666666"


def _hex_to_rgb(code: str) -> tuple[float, float, float]:
    code = code.lstrip("#")
    return tuple(int(code[i : i + 2], 16) / 255.0 for i in (0, 2, 4))


def severity_palette(n_levels: int) -> list[str]:
    """n colors from light (healthy) to dark (most severe)."""
    if n_levels < 1:
        raise ValueError("palette needs at least one level")
    if n_levels == len(_SEVERITY_RAMP):
        return list(_SEVERITY_RAMP)
    if n_levels == 1:
        return [_SEVERITY_RAMP[-1]]
    anchors = np.array([_hex_to_rgb(c) for c in _SEVERITY_RAMP])
    xs = np.linspace(0.0, 1.0, len(_SEVERITY_RAMP))
    ts = np.linspace(0.0, 1.0, n_levels)
    rgb = np.stack([np.interp(ts, xs, anchors[:, c]) for c in range(3)], axis=1)
    return ["#%02x%02x%02x" % tuple(int(round(v * 255)) for v in row) for row in rgb]


def _new_figure(width: float = 6.4, height: float = 4.8) -> Figure:
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasSVG(fig)
    return fig


def save_figure(fig: Figure, path: str) -> None:
    """Write SVG with pinned hash salt so element ids repeat across runs."""
    import matplotlib

    with matplotlib.rc_context({"svg.hashsalt": "conpro", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})


def severity_scatter(
    coords: np.ndarray,
    severities: np.ndarray,
    path: str,
    *,
    axis_labels: tuple[str, str] = ("pc1", "pc2"),
    title: str = "embedding by severity",
) -> None:
    """2-D scatter, one legend entry per severity present, darker = worse."""
    coords = np.asarray(coords, dtype=np.float64)
    severities = np.asarray(severities)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError(f"expected [N, 2] coordinates, got {coords.shape}")
    if coords.shape[0] == 0:
        raise ValueError("nothing to plot: no points")
    if coords.shape[0] != severities.shape[0]:
        raise ValueError("coordinates and severities disagree on sample count")
    palette = severity_palette(int(severities.max()) + 1)
    fig = _new_figure()
    ax = fig.add_subplot(1, 1, 1)
    for level in sorted(int(s) for s in np.unique(severities)):
        mask = severities == level
        ax.scatter(
            coords[mask, 0],
            coords[mask, 1],
            s=22,
            color=palette[level],
            edgecolors="none",
            label=f"severity {level}",
        )
    ax.set_xlabel(axis_labels[0])
    ax.set_ylabel(axis_labels[1])
    ax.set_title(title)
    ax.legend(loc="best", frameon=False, fontsize=8)
    save_figure(fig, path)


def training_curves(records, path: str) -> None:
    """Loss per epoch for each phase plus ranking accuracy overlay."""
    records = list(records)
    if not records:
        raise ValueError("nothing to plot: no training records")
    fig = _new_figure()
    ax = fig.add_subplot(1, 1, 1)
    x = np.arange(1, len(records) + 1)
    for phase, color in (("con", _CON_COLOR), ("pro", _PRO_COLOR)):
        xs = [xi for xi, r in zip(x, records) if r.phase == phase]
        ys = [r.loss for r in records if r.phase == phase]
        if xs:
            ax.plot(xs, ys, color=color, label=f"{phase} loss", linewidth=1.5)
    ax.set_xlabel("epoch (both phases)")
    ax.set_ylabel("loss")
    acc = np.array([r.pref_acc for r in records], dtype=np.float64)
    if np.any(np.isfinite(acc)):
        ax2 = ax.twinx()
        ax2.plot(x, acc, color=_ACC_COLOR, linestyle="--", linewidth=1.0, label="pref acc")
        ax2.set_ylabel("held-out ranking accuracy")
        ax2.set_ylim(0.0, 1.05)
    ax.legend(loc="upper right", frameon=False, fontsize=8)
    ax.set_title("training")
    save_figure(fig, path)


def confusion_heatmap(confusion: np.ndarray, path: str) -> None:
    """Count matrix image, annotated per cell; rows true, columns predicted."""
    confusion = np.asarray(confusion)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ValueError(f"expected a square matrix, got {confusion.shape}")
    k = confusion.shape[0]
    fig = _new_figure(5.2, 4.6)
    ax = fig.add_subplot(1, 1, 1)
    ax.imshow(confusion, cmap="Blues", interpolation="nearest")
    top = confusion.max() if confusion.size else 0
    for t in range(k):
        for p in range(k):
            value = int(confusion[t, p])
            dark = top > 0 and value > 0.6 * top
            ax.text(
                p,
                t,
                str(value),
                ha="center",
                va="center",
                fontsize=8,
                color="white" if dark else "black",
            )
    ax.set_xticks(range(k))
    ax.set_yticks(range(k))
    ax.set_xlabel("predicted severity")
    ax.set_ylabel("true severity")
    ax.set_title("confusion")
    save_figure(fig, path)
