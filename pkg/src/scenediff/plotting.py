"""SVG scene plots: map, history, ground truth and modal rollouts."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "scenediff"
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_MAP_STYLE = {
    "lane_center": dict(color="0.75", lw=0.8, ls="--"),
    "road_edge": dict(color="0.3", lw=1.2, ls="-"),
    "crosswalk": dict(color="0.6", lw=2.0, ls=":"),
    "other": dict(color="0.85", lw=0.6, ls="-"),
}


def _ramp(ax, pts, color, lo=0.15, hi=1.0, lw=1.5, **kw):
    """Segments whose opacity grows with time."""
    n = len(pts)
    for i in range(n - 1):
        alpha = lo + (hi - lo) * (i + 1) / max(n - 1, 1)
        ax.plot(pts[i : i + 2, 0], pts[i : i + 2, 1], color=color, alpha=alpha, lw=lw, **kw)


def plot_scenario(scenario, rollouts=None, path=None, max_modes=None, title=None):
    """Draw one scenario; ``rollouts`` is ``(traj [Ap, M, T_f, 2+], probs [Ap, M])``.

    Returns the figure, or writes an SVG to ``path`` and returns the path.
    """
    s = scenario
    fig, ax = plt.subplots(figsize=(6, 6))
    for pl in s.map:
        pts = np.asarray(pl.points)
        ax.plot(pts[:, 0], pts[:, 1], **_MAP_STYLE.get(pl.kind, _MAP_STYLE["other"]))
    for light in s.lights:
        state = light.states[-1]
        color = {"stop": "red", "caution": "orange", "go": "green"}.get(state, "grey")
        ax.scatter([light.position[0]], [light.position[1]], marker="s", s=20, color=color, zorder=3)
    cmap = plt.get_cmap("tab10")
    for a, ag in enumerate(s.all_agents):
        color = cmap(a % 10)
        predicted = a < s.num_predicted
        hist = ag.states[: s.T_h][ag.valid[: s.T_h], :2]
        if len(hist):
            _ramp(ax, hist, color, lo=0.1, hi=0.6, lw=2.0)
            ax.scatter(*hist[-1], color=color, s=18 if predicted else 8, zorder=4)
        if len(ag) > s.T_h:
            fut = ag.states[s.T_h :][ag.valid[s.T_h :], :2]
            if len(fut):
                ax.plot(fut[:, 0], fut[:, 1], color=color, lw=1.0, ls=":" if not predicted else "-", alpha=0.9)
        if predicted and rollouts is not None:
            traj, probs = rollouts
            order = np.argsort(-np.asarray(probs[a]), kind="stable")
            if max_modes:
                order = order[:max_modes]
            start = ag.states[s.T_h - 1, :2]
            for k in order:
                pts = np.vstack([start, np.asarray(traj[a][k])[:, :2]])
                _ramp(ax, pts, color, lo=0.1, hi=0.2 + 0.8 * float(probs[a][k]), lw=1.0)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_title(title or s.id, fontsize=9)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if path is None:
        return fig
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def plot_many(scenarios, predictions, out_dir, limit=None):
    out = []
    for i, s in enumerate(scenarios):
        if limit is not None and i >= limit:
            break
        pred = None if predictions is None else predictions[i]
        safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in s.id)
        out.append(plot_scenario(s, pred, Path(out_dir) / f"{safe}.svg"))
    return out
