"""Rollout metrics, the constant-velocity baseline, and report writing."""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BinError, EmptyOverlap, NoHistory, NoMap, ParseError, ShapeError
from .scene import ROAD_KINDS

OFFROAD_TAU = 3.0
NLL_FLOOR = 1e-6
NLL_SAMPLES = 32


def _xy(a):
    a = np.asarray(a, dtype=np.float64)
    return a[..., :2]


def ade(pred, gt, mask=None) -> float:
    """Mean Euclidean distance over valid steps."""
    p, g = _xy(pred), _xy(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    d = np.linalg.norm(p - g, axis=-1)
    m = np.ones(d.shape, bool) if mask is None else np.asarray(mask, bool)
    if not m.any():
        raise EmptyOverlap("no valid step to compare")
    return float(d[m].mean())


def modal_ades(rollout, gt, mask=None) -> np.ndarray:
    r = _xy(rollout)
    if r.ndim != 3:
        raise ShapeError("rollout must be [M, T, 2+]")
    return np.array([ade(r[k], gt, mask) for k in range(len(r))])


def min_ade(rollout, gt, mask=None) -> float:
    return float(modal_ades(rollout, gt, mask).min())


def top_modality_ade(rollout, probs, gt, mask=None) -> float:
    """ADE of the most probable modality (lowest index on ties)."""
    return ade(_xy(rollout)[int(np.argmax(probs))], gt, mask)


@dataclass(frozen=True)
class BinSpec:
    size: float = 1.0
    floor: float = NLL_FLOOR

    def validate(self) -> "BinSpec":
        if not (self.size > 0 and math.isfinite(self.size)):
            raise BinError("bin size must be positive and finite")
        if not 0 <= self.floor < 1:
            raise BinError("probability floor must lie in [0, 1)")
        return self


def histogram_log_prob(samples, observed, bins: BinSpec = BinSpec()) -> float:
    """Log-probability of one observed 2-D point under a floored histogram of samples.

    Bins form a square grid anchored so that the observation sits at a bin
    centre. ``K`` counts the bins in the bounding box of samples and
    observation; ``q = (1 - K*floor) * p + floor``, so the floored masses still
    sum to one over the box.
    """
    bins.validate()
    s = _xy(samples).reshape(-1, 2)
    if len(s) == 0:
        raise BinError("need at least one sample")
    o = _xy(observed).reshape(2)
    idx = np.floor((s - o) / bins.size + 0.5).astype(np.int64)
    lo = np.minimum(idx.min(axis=0), 0)
    hi = np.maximum(idx.max(axis=0), 0)
    K = int(np.prod(hi - lo + 1))
    if K * bins.floor >= 1.0:
        raise BinError(f"{K} bins with floor {bins.floor} leave no probability mass")
    p = float(np.all(idx == 0, axis=1).mean())
    q = (1.0 - K * bins.floor) * p + bins.floor
    return math.log(q)


def nll_histogram(samples, observed, mask=None, bins: BinSpec = BinSpec()) -> float:
    """Mean negative log-likelihood over valid steps.

    ``samples [N, T, 2+]`` are sampled rollouts of one agent, ``observed [T, 2+]``
    its ground truth. Each step gets its own histogram.
    """
    s, o = _xy(samples), _xy(observed)
    if s.ndim == 2:
        s, o = s[:, None], o[None]
    if s.shape[1:] != o.shape:
        raise ShapeError("samples must be [N, T, 2] matching observed [T, 2]")
    m = np.ones(len(o), bool) if mask is None else np.asarray(mask, bool)
    if not m.any():
        raise EmptyOverlap("no valid step to score")
    return float(np.mean([-histogram_log_prob(s[:, t], o[t], bins) for t in np.flatnonzero(m)]))


def footprint_radius(width, height) -> float:
    return 0.5 * math.hypot(width, height)


def collision_flags(positions, radii, mask=None) -> np.ndarray:
    """Per agent-step flags: some other valid agent is closer than the radius sum (strict)."""
    p = _xy(positions)
    A, T = p.shape[:2]
    r = np.asarray(radii, dtype=np.float64)
    m = np.ones((A, T), bool) if mask is None else np.asarray(mask, bool)
    d = np.linalg.norm(p[:, None] - p[None, :], axis=-1)  # [A, A, T]
    hit = d < (r[:, None] + r[None, :])[..., None]
    hit &= m[:, None] & m[None, :]
    hit[np.arange(A), np.arange(A)] = False
    return hit.any(axis=1) & m


def collision_rate(positions, radii, mask=None) -> float:
    """Fraction of valid agent-steps in collision; 0 when nothing is valid."""
    m = np.ones(_xy(positions).shape[:2], bool) if mask is None else np.asarray(mask, bool)
    if not m.any():
        return 0.0
    return float(collision_flags(positions, radii, m)[m].mean())


def _road_segments(polylines):
    segs = []
    for pl in polylines:
        if getattr(pl, "kind", "lane_center") not in ROAD_KINDS:
            continue
        pts = np.asarray(pl.points, dtype=np.float64)
        if len(pts) == 1:
            segs.append(np.stack([pts[0], pts[0]]))
        segs.extend(np.stack([pts[i], pts[i + 1]]) for i in range(len(pts) - 1))
    if not segs:
        raise NoMap("no road polyline (lane_center or road_edge) to measure against")
    return np.stack(segs)  # [S, 2, 2]


def distance_to_road(points, polylines) -> np.ndarray:
    segs = _road_segments(polylines)
    p = _xy(points).reshape(-1, 2)
    a, b = segs[:, 0], segs[:, 1]
    ab = b - a
    denom = (ab**2).sum(-1)
    rel = p[:, None] - a[None]
    u = np.where(denom > 0, (rel * ab[None]).sum(-1) / np.where(denom > 0, denom, 1.0), 0.0)
    u = np.clip(u, 0.0, 1.0)
    closest = a[None] + u[..., None] * ab[None]
    return np.linalg.norm(p[:, None] - closest, axis=-1).min(axis=1).reshape(_xy(points).shape[:-1])


def offroad_rate(points, polylines, mask=None, tau=OFFROAD_TAU) -> float:
    """Fraction of valid points farther than ``tau`` from every road polyline (strict)."""
    d = distance_to_road(points, polylines)
    m = np.ones(d.shape, bool) if mask is None else np.asarray(mask, bool)
    if not m.any():
        return 0.0
    return float((d[m] > tau).mean())


def constant_velocity_baseline(history, T_f, dt, valid=None) -> np.ndarray:
    """Extrapolate the last valid ``(v, theta)``; returns ``[T_f, 4]`` states."""
    h = np.asarray(history, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] < 4:
        raise ShapeError("history must be [T_h, 4]")
    v_ok = np.ones(len(h), bool) if valid is None else np.asarray(valid, bool)
    v_ok = v_ok & np.all(np.isfinite(h[:, :4]), axis=1)
    if not v_ok.any():
        raise NoHistory("no valid history step")
    last = int(np.flatnonzero(v_ok)[-1])
    x, y, theta, v = h[last, :4]
    k = np.arange(1, T_f + 1) + (len(h) - 1 - last)
    out = np.empty((T_f, 4))
    out[:, 0] = x + k * v * dt * math.cos(theta)
    out[:, 1] = y + k * v * dt * math.sin(theta)
    out[:, 2] = theta
    out[:, 3] = v
    return out


# ---------------------------------------------------------------------------
# reports

METRICS = ("ade", "min_ade", "nll", "collision_rate", "offroad_rate", "baseline_ade")


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # per-scenario dicts
    aggregate: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"aggregate": self.aggregate, "scenarios": self.rows}


def _mean_or_none(values, weights):
    pairs = [(v, w) for v, w in zip(values, weights) if v is not None and w > 0]
    if not pairs:
        return None
    return float(sum(v * w for v, w in pairs) / sum(w for _, w in pairs))


def evaluate_predictions(scenarios, predictions, samples=None, bins: BinSpec = BinSpec()) -> EvalReport:
    """Score precomputed rollouts.

    ``predictions[i]`` is ``(traj [Ap, M, T_f, 4], probs [Ap, M])`` for
    ``scenarios[i]``; ``samples[i]`` (optional) is ``[N, Ap, T_f, 2+]`` of
    sampled rollouts used for the NLL.
    """
    rows = []
    for i, (s, (traj, probs)) in enumerate(zip(scenarios, predictions)):
        n_agents, n_steps = 0, 0
        sums = {k: 0.0 for k in ("ade", "min_ade", "baseline_ade", "nll")}
        top_paths, top_mask = [], []
        nll_agents = 0
        for a, ag in enumerate(s.predicted_agents):
            gt = ag.states[s.T_h :, :2]
            m = ag.valid[s.T_h :]
            if not m.any():
                continue
            n_agents += 1
            n_steps += int(m.sum())
            sums["ade"] += top_modality_ade(traj[a], probs[a], gt, m)
            sums["min_ade"] += min_ade(traj[a], gt, m)
            cv = constant_velocity_baseline(ag.states[: s.T_h], s.T_f, s.dt, ag.valid[: s.T_h])
            sums["baseline_ade"] += ade(cv, gt, m)
            if samples is not None:
                sums["nll"] += nll_histogram(np.asarray(samples[i])[:, a], gt, m, bins)
                nll_agents += 1
        for a in range(s.num_predicted):
            top_paths.append(_xy(traj[a])[int(np.argmax(probs[a]))])
            top_mask.append(np.ones(s.T_f, bool))
        radii = [footprint_radius(ag.width, ag.height) for ag in s.predicted_agents]
        for ag in s.world_agents:
            if len(ag) == s.T_h + s.T_f:
                top_paths.append(ag.states[s.T_h :, :2])
                top_mask.append(ag.valid[s.T_h :])
                radii.append(footprint_radius(ag.width, ag.height))
        pos = np.stack(top_paths)
        cmask = np.stack(top_mask)
        flags = collision_flags(pos, radii, cmask)[: s.num_predicted]
        collision = float(flags.mean())
        try:
            offroad = offroad_rate(pos[: s.num_predicted], s.map)
        except NoMap:
            offroad = None
        row = {
            "scenario_id": s.id,
            "n_agents": n_agents,
            "n_steps": n_steps,
            "ade": sums["ade"] / n_agents if n_agents else None,
            "min_ade": sums["min_ade"] / n_agents if n_agents else None,
            "nll": sums["nll"] / nll_agents if nll_agents else None,
            "collision_rate": collision,
            "offroad_rate": offroad,
            "baseline_ade": sums["baseline_ade"] / n_agents if n_agents else None,
        }
        rows.append(row)
    rows.sort(key=lambda r: r["scenario_id"])
    w = [r["n_agents"] for r in rows]
    agg = {k: _mean_or_none([r[k] for r in rows], w) for k in METRICS}
    agg.update(
        scenario_id="ALL",
        n_agents=int(sum(w)),
        n_steps=int(sum(r["n_steps"] for r in rows)),
        n_scenarios=len(rows),
        n_offroad_scenarios=sum(r["offroad_rate"] is not None for r in rows),
    )
    return EvalReport(rows, agg)


def sample_rollouts(model, scenarios, seed=0, n_samples=NLL_SAMPLES, batch_size=64):
    """First draw as the prediction, plus ``n_samples`` draws for the NLL.

    Each extra draw picks one modality per agent according to its probability.
    """
    import torch

    from .model import collate

    cfg = model.cfg
    gen = torch.Generator().manual_seed(int(seed))
    rng = np.random.default_rng([int(seed), 1])
    preds, draws = [], []
    model.eval()
    for start in range(0, len(scenarios), batch_size):
        chunk = scenarios[start : start + batch_size]
        batch = collate(chunk, cfg.n_points, model.dtype, with_future=False)
        traj, probs = model.generate(batch, gen)
        traj, probs = traj.double().numpy(), probs.double().numpy()
        chunk_draws = [[] for _ in chunk]
        for k in range(n_samples):
            if k > 0:
                t2, p2 = model.generate(batch, gen)
                t2, p2 = t2.double().numpy(), p2.double().numpy()
            else:
                t2, p2 = traj, probs
            for j, n in enumerate(batch["num_predicted"]):
                picks = [rng.choice(p2.shape[-1], p=p2[j, a] / p2[j, a].sum()) for a in range(n)]
                chunk_draws[j].append(np.stack([t2[j, a, picks[a], :, :2] for a in range(n)]))
        for j, n in enumerate(batch["num_predicted"]):
            preds.append((traj[j, :n], probs[j, :n]))
            if n_samples > 0:
                draws.append(np.stack(chunk_draws[j]))
    return preds, (draws if n_samples > 0 else None)


def evaluate(model, scenarios, seed=0, n_samples=NLL_SAMPLES, bins: BinSpec = BinSpec()) -> EvalReport:
    preds, draws = sample_rollouts(model, scenarios, seed, n_samples)
    return evaluate_predictions(scenarios, preds, draws, bins)


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_report(report: EvalReport, out_dir, stem="report"):
    """Write ``<stem>.csv`` (per-scenario rows plus an ``ALL`` row) and ``<stem>.json``."""
    import io

    out_dir = Path(out_dir)
    cols = ["scenario_id", "n_agents", "n_steps", *METRICS]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in report.rows + [report.aggregate]:
        writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in cols})
    _atomic_write(out_dir / f"{stem}.csv", buf.getvalue())
    _atomic_write(out_dir / f"{stem}.json", json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    return out_dir / f"{stem}.csv", out_dir / f"{stem}.json"


# ---------------------------------------------------------------------------
# rollout export


def rollout_records(scenarios, predictions):
    for s, (traj, probs) in zip(scenarios, predictions):
        for a, ag in enumerate(s.predicted_agents):
            for k in range(traj.shape[1]):
                yield {
                    "scenario_id": s.id,
                    "agent_id": ag.id,
                    "modality": k,
                    "prob": float(probs[a, k]),
                    "points": [[float(v) for v in p] for p in traj[a, k]],
                }


def write_rollouts(path, scenarios, predictions):
    lines = [json.dumps(r, separators=(",", ":")) for r in rollout_records(scenarios, predictions)]
    _atomic_write(Path(path), "\n".join(lines) + ("\n" if lines else ""))


def read_rollouts(path) -> dict:
    """Group records as ``{scenario_id: {agent_id: [(modality, prob, points[T, 4]), ...]}}``."""
    out: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                entry = (int(r["modality"]), float(r["prob"]), np.asarray(r["points"], dtype=np.float64))
                out.setdefault(r["scenario_id"], {}).setdefault(r["agent_id"], []).append(entry)
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"bad rollout record: {exc}", lineno) from exc
    return out
