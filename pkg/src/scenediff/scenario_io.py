"""Scenario files, the synthetic scenario corpus, and dataset splits.

Scenario files are UTF-8 line-delimited JSON, one scenario per line::

    {"id": ..., "dt": ..., "T_h": ..., "T_f": ...,
     "predicted_agents": [{"id", "kind", "width", "height",
                           "states": [[x, y, theta, v, valid], ...]}, ...],
     "world_agents": [...],
     "lights": [{"x", "y", "states": ["go", ...]}, ...],
     "map": [{"kind", "points": [[x, y], ...]}, ...]}

Floats are written with at most 9 significant digits.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, SpecError, ValidationError
from .scene import AgentTrack, MapPolyline, Scenario, TrafficLightRecord

SCENE_TYPES = ("cruise", "lane_change", "intersection")
LANE_WIDTH = 3.5
_KIND_SIZE = {"vehicle": (1.9, 4.6), "cyclist": (0.7, 1.8), "pedestrian": (0.6, 0.6)}


def q9(x: float) -> float:
    """Round to 9 significant digits, the precision kept by scenario files."""
    return float(f"{x:.9g}")


_q9 = np.vectorize(q9, otypes=[np.float64])


# ---------------------------------------------------------------------------
# serialization


def _agent_to_json(a: AgentTrack) -> dict:
    rows = [[q9(x), q9(y), q9(th), q9(v), bool(ok)] for (x, y, th, v), ok in zip(a.states.tolist(), a.valid)]
    return {"id": a.id, "kind": a.kind, "width": q9(a.width), "height": q9(a.height), "states": rows}


def scenario_to_json(s: Scenario) -> dict:
    return {
        "id": s.id,
        "dt": q9(s.dt),
        "T_h": s.T_h,
        "T_f": s.T_f,
        "predicted_agents": [_agent_to_json(a) for a in s.predicted_agents],
        "world_agents": [_agent_to_json(a) for a in s.world_agents],
        "lights": [
            {"x": q9(l.position[0]), "y": q9(l.position[1]), "states": list(l.states)} for l in s.lights
        ],
        "map": [{"kind": p.kind, "points": [[q9(x), q9(y)] for x, y in p.points.tolist()]} for p in s.map],
    }


def scenario_from_json(obj: dict) -> Scenario:
    def agent(o):
        return AgentTrack.from_rows(o["id"], o["kind"], o["width"], o["height"], o["states"])

    return Scenario(
        id=str(obj["id"]),
        predicted_agents=tuple(agent(o) for o in obj["predicted_agents"]),
        world_agents=tuple(agent(o) for o in obj.get("world_agents", [])),
        lights=tuple(TrafficLightRecord((o["x"], o["y"]), o["states"]) for o in obj.get("lights", [])),
        map=tuple(MapPolyline(o["kind"], o["points"]) for o in obj.get("map", [])),
        dt=float(obj["dt"]),
        T_h=int(obj["T_h"]),
        T_f=int(obj["T_f"]),
    )


def dumps_scenario(s: Scenario) -> str:
    return json.dumps(scenario_to_json(s), separators=(",", ":"))


def load_scenarios(path) -> list:
    """Read and validate every scenario in a line-delimited JSON file."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            try:
                s = scenario_from_json(obj)
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed scenario record: {exc!r}", lineno) from None
            try:
                s.validate()
            except ValidationError as exc:
                raise ValidationError(f"line {lineno} (scenario {s.id}): {exc}") from None
            out.append(s)
    return out


def save_scenarios(scenarios, path) -> None:
    """Write scenarios atomically; on failure no partial file is left behind."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            for s in scenarios:
                fh.write(dumps_scenario(s))
                fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# splits


def split_of(scenario_id: str, fractions=(0.8, 0.1, 0.1)) -> str:
    """Stable train/val/test assignment from a hash of the scenario id."""
    h = int.from_bytes(hashlib.sha256(scenario_id.encode()).digest()[:8], "big") / 2**64
    if h < fractions[0]:
        return "train"
    if h < fractions[0] + fractions[1]:
        return "val"
    return "test"


def split_scenarios(scenarios, fractions=(0.8, 0.1, 0.1)) -> dict:
    out = {"train": [], "val": [], "test": []}
    for s in scenarios:
        out[split_of(s.id, fractions)].append(s)
    return out


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class CorpusSpec:
    seed: int = 0
    n_scenarios: int = 100
    scene_mix: dict = field(default_factory=lambda: {"cruise": 0.35, "lane_change": 0.35, "intersection": 0.3})
    T_h: int = 11
    T_f: int = 16
    dt: float = 0.1
    agents_per_scene: tuple = (3, 6)
    predicted_per_scene: tuple = (1, 3)
    lights_per_scene: tuple = (2, 4)
    n_points: int = 20

    def validate(self) -> "CorpusSpec":
        if self.n_scenarios < 0:
            raise SpecError("n_scenarios must be >= 0")
        unknown = set(self.scene_mix) - set(SCENE_TYPES)
        if unknown:
            raise SpecError(f"unknown scene types: {sorted(unknown)}")
        fracs = list(self.scene_mix.values())
        if any(f < 0 for f in fracs) or not math.isclose(sum(fracs), 1.0, abs_tol=1e-9):
            raise SpecError("scene_mix fractions must be non-negative and sum to 1")
        if self.T_h < 2 or self.T_f < 1 or self.dt <= 0:
            raise SpecError("need T_h >= 2, T_f >= 1, dt > 0")
        if self.n_points < 2:
            raise SpecError("n_points must be >= 2")
        for name in ("agents_per_scene", "predicted_per_scene", "lights_per_scene"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise SpecError(f"{name} must be a range 0 <= lo <= hi, got {(lo, hi)}")
        if self.predicted_per_scene[0] < 1:
            raise SpecError("predicted_per_scene lower bound must be >= 1")
        if self.agents_per_scene[1] < 1:
            raise SpecError("agents_per_scene upper bound must be >= 1")
        return self


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _states_from_path(xy: np.ndarray, dt: float, heading0: float) -> np.ndarray:
    """Heading and speed derived from the path so that |dp|/dt == v exactly."""
    d = np.diff(xy, axis=0)
    dist = np.linalg.norm(d, axis=1)
    n = len(xy)
    theta = np.empty(n)
    v = np.empty(n)
    prev = heading0
    for t in range(1, n):
        if dist[t - 1] > 1e-6:
            prev = math.atan2(d[t - 1, 1], d[t - 1, 0])
        theta[t] = prev
        v[t] = dist[t - 1] / dt
    first_moving = next((t for t in range(1, n) if dist[t - 1] > 1e-6), None)
    theta[0] = theta[first_moving] if first_moving is not None else heading0
    v[0] = v[1] if n > 1 else 0.0
    return np.stack([xy[:, 0], xy[:, 1], theta, v], axis=1)


def _speed_profile(rng, n, dt, v0, accel_range=(-0.8, 0.8), v_max=20.0, switch_before=None):
    """Arc length from piecewise-constant acceleration (one switch, drawn before ``switch_before``)."""
    a1, a2 = rng.uniform(*accel_range, size=2)
    switch = rng.integers(0, n if switch_before is None else switch_before)
    s = np.zeros(n)
    v = v0
    for t in range(1, n):
        a = a1 if t < switch else a2
        v = min(max(v + a * dt, 0.0), v_max)
        s[t] = s[t - 1] + v * dt
    return s


class _Frame:
    """Road-aligned frame (u along the road, w to the left) placed in the world."""

    def __init__(self, rng):
        self.phi = float(rng.choice([0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi]))
        self.offset = rng.uniform(-50.0, 50.0, size=2)
        c, s = math.cos(self.phi), math.sin(self.phi)
        self.rot = np.array([[c, -s], [s, c]])

    def to_world(self, uw):
        return np.asarray(uw, dtype=np.float64) @ self.rot.T + self.offset


def _line(p0, p1, n):
    return np.linspace(np.asarray(p0, float), np.asarray(p1, float), n)


def _kind_for(rng, allow_ped=False):
    r = rng.random()
    if allow_ped and r < 0.15:
        return "pedestrian"
    if r < 0.25:
        return "cyclist"
    return "vehicle"


def _straight_road_scene(rng, spec, n_agents, lane_change):
    n = spec.T_h + spec.T_f
    dt = spec.dt
    t = np.arange(n) * dt
    n_lanes = int(rng.integers(2, 4))
    lanes = (np.arange(n_lanes) - (n_lanes - 1) / 2.0) * LANE_WIDTH
    paths, kinds = [], []
    occupied = {j: [] for j in range(n_lanes)}
    for i in range(n_agents):
        kind = "vehicle" if i == 0 else _kind_for(rng, allow_ped=True)
        if kind == "pedestrian":
            side = rng.choice([-1.0, 1.0])
            w = side * (lanes[-1] + LANE_WIDTH / 2 + 2.0)
            u0 = rng.uniform(0.0, 60.0)
            speed = rng.uniform(1.0, 1.6) * rng.choice([-1.0, 1.0])
            u = u0 + speed * t
            paths.append(np.stack([u, np.full(n, w)], axis=1))
            kinds.append(kind)
            continue
        j = int(rng.integers(0, n_lanes))
        if lane_change and i == 0:
            j = int(rng.integers(0, n_lanes))
        for _ in range(20):
            u0 = rng.uniform(0.0, 60.0)
            if all(abs(u0 - o) > 12.0 for o in occupied[j]):
                break
        occupied[j].append(u0)
        v0 = rng.uniform(5.0, 14.0) if kind == "vehicle" else rng.uniform(3.0, 6.0)
        u = u0 + _speed_profile(rng, n, dt, v0, switch_before=spec.T_h - 2)
        w = np.full(n, lanes[j]) + 0.05 * np.sin(rng.uniform(0.3, 1.0) * t + rng.uniform(0, 2 * math.pi))
        if lane_change and i == 0:
            target = j + (1 if j == 0 else -1 if j == n_lanes - 1 else int(rng.choice([-1, 1])))
            # the manoeuvre starts inside the history so the future is inferable
            t_start = rng.uniform(0.0, (spec.T_h - 3) * dt)
            duration = rng.uniform(2.5, 4.0)
            w = w + (lanes[target] - lanes[j]) * _smoothstep((t - t_start) / duration)
        paths.append(np.stack([u, w], axis=1))
        kinds.append(kind)

    all_uw = np.concatenate(paths)
    u_lo, u_hi = all_uw[:, 0].min() - 20.0, all_uw[:, 0].max() + 20.0
    w_edge = lanes[-1] + LANE_WIDTH / 2
    polylines = [("lane_center", [(u_lo, w), (u_hi, w)]) for w in lanes]
    polylines += [("road_edge", [(u_lo, -w_edge), (u_hi, -w_edge)]), ("road_edge", [(u_lo, w_edge), (u_hi, w_edge)])]
    # outer sidewalk boundaries keep pedestrians inside the map extent
    polylines += [("other", [(u_lo, -w_edge - 4.0), (u_hi, -w_edge - 4.0)]), ("other", [(u_lo, w_edge + 4.0), (u_hi, w_edge + 4.0)])]
    return paths, kinds, polylines, []


def _intersection_scene(rng, spec, n_agents, n_lights):
    n = spec.T_h + spec.T_f
    dt = spec.dt
    stop_dist = 8.0
    half = LANE_WIDTH / 2
    # approach k drives towards the centre along direction d_k, in the right-hand lane
    approaches = []
    for k, ang in enumerate([0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi]):
        d = np.array([math.cos(ang), math.sin(ang)])
        right = np.array([d[1], -d[0]])
        approaches.append((k % 2, d, right * half))
    t_switch = rng.uniform(-1.0, (n - 1) * dt + 2.0)
    caution = 3.0
    times = np.arange(n) * dt

    def light_state(axis, time):
        if axis == 0:
            if time < t_switch:
                return "go"
            return "caution" if time < t_switch + caution else "stop"
        return "go" if time >= t_switch + caution + 1.0 else "stop"

    if rng.random() < 0.5:
        # swap which axis starts green
        base = light_state

        def light_state(axis, time):  # noqa: F811
            return base(1 - axis, time)

    paths, kinds, used = [], [], []
    for i in range(n_agents):
        if i > 0 and rng.random() < 0.15:
            # pedestrian on a sidewalk corner path, away from traffic
            corner = rng.choice([-1.0, 1.0], size=2) * (2 * half + 3.0)
            direction = rng.choice([-1.0, 1.0])
            speed = rng.uniform(1.0, 1.6)
            axis = int(rng.integers(0, 2))
            p = np.tile(corner, (n, 1))
            p[:, axis] += direction * (speed * times - rng.uniform(0, 10))
            paths.append(p)
            kinds.append("pedestrian")
            continue
        k = int(rng.integers(0, 4))
        axis, d, lateral = approaches[k]
        lead = [dd for kk, dd in used if kk == k]
        dist0 = rng.uniform(15.0, 55.0)
        for _ in range(20):
            if all(abs(dist0 - o) > 12.0 for o in lead):
                break
            dist0 = rng.uniform(15.0, 55.0)
        used.append((k, dist0))
        v_target = rng.uniform(7.0, 13.0)
        v = v_target * rng.uniform(0.7, 1.0)
        along = np.zeros(n)
        pos = -dist0  # signed distance to intersection centre along d
        for step in range(n):
            along[step] = pos
            state = light_state(axis, times[step])
            to_line = -stop_dist - pos
            if state != "go" and to_line > 0.5 and v * v / (2 * to_line) < 5.0:
                a = -v * v / (2 * max(to_line - 0.5, 0.25))
            elif state != "go" and 0.0 < to_line <= 0.5:
                a = -v / dt
            else:
                a = float(np.clip(v_target - v, -1.0, 1.0))
            v = max(v + a * dt, 0.0)
            pos = pos + v * dt
        p = along[:, None] * d[None, :] + lateral[None, :]
        paths.append(p)
        kinds.append("vehicle")

    all_p = np.concatenate(paths)
    extent = max(np.abs(all_p).max() + 20.0, 40.0)
    polylines = []
    for k, (axis, d, lateral) in enumerate(approaches):
        polylines.append(("lane_center", [-d * extent + lateral, d * extent + lateral]))
    for sgn in (-1.0, 1.0):
        polylines.append(("road_edge", [(-extent, sgn * 2 * half), (-2 * half, sgn * 2 * half)]))
        polylines.append(("road_edge", [(2 * half, sgn * 2 * half), (extent, sgn * 2 * half)]))
        polylines.append(("road_edge", [(sgn * 2 * half, -extent), (sgn * 2 * half, -2 * half)]))
        polylines.append(("road_edge", [(sgn * 2 * half, 2 * half), (sgn * 2 * half, extent)]))
    for axis in (0, 1):
        for sgn in (-1.0, 1.0):
            a = np.array([sgn * (stop_dist - 2.0), -2 * half])
            b = np.array([sgn * (stop_dist - 2.0), 2 * half])
            if axis == 1:
                a, b = a[::-1], b[::-1]
            polylines.append(("crosswalk", [a, b]))

    # approaches that carry agents get their light first
    order = sorted(range(4), key=lambda k: (k not in {kk for kk, _ in used}, k))
    lights = []
    for k in order[:n_lights]:
        axis, d, lateral = approaches[k]
        position = -d * stop_dist + lateral
        lights.append((position, [light_state(axis, tt) for tt in times[: spec.T_h]]))
    return paths, kinds, polylines, lights


def generate_scenario(spec: CorpusSpec, index: int) -> Scenario:
    """Scenario ``index`` of the corpus; depends only on ``(spec, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    types = [k for k in SCENE_TYPES if spec.scene_mix.get(k, 0.0) > 0]
    probs = np.array([spec.scene_mix[k] for k in types], dtype=float)
    scene_type = types[int(rng.choice(len(types), p=probs / probs.sum()))]
    n_agents = max(1, int(rng.integers(spec.agents_per_scene[0], spec.agents_per_scene[1] + 1)))
    n_pred = int(rng.integers(spec.predicted_per_scene[0], spec.predicted_per_scene[1] + 1))
    n_pred = max(1, min(n_pred, n_agents))
    n_lights = int(rng.integers(spec.lights_per_scene[0], spec.lights_per_scene[1] + 1))

    frame = _Frame(rng)
    if scene_type == "intersection":
        paths, kinds, polylines, lights = _intersection_scene(rng, spec, n_agents, min(n_lights, 4))
    else:
        paths, kinds, polylines, lights = _straight_road_scene(rng, spec, n_agents, scene_type == "lane_change")

    tracks = []
    for i, (path, kind) in enumerate(zip(paths, kinds)):
        world = frame.to_world(path)
        heading0 = frame.phi
        states = _states_from_path(world, spec.dt, heading0)
        width, length = _KIND_SIZE[kind]
        scale = rng.uniform(0.9, 1.1)
        tracks.append(AgentTrack(i, kind, q9(width * scale), q9(length * scale), _q9(states)))

    # predicted agents must be able to move; pedestrians go to the world set first
    order = sorted(range(len(tracks)), key=lambda i: (i != 0, kinds[i] == "pedestrian", i))
    tracks = [tracks[i] for i in order]
    map_polys = tuple(
        MapPolyline(kind, _q9(frame.to_world(_line(p0, p1, spec.n_points)))) for kind, (p0, p1) in polylines
    )
    light_recs = tuple(
        TrafficLightRecord(tuple(_q9(frame.to_world(np.asarray(pos)[None])[0])), states) for pos, states in lights
    )
    return Scenario(
        id=f"{scene_type}-{spec.seed}-{index:06d}",
        predicted_agents=tuple(tracks[:n_pred]),
        world_agents=tuple(tracks[n_pred:]),
        lights=light_recs,
        map=map_polys,
        dt=spec.dt,
        T_h=spec.T_h,
        T_f=spec.T_f,
    ).validate()


def generate_corpus(spec: CorpusSpec) -> list:
    spec.validate()
    return [generate_scenario(spec, i) for i in range(spec.n_scenarios)]


def scene_type_of(s: Scenario) -> str:
    return s.id.split("-", 1)[0]
