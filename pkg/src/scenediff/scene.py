"""World-centric scene representation.

Every coordinate lives in one shared Cartesian frame. Agent motion is
described by *move statements*, the per-step deltas ``(dx, dy, dtheta, dv)``,
which do not depend on where the agent happens to be.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidState, ShapeError, TrackTooShort, ValidationError

AGENT_KINDS = ("vehicle", "pedestrian", "cyclist")
LIGHT_STATES = ("unknown", "stop", "caution", "go")
POLYLINE_KINDS = ("lane_center", "road_edge", "crosswalk", "other")
ROAD_KINDS = ("lane_center", "road_edge")

MOVE_DIM = 4
LIGHT_DIM = 2 + len(LIGHT_STATES)
MAP_DIM = 2 + len(POLYLINE_KINDS)
ATTR_DIM = 3 + len(AGENT_KINDS)

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap angles to (-pi, pi]. Works on floats, numpy arrays and torch tensors."""
    try:
        import torch

        if isinstance(a, torch.Tensor):
            return a - TWO_PI * torch.ceil((a - math.pi) / TWO_PI)
    except ImportError:  # pragma: no cover
        pass
    if np.isscalar(a):
        return float(a - TWO_PI * math.ceil((a - math.pi) / TWO_PI))
    a = np.asarray(a, dtype=np.float64)
    return a - TWO_PI * np.ceil((a - math.pi) / TWO_PI)


def _frozen(arr, dtype=np.float64):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AgentTrack:
    """One agent's logged states.

    ``states`` has shape ``[T, 4]`` holding ``(x, y, theta, v)`` per step and
    ``valid`` is the matching boolean mask. ``height`` is the footprint length
    along the heading direction.
    """

    id: int
    kind: str
    width: float
    height: float
    states: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != 4:
            raise ShapeError(f"agent {self.id}: states must be [T, 4], got {states.shape}")
        states = states.copy()
        states[:, 2] = wrap_angle(states[:, 2])
        valid = np.ones(len(states), bool) if self.valid is None else np.asarray(self.valid, bool)
        if valid.shape != (len(states),):
            raise ShapeError(f"agent {self.id}: valid mask must be [{len(states)}]")
        object.__setattr__(self, "states", _frozen(states))
        object.__setattr__(self, "valid", _frozen(valid, bool))

    @classmethod
    def from_rows(cls, id, kind, width, height, rows):
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, 5)
        return cls(int(id), kind, float(width), float(height), rows[:, :4], rows[:, 4] > 0.5)

    def __len__(self):
        return len(self.states)

    def __eq__(self, other):
        if not isinstance(other, AgentTrack):
            return NotImplemented
        return (
            self.id == other.id
            and self.kind == other.kind
            and self.width == other.width
            and self.height == other.height
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.valid, other.valid)
        )

    def truncated(self, n: int) -> "AgentTrack":
        return AgentTrack(self.id, self.kind, self.width, self.height, self.states[:n], self.valid[:n])

    def shifted(self, dx: float, dy: float) -> "AgentTrack":
        states = self.states.copy()
        states[:, 0] += dx
        states[:, 1] += dy
        return AgentTrack(self.id, self.kind, self.width, self.height, states, self.valid)


@dataclass(frozen=True, eq=False)
class MoveStatementSeq:
    deltas: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "deltas", _frozen(self.deltas).reshape(-1, MOVE_DIM))
        object.__setattr__(self, "origin", _frozen(self.origin).reshape(MOVE_DIM))

    def __len__(self):
        return len(self.deltas)


@dataclass(frozen=True)
class TrafficLightRecord:
    position: tuple
    states: tuple

    def __post_init__(self):
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))
        object.__setattr__(self, "states", tuple(self.states))
        for s in self.states:
            if s not in LIGHT_STATES:
                raise ValidationError(f"unknown traffic light state {s!r}")

    def one_hot(self) -> np.ndarray:
        out = np.zeros((len(self.states), len(LIGHT_STATES)))
        for t, s in enumerate(self.states):
            out[t, LIGHT_STATES.index(s)] = 1.0
        return out


@dataclass(frozen=True, eq=False)
class MapPolyline:
    kind: str
    points: np.ndarray

    def __post_init__(self):
        if self.kind not in POLYLINE_KINDS:
            raise ValidationError(f"unknown polyline kind {self.kind!r}")
        object.__setattr__(self, "points", _frozen(self.points).reshape(-1, 2))

    def __eq__(self, other):
        if not isinstance(other, MapPolyline):
            return NotImplemented
        return self.kind == other.kind and np.array_equal(self.points, other.points)

    def one_hot(self) -> np.ndarray:
        out = np.zeros(len(POLYLINE_KINDS))
        out[POLYLINE_KINDS.index(self.kind)] = 1.0
        return out


@dataclass(frozen=True)
class Scenario:
    id: str
    predicted_agents: tuple
    world_agents: tuple = ()
    lights: tuple = ()
    map: tuple = ()
    dt: float = 0.1
    T_h: int = 11
    T_f: int = 16

    def __post_init__(self):
        for name in ("predicted_agents", "world_agents", "lights", "map"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def all_agents(self) -> tuple:
        return self.predicted_agents + self.world_agents

    @property
    def num_predicted(self) -> int:
        return len(self.predicted_agents)

    def has_future(self) -> bool:
        return any(len(a) == self.T_h + self.T_f for a in self.all_agents)

    def validate(self) -> "Scenario":
        """Check invariants; raise ``ValidationError`` naming the first violation."""
        if self.dt <= 0:
            raise ValidationError("dt must be positive")
        if self.T_h < 2 or self.T_f < 0:
            raise ValidationError("T_h must be >= 2 and T_f >= 0")
        if not self.predicted_agents:
            raise ValidationError("at least one predicted agent is required (A_p >= 1)")
        lengths = {len(a) for a in self.all_agents}
        if not lengths <= {self.T_h, self.T_h + self.T_f} or len(lengths) > 1:
            raise ValidationError(
                f"track length must equal T_h={self.T_h} or T_h+T_f={self.T_h + self.T_f} "
                f"for all agents, got {sorted(lengths)}"
            )
        ids = [a.id for a in self.all_agents]
        if len(set(ids)) != len(ids):
            raise ValidationError("agent ids must be unique")
        for a in self.all_agents:
            if a.kind not in AGENT_KINDS:
                raise ValidationError(f"agent {a.id}: unknown kind {a.kind!r}")
            if a.valid.any() and not (a.width > 0 and a.height > 0):
                raise ValidationError(f"agent {a.id}: width and height must be positive")
            if not np.all(np.isfinite(a.states[a.valid])):
                raise ValidationError(f"agent {a.id}: non-finite state")
        for a in self.predicted_agents:
            if not a.valid[self.T_h - 1]:
                raise ValidationError(f"predicted agent {a.id}: current state (t=T_h-1) must be valid")
        for light in self.lights:
            if len(light.states) != self.T_h:
                raise ValidationError(f"traffic light states length must equal T_h={self.T_h}")
        return self

    def history(self) -> "Scenario":
        """The same scenario with every track cut to its first ``T_h`` states."""
        return Scenario(
            self.id,
            tuple(a.truncated(self.T_h) for a in self.predicted_agents),
            tuple(a.truncated(self.T_h) for a in self.world_agents),
            self.lights,
            self.map,
            self.dt,
            self.T_h,
            self.T_f,
        )

    def shifted(self, dx: float, dy: float) -> "Scenario":
        return Scenario(
            self.id,
            tuple(a.shifted(dx, dy) for a in self.predicted_agents),
            tuple(a.shifted(dx, dy) for a in self.world_agents),
            tuple(TrafficLightRecord((l.position[0] + dx, l.position[1] + dy), l.states) for l in self.lights),
            tuple(MapPolyline(p.kind, p.points + np.array([dx, dy])) for p in self.map),
            self.dt,
            self.T_h,
            self.T_f,
        )

    def origin(self) -> np.ndarray:
        """Scene-centring origin: the first predicted agent's current position."""
        return self.predicted_agents[0].states[self.T_h - 1, :2].copy()


def compute_move_statements(track: AgentTrack) -> MoveStatementSeq:
    """Per-step deltas of a fully valid track; heading deltas wrapped to (-pi, pi]."""
    if len(track) < 2:
        raise TrackTooShort(f"agent {track.id}: need at least 2 states, got {len(track)}")
    if not track.valid.all():
        raise InvalidState(f"agent {track.id}: track contains invalid states; mask before encoding")
    s = track.states
    deltas = np.diff(s, axis=0)
    deltas[:, 2] = wrap_angle(deltas[:, 2])
    return MoveStatementSeq(deltas, s[0])


def integrate_move_statements(seq: MoveStatementSeq) -> np.ndarray:
    """Inverse of :func:`compute_move_statements`; returns states ``[T, 4]``."""
    if len(seq) == 0:
        raise TrackTooShort("empty move-statement sequence")
    out = np.empty((len(seq) + 1, MOVE_DIM))
    out[0] = seq.origin
    for t, d in enumerate(seq.deltas):
        out[t + 1] = out[t] + d
        out[t + 1, 2] = wrap_angle(out[t + 1, 2])
    return out


def resample_polyline(points, n_points: int):
    """Resample a polyline to ``n_points`` equally spaced by arc length.

    Returns ``(points [n, 2], mask [n])``. Sources with fewer than two points
    cannot be resampled and are padded instead, with the mask marking real points.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    out = np.zeros((n_points, 2))
    mask = np.zeros(n_points, bool)
    if len(pts) == 0:
        return out, mask
    if len(pts) == 1:
        out[:] = pts[0]
        mask[0] = True
        return out, mask
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0.0:
        out[:] = pts[0]
        mask[:] = True
        return out, mask
    targets = np.linspace(0.0, s[-1], n_points)
    out[:, 0] = np.interp(targets, s, pts[:, 0])
    out[:, 1] = np.interp(targets, s, pts[:, 1])
    mask[:] = True
    return out, mask


@dataclass
class SceneTensors:
    """Dense, padded feature tensors for one scenario history.

    Agent rows list predicted agents first. Time axis of agent tensors covers
    history steps ``1 .. T_h-1`` (one row per move statement). All positions
    are relative to :meth:`Scenario.origin`.
    """

    agent_hist: np.ndarray  # [A, T_h-1, 4]
    agent_pos: np.ndarray  # [A, T_h-1, 2]
    agent_attrs: np.ndarray  # [A, ATTR_DIM]
    light_feats: np.ndarray  # [S, T_h, 6]
    map_feats: np.ndarray  # [1, L, P, 6]
    agent_mask: np.ndarray  # [A]
    step_mask: np.ndarray  # [A, T_h-1]
    light_mask: np.ndarray  # [S]
    map_mask: np.ndarray  # [L]
    map_point_mask: np.ndarray  # [L, P]
    num_predicted: int
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))


def agent_attributes(track: AgentTrack, predicted: bool) -> np.ndarray:
    attrs = np.zeros(ATTR_DIM)
    attrs[0] = track.width
    attrs[1] = track.height
    attrs[2] = 1.0 if predicted else 0.0
    attrs[3 + AGENT_KINDS.index(track.kind)] = 1.0
    return attrs


def to_feature_tensors(
    s: Scenario,
    n_points: int = 20,
    max_agents: Optional[int] = None,
    max_lights: Optional[int] = None,
    max_polylines: Optional[int] = None,
) -> SceneTensors:
    """Convert a history-only scenario into padded feature tensors.

    Padding rows are all zero with their masks false.
    """
    agents = s.all_agents
    for a in agents:
        if len(a) != s.T_h:
            raise ShapeError(f"agent {a.id}: track length {len(a)} != T_h={s.T_h}; call Scenario.history() first")
    T = s.T_h - 1
    A = len(agents) if max_agents is None else max_agents
    S = len(s.lights) if max_lights is None else max_lights
    L = len(s.map) if max_polylines is None else max_polylines
    if A < len(agents) or S < len(s.lights) or L < len(s.map):
        raise ShapeError("padding size smaller than scenario content")
    origin = s.origin()

    agent_hist = np.zeros((A, T, MOVE_DIM))
    agent_pos = np.zeros((A, T, 2))
    agent_attrs = np.zeros((A, ATTR_DIM))
    agent_mask = np.zeros(A, bool)
    step_mask = np.zeros((A, T), bool)
    for i, a in enumerate(agents):
        st = a.states
        ok = a.valid[1:] & a.valid[:-1]
        d = np.diff(st, axis=0)
        d[:, 2] = wrap_angle(d[:, 2])
        agent_hist[i] = np.where(ok[:, None], d, 0.0)
        agent_pos[i] = np.where(a.valid[1:, None], st[1:, :2] - origin, 0.0)
        agent_attrs[i] = agent_attributes(a, i < s.num_predicted)
        agent_mask[i] = bool(a.valid[-1])
        step_mask[i] = ok

    light_feats = np.zeros((S, s.T_h, LIGHT_DIM))
    light_mask = np.zeros(S, bool)
    for i, light in enumerate(s.lights):
        light_feats[i, :, :2] = np.asarray(light.position) - origin
        light_feats[i, :, 2:] = light.one_hot()
        light_mask[i] = True

    map_feats = np.zeros((1, L, n_points, MAP_DIM))
    map_point_mask = np.zeros((L, n_points), bool)
    for i, poly in enumerate(s.map):
        pts, pmask = resample_polyline(poly.points, n_points)
        map_feats[0, i, :, :2] = np.where(pmask[:, None], pts - origin, 0.0)
        map_feats[0, i, :, 2:] = np.where(pmask[:, None], poly.one_hot(), 0.0)
        map_point_mask[i] = pmask
    map_mask = map_point_mask.any(axis=1)

    return SceneTensors(
        agent_hist,
        agent_pos,
        agent_attrs,
        light_feats,
        map_feats,
        agent_mask,
        step_mask,
        light_mask,
        map_mask,
        map_point_mask,
        s.num_predicted,
        origin,
    )


def future_targets(s: Scenario, agents: Sequence[AgentTrack] = None):
    """Ground-truth futures ``[A, T_f, 3]`` of ``(x, y, theta)`` with validity ``[A, T_f]``."""
    agents = s.predicted_agents if agents is None else agents
    gt = np.zeros((len(agents), s.T_f, 3))
    mask = np.zeros((len(agents), s.T_f), bool)
    for i, a in enumerate(agents):
        if len(a) != s.T_h + s.T_f:
            raise ShapeError(f"agent {a.id}: no future states (length {len(a)})")
        fut = a.states[s.T_h :]
        gt[i] = fut[:, :3]
        mask[i] = a.valid[s.T_h :]
    return gt, mask
