"""Diffusion-based multi-agent traffic scene generation at desk scale."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BinError,
    EmptyOverlap,
    InvalidState,
    NoHistory,
    NoMap,
    NonFiniteError,
    NonFiniteGradient,
    ParseError,
    RangeError,
    SceneDiffError,
    ShapeError,
    SpecError,
    TrackTooShort,
    ValidationError,
)
from .scene import (  # noqa: E402
    AgentTrack,
    MapPolyline,
    MoveStatementSeq,
    Scenario,
    TrafficLightRecord,
    compute_move_statements,
    integrate_move_statements,
    to_feature_tensors,
)
from .scenario_io import CorpusSpec, generate_corpus, load_scenarios, save_scenarios, split_scenarios  # noqa: E402
