"""Simulator for teleporting a cat-state qubit between microwave cavities."""

from .fock import (
    FieldState,
    FockCutoff,
    TruncationError,
    coherent_state,
    displacement_matrix,
    even_cat,
    number_phase_matrix,
    odd_cat,
    required_n_max,
)
from .hilbert import (
    DensityMatrix,
    DimensionError,
    ImpossibleOutcome,
    PureState,
    SubsystemLayout,
    apply_kraus,
    apply_unitary,
    fidelity,
    partial_trace,
    project,
    tensor,
    trace_distance,
)
from .protocol import (
    ConfigError,
    ProtocolConfig,
    RoundCapExceeded,
    TrajectoryRecord,
    bell_prep_until_success,
    teleport_full,
    timing_budget,
)

__version__ = "0.1.0"
