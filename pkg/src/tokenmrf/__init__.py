"""Fully-connected token MRF with hand-written mean-field inference and training,
plus the masked-token teacher, oracles and benchmark harness around it."""

from .mrf import energy, map_decode, mean_field_infer, variational_free_energy
from .types import (
    DecodeSchedule,
    GridGeometry,
    LogitField,
    MarginalField,
    MaskedTokenGrid,
    MRFParams,
    TokenGrid,
    ValidationError,
    VocabSpec,
    cosine_schedule,
)

__version__ = "0.1.0"
