"""Shuttered heralded single-photon source: event-stream simulator and estimators."""

from hsps.streams import EventStream, Origin, generate_poisson_stream, apply_jitter, thin_stream
from hsps.instrument import (
    DetectorModel,
    ExperimentConfig,
    RunRecords,
    ShutterSchedule,
    SwitchProfile,
    TriggerRecord,
    reference_config,
    run_experiment,
)

__all__ = [
    "DetectorModel",
    "EventStream",
    "ExperimentConfig",
    "Origin",
    "RunRecords",
    "ShutterSchedule",
    "SwitchProfile",
    "TriggerRecord",
    "apply_jitter",
    "generate_poisson_stream",
    "reference_config",
    "run_experiment",
    "thin_stream",
]
__version__ = "0.1.0"
