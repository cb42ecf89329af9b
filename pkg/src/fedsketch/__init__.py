"""Federated LoRA fine-tuning with client sampling and rank sketching."""

from .errors import FedSketchError
from .lora import LoraState, SketchMatrix, apply_sketch, init_lora_state, sample_sketch
from .planner import ConvergenceConstants, alternate, estimate_constants, p2_objective
from .protocol import Plan, run_round
from .timing import ClientProfile, RoundRecord, SystemConfig, realized_round_time

__all__ = [
    "ClientProfile",
    "ConvergenceConstants",
    "FedSketchError",
    "LoraState",
    "Plan",
    "RoundRecord",
    "SketchMatrix",
    "SystemConfig",
    "alternate",
    "apply_sketch",
    "estimate_constants",
    "init_lora_state",
    "p2_objective",
    "realized_round_time",
    "run_round",
    "sample_sketch",
]
