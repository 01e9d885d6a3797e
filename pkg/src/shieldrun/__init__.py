"""Simulated shielded execution: enclave runtime, shields, attestation and a small ML engine."""

from .enclave import CostModel, Enclave, EnclaveConfig, Measurement, Mode, create_enclave, measure
from .fsshield import FileShield, PathPolicy, ShieldMode
from .scheduler import Scheduler, VirtualClock

__all__ = [
    "CostModel", "Enclave", "EnclaveConfig", "Measurement", "Mode", "create_enclave", "measure",
    "FileShield", "PathPolicy", "ShieldMode", "Scheduler", "VirtualClock",
]
__version__ = "0.1.0"
