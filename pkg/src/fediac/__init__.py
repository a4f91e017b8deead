"""In-network federated learning with voting-based consensus compression."""

from .analysis import PowerLawFit, ThresholdTuner, fit_power_law, gamma, min_bits
from .compression import QuantConfig, compress, make_quant_config, quantize, vote
from .fltrain import FederatedClassifier
from .switch import Packet, Phase, SwitchState

__version__ = "0.1.0"

__all__ = [
    "FederatedClassifier",
    "Packet",
    "Phase",
    "PowerLawFit",
    "QuantConfig",
    "SwitchState",
    "ThresholdTuner",
    "compress",
    "fit_power_law",
    "gamma",
    "make_quant_config",
    "min_bits",
    "quantize",
    "vote",
]
