"""Chaos-free and decoupled-gate recurrent networks for system identification, with stability certificates."""
from .rnn import (
    GateActivations,
    LayerParams,
    Mode,
    NetworkParams,
    default_initial_state,
    init_network,
    layer_gates,
    layer_step,
    network_step,
    sigmoid,
    simulate,
    tanh_act,
)
from .stability import NetworkCertificate, empirical_delta_iss_check, network_certificate

__version__ = "0.1.0"

__all__ = [
    "GateActivations",
    "LayerParams",
    "Mode",
    "NetworkCertificate",
    "NetworkParams",
    "default_initial_state",
    "empirical_delta_iss_check",
    "init_network",
    "layer_gates",
    "layer_step",
    "network_certificate",
    "network_step",
    "sigmoid",
    "simulate",
    "tanh_act",
]
