"""LSTM variants trained with BPTT, plus the tooling to compare them.

Submodules: ``numerics``, ``lstm``, ``network``, ``training``, ``gradcheck``,
``search``, ``fanova``, ``stats``, ``data`` and ``cli``.
"""

from .lstm import PRESETS, VariantSpec, get_preset
from .network import NetworkConfig, init_network
from .numerics import ConfigurationError

__all__ = ["PRESETS", "VariantSpec", "get_preset", "NetworkConfig", "init_network",
           "ConfigurationError"]
__version__ = "0.1.0"
