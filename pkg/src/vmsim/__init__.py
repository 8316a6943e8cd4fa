"""vmsim: a trace-driven virtual-memory simulator."""

from .config import ConfigError, default_config, load_config, validate_config
from .core import Pte, Rng, mix64, rng_next, split_radix_indices, vpn_of
from .engine import RunAbort, Simulation, run
from .memmgr import BuddyAllocator

__version__ = "0.1.0"

__all__ = [
    "BuddyAllocator",
    "ConfigError",
    "Pte",
    "Rng",
    "RunAbort",
    "Simulation",
    "default_config",
    "load_config",
    "mix64",
    "rng_next",
    "run",
    "split_radix_indices",
    "validate_config",
    "vpn_of",
]
