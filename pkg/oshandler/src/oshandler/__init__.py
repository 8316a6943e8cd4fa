"""External fault handler and report plotting for the vmsim simulator."""

__version__ = "0.1.0"
