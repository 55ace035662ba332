"""Joint multi-fidelity emulation and calibration with a multi-block probabilistic network."""

__version__ = "0.1.0"
