"""gyrocal: learned MEMS gyroscope calibration and attitude evaluation."""

__version__ = "0.1.0"
