"""Few-shot domain-adaptive gyroscope denoising for IMU orientation estimation."""

__version__ = "0.1.0"
