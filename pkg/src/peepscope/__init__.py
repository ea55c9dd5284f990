"""Explainable anomaly detection for reaction-wheel telemetry.

A convolutional autoencoder flags anomalous 16x16 telemetry chunks; the input
of its latent dense layer is reduced, clustered and mapped onto
human-readable tags (anomaly kind or faulty wheel), giving a "peephole"
probability vector per flagged chunk.
"""

from peepscope.errors import ArtifactError, ConfigError, NumericError, ParseError, PeepscopeError

__version__ = "0.1.0"

__all__ = ["ArtifactError", "ConfigError", "NumericError", "ParseError", "PeepscopeError", "__version__"]
