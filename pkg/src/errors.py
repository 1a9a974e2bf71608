from __future__ import annotations


class AkinError(RuntimeError):
    """Base class for every error raised by the pipeline."""

    exit_code = 2


class ConfigError(AkinError):
    exit_code = 1


class VolumeError(AkinError):
    exit_code = 1


class RegistrationError(AkinError):
    pass


class GeometryError(AkinError):
    pass


class KinematicsError(AkinError):
    pass


class SynthesisError(AkinError):
    pass


class VerificationError(AkinError):
    pass


class AcceptanceError(AkinError):
    exit_code = 3
