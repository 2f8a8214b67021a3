"""Iterative redesign of failed clinical-trial protocols against a success-probability oracle."""

from .protocol import FailureMode, Phase, TrialProtocol, canonicalize, hash_protocol, load_protocol, parse_protocol

__version__ = "0.1.0"

__all__ = ["FailureMode", "Phase", "TrialProtocol", "canonicalize", "hash_protocol", "load_protocol", "parse_protocol"]
