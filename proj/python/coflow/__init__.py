"""Cooperative detection simulator with feature-flow latency compensation."""

from ._coflow import (
    ConfigError,
    FormatError,
    average_precision,
    early_fusion_bytes,
    flow_loss,
    late_fusion_bytes,
    message_roundtrip,
    parse_message,
    simulate,
    tensor_payload_bytes,
    variants,
    verify,
)

__all__ = [
    "ConfigError",
    "FormatError",
    "average_precision",
    "early_fusion_bytes",
    "flow_loss",
    "late_fusion_bytes",
    "message_roundtrip",
    "parse_message",
    "simulate",
    "tensor_payload_bytes",
    "variants",
    "verify",
]
