"""Minimum-width leaky-ReLU networks: construction, compilation and witnesses."""

from .nn_core import (
    Activation,
    AffineMap,
    BoxDomain,
    NarrowNet,
    NetworkError,
    NonInvertible,
    compose,
    compose_many,
    deserialize_net,
    eval_net,
    invert_net,
    leaky_relu,
    leaky_relu_inverse,
    min_width,
    serialize_net,
)

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "AffineMap",
    "BoxDomain",
    "NarrowNet",
    "NetworkError",
    "NonInvertible",
    "compose",
    "compose_many",
    "deserialize_net",
    "eval_net",
    "invert_net",
    "leaky_relu",
    "leaky_relu_inverse",
    "min_width",
    "serialize_net",
]
