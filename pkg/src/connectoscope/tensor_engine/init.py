"""Weight initialisers keyed by the activation that follows the layer."""

from __future__ import annotations

import math

import numpy as np


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def lecun_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(1.0 / fan_in), size=shape)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_weight(rng: np.random.Generator, shape, fan_in: int, fan_out: int, activation: str | None) -> np.ndarray:
    if activation == "selu":
        return lecun_normal(rng, shape, fan_in)
    if activation == "relu":
        return kaiming_uniform(rng, shape, fan_in)
    return glorot_uniform(rng, shape, fan_in, fan_out)
