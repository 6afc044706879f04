"""Parameter initialisation and dense layers over :mod:`gsmeta.autodiff`.

Parameters live in flat ``{name: ndarray}`` dicts so that inner-loop updates
are plain dictionary arithmetic; forward passes wrap them as tensors with
:func:`as_leaves`.
"""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autodiff as ad


def uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_linear(params: dict, name: str, n_in: int, n_out: int, rng: np.random.Generator) -> None:
    params[f"{name}.w"] = uniform(rng, n_in, (n_in, n_out))
    params[f"{name}.b"] = uniform(rng, n_in, (n_out,))


def init_mlp(params: dict, name: str, sizes, rng: np.random.Generator) -> None:
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        init_linear(params, f"{name}.{k}", n_in, n_out, rng)


def linear(p: Mapping[str, ad.Tensor], name: str, x: ad.Tensor) -> ad.Tensor:
    return ad.matmul(x, p[f"{name}.w"]) + p[f"{name}.b"]


def mlp(p: Mapping[str, ad.Tensor], name: str, x: ad.Tensor, n_layers: int = 2) -> ad.Tensor:
    """Dense stack with LeakyReLU between layers and a linear output."""
    for k in range(n_layers):
        x = linear(p, f"{name}.{k}", x)
        if k < n_layers - 1:
            x = ad.leaky_relu(x)
    return x


def as_leaves(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, ad.Tensor]:
    return {k: ad.Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def copy_params(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def cast_params(params: Mapping[str, np.ndarray], dtype) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
