"""Linear layers and MLPs on the tensor engine.

Weight init is fan-in scaled; an optional per-input-feature scale vector is
folded into the first-layer init so raw, unnormalized point parameters
(log-scales near -4, opacity logits near 2, SH entries near 0.05) enter the
network well conditioned without breaking the layers' affine contract.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError


class Linear:
    """Affine map x @ W + b over row vectors."""

    def __init__(
        self,
        rng: np.random.Generator,
        n_in: int,
        n_out: int,
        dtype=np.float32,
        zero_init: bool = False,
        in_scale: np.ndarray | None = None,
    ):
        self.n_in = n_in
        self.n_out = n_out
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
            if in_scale is not None:
                w /= np.asarray(in_scale, dtype=np.float64).reshape(n_in, 1)
        self.weight = T.Tensor(w.astype(dtype), requires_grad=True)
        self.bias = T.Tensor(np.zeros((1, n_out), dtype=dtype), requires_grad=True)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"linear layer expects (*, {self.n_in}), got {x.shape}")
        return T.matmul(x, self.weight) + self.bias

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.weight, f"{prefix}.b": self.bias}


class MLP:
    """Stack of affine layers with tanh between them (last layer linear)."""

    def __init__(
        self,
        rng: np.random.Generator,
        sizes: list[int],
        dtype=np.float32,
        zero_last: bool = False,
        in_scale: np.ndarray | None = None,
    ):
        self.layers = []
        for i in range(len(sizes) - 1):
            last = i == len(sizes) - 2
            self.layers.append(
                Linear(
                    rng,
                    sizes[i],
                    sizes[i + 1],
                    dtype=dtype,
                    zero_init=zero_last and last,
                    in_scale=in_scale if i == 0 else None,
                )
            )

    def __call__(self, x: T.Tensor) -> T.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.tanh(x)
        return x

    def params(self, prefix: str) -> dict:
        out: dict = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}.l{i}"))
        return out


def load_params(params: dict, values: dict) -> None:
    """Copy checkpoint arrays into a named parameter dict, shape-checked."""
    for name, p in params.items():
        if name not in values:
            raise ShapeError(f"checkpoint is missing parameter {name!r}")
        arr = values[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise ShapeError(f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data = arr.astype(p.dtype)
