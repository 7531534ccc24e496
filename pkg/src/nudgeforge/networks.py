"""MLP, convolutional trunk, and the branch/trunk deep neural operator.

Parameters are plain ordered dicts (name -> array or Tensor). The forward
functions accept either, so the same code runs inside a recorded training
pass and in cheap inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .observation import Rng


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple

    def __post_init__(self):
        if len(self.widths) < 2 or any(int(w) <= 0 for w in self.widths):
            raise ValueError(f"invalid MLP widths {self.widths}")

    @property
    def n_layers(self):
        return len(self.widths) - 1


@dataclass(frozen=True)
class DnoSpec:
    """Geometry of the neural nudging operator.

    ``state_extents`` is the spatial grid of the state (``(40,)`` or
    ``(32, 32)``); observations sit on the same grid subsampled by ``factor``
    per axis. The trunk upsamples by ``factor`` with a transposed convolution.
    """

    state_extents: tuple
    factor: int = 1
    channels: int = 20
    kernel: int = 5

    def __post_init__(self):
        object.__setattr__(self, "state_extents", tuple(int(e) for e in self.state_extents))
        if len(self.state_extents) not in (1, 2):
            raise ValueError("only 1D and 2D grids are supported")
        if self.factor < 1 or any(e % self.factor for e in self.state_extents):
            raise ValueError(f"factor {self.factor} does not divide {self.state_extents}")
        if self.channels < 1 or self.kernel % 2 == 0:
            raise ValueError("need channels >= 1 and an odd kernel width")

    @property
    def ndim(self):
        return len(self.state_extents)

    @property
    def state_dim(self):
        return int(np.prod(self.state_extents))

    @property
    def obs_extents(self):
        return tuple(e // self.factor for e in self.state_extents)

    @property
    def obs_dim(self):
        return int(np.prod(self.obs_extents))

    def to_dict(self):
        return {"state_extents": list(self.state_extents), "factor": self.factor,
                "channels": self.channels, "kernel": self.kernel}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["state_extents"]), d["factor"], d["channels"], d["kernel"])


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return ((2.0 * rng.uniform(int(np.prod(shape))) - 1.0) * bound).reshape(shape).astype(dtype)


def init_mlp(spec, rng, prefix="mlp", dtype=np.float32):
    params = {}
    for i, (d_in, d_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        params[f"{prefix}.{i}.weight"] = _uniform(rng, (d_out, d_in), d_in, dtype)
        params[f"{prefix}.{i}.bias"] = np.zeros(d_out, dtype=dtype)
    return params


def init_params(spec, seed, dtype=np.float32):
    """Initial DNO parameters: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = Rng(seed).substream("weight-init")
    C, k = spec.channels, spec.kernel
    taps = (k,) * spec.ndim
    params = init_mlp(MlpSpec((spec.state_dim, C, C)), rng, "branch", dtype)
    params["trunk.up.weight"] = _uniform(rng, (1, C) + taps, k**spec.ndim, dtype)
    params["trunk.up.bias"] = np.zeros((C,) + spec.state_extents, dtype=dtype)
    params["trunk.conv.weight"] = _uniform(rng, (C, C) + taps, C * k**spec.ndim, dtype)
    params["trunk.conv.bias"] = np.zeros((C,) + spec.state_extents, dtype=dtype)
    return params


def mlp_forward(params, x, prefix="mlp"):
    """tanh hidden layers, affine output layer."""
    n_layers = 0
    while f"{prefix}.{n_layers}.weight" in params:
        n_layers += 1
    if n_layers == 0:
        raise KeyError(f"no layers under prefix {prefix!r}")
    h = x
    for i in range(n_layers):
        h = ad.matvec(params[f"{prefix}.{i}.weight"], h, params[f"{prefix}.{i}.bias"])
        if i < n_layers - 1:
            h = ad.tanh(h)
    return h


def trunk_forward(params, spec, innovation):
    """Map innovations (..., p) to basis fields (..., C, *state_extents)."""
    lead = np.shape(ad._raw(innovation))[:-1]
    z = ad.reshape(innovation, lead + (1,) + spec.obs_extents)
    if spec.ndim == 1:
        up, conv = ad.conv_transpose1d_circular, ad.conv1d_circular
    else:
        up, conv = ad.conv_transpose2d_circular, ad.conv2d_circular
    t = up(z, params["trunk.up.weight"], params["trunk.up.bias"], stride=spec.factor)
    t = ad.tanh(t)
    return conv(t, params["trunk.conv.weight"], params["trunk.conv.bias"])


def dno_forward(params, spec, state, innovation):
    """Correction ``sum_c branch_c(state) * trunk_c(innovation)`` as a flat state."""
    s_shape = np.shape(ad._raw(state))
    i_shape = np.shape(ad._raw(innovation))
    if s_shape[-1:] != (spec.state_dim,) or i_shape[-1:] != (spec.obs_dim,) \
            or s_shape[:-1] != i_shape[:-1]:
        raise ad.ShapeError("dno_forward", "state/innovation do not match the operator spec",
                            (s_shape, i_shape))
    coeffs = mlp_forward(params, state, "branch")
    basis = trunk_forward(params, spec, innovation)
    out = ad.channel_combine(coeffs, basis)
    return ad.reshape(out, s_shape)
