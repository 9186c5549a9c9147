"""Observation encoder: Gabor-filtered multiplicative network.

Each observed point (u_i, x_i) maps independently to a hidden vector. The
coordinate enters through a stack of Gabor filters (Gaussian envelope times
a sinusoid, one envelope/frequency per output row); the observation value
enters additively through a shared learned lift, once per layer.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError


def _linear_init(rng, fan_in: int, fan_out: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return Tensor(w.astype(T.default_dtype()), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=T.default_dtype()), requires_grad=True)


def build_gabor_layer(rng, width: int, coord_dim: int = 2,
                      freq_std: float = 2 * np.pi) -> dict:
    """One Gabor filter bank: means, scale matrix, frequency rows, phases."""
    dt = T.default_dtype()
    mu = rng.uniform(0.0, 1.0, size=(width, coord_dim))
    # row scale ~ Gamma(6, 1); stored as a matrix whose row norm is that scale
    scale = rng.gamma(shape=6.0, scale=1.0, size=width)
    gamma = np.outer(scale, np.full(coord_dim, 1.0 / np.sqrt(coord_dim)))
    freq = rng.normal(0.0, freq_std, size=(coord_dim, width))
    phase = rng.uniform(-np.pi, np.pi, size=width)
    return {
        "mu": Tensor(mu.astype(dt), requires_grad=True),
        "gamma": Tensor(gamma.astype(dt), requires_grad=True),
        "freq": Tensor(freq.astype(dt), requires_grad=True),
        "phase": Tensor(phase.astype(dt), requires_grad=True),
    }


def build_encoder_params(rng, width: int = 128, n_layers: int = 5,
                         obs_channels: int = 1, coord_dim: int = 2,
                         freq_base: float = 2 * np.pi) -> dict:
    """MFN parameters: n_layers Gabor banks (frequency growing with depth),
    per-layer linear maps, a final linear map, and the observation lift."""
    if n_layers < 2:
        raise ShapeError("encoder needs at least 2 layers")
    params: dict = {"lift_w": _linear_init(rng, obs_channels, width),
                    "lift_b": _zeros(width)}
    for k in range(n_layers):
        params[f"gabor{k}"] = build_gabor_layer(rng, width, coord_dim,
                                                freq_std=freq_base * (k + 1))
    for k in range(n_layers):
        params[f"w{k}"] = _linear_init(rng, width, width)
        params[f"b{k}"] = _zeros(width)
    return params


def _depth(params: dict) -> int:
    return sum(1 for k in params if k.startswith("gabor"))


def gabor_filter(x, layer: dict) -> Tensor:
    """Apply one Gabor bank to coordinates x (P, d_x) -> (P, width).

    Row j: exp(-(scale_j / 2) * ||x - mu_j||^2) * sin(freq_j . x + phase_j),
    where scale_j is the row norm of the (clamped nonnegative) scale matrix.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    mu, gamma, freq, phase = layer["mu"], layer["gamma"], layer["freq"], layer["phase"]
    if x.shape[1] != mu.shape[1]:
        raise ShapeError(f"coordinate dim {x.shape[1]} != filter dim {mu.shape[1]}")
    g_pos = T.relu(gamma)
    scale = T.sqrt(T.reduce_sum(g_pos * g_pos, axis=1, keepdims=True))      # (width, 1)
    # squared distances via expansion: ||x||^2 + ||mu||^2 - 2 x.mu
    x_sq = T.reduce_sum(x * x, axis=1, keepdims=True)                       # (P, 1)
    mu_sq = T.transpose2d(T.reduce_sum(mu * mu, axis=1, keepdims=True))     # (1, width)
    cross = x @ T.transpose2d(mu)                                           # (P, width)
    dist_sq = x_sq + mu_sq - 2.0 * cross
    envelope = T.exp(-0.5 * (dist_sq * T.transpose2d(scale)))
    wave = T.sin(x @ freq + T.reshape(phase, (1, -1)))
    return envelope * wave


def mfn_encode(u, x, params: dict) -> Tensor:
    """Encode observations u (P, C_u) at coordinates x (P, d_x) -> (P, width).

    rho^1 = g_1(x); rho^{k+1} = (u~ + rho^k W_k + b_k) * g_{k+1}(x);
    output = u~ + rho^M W_M + b_M, with u~ the lifted observation.
    """
    u = u if isinstance(u, Tensor) else Tensor(u)
    x = x if isinstance(x, Tensor) else Tensor(x)
    if u.shape[0] != x.shape[0]:
        raise ShapeError(f"{u.shape[0]} observations vs {x.shape[0]} coordinates")
    if u.shape[1] != params["lift_w"].shape[0]:
        raise ShapeError(f"observation channels {u.shape[1]} != lift input {params['lift_w'].shape[0]}")
    n_layers = _depth(params)
    lifted = u @ params["lift_w"] + T.reshape(params["lift_b"], (1, -1))
    rho = gabor_filter(x, params["gabor0"])
    for k in range(n_layers - 1):
        pre = lifted + rho @ params[f"w{k}"] + T.reshape(params[f"b{k}"], (1, -1))
        rho = pre * gabor_filter(x, params[f"gabor{k + 1}"])
    k = n_layers - 1
    return lifted + rho @ params[f"w{k}"] + T.reshape(params[f"b{k}"], (1, -1))


# --- ablation variant: plain MLP on [u, x] ---------------------------------

def build_mlp_encoder_params(rng, width: int = 128, obs_channels: int = 1,
                             coord_dim: int = 2) -> dict:
    return {
        "w1": _linear_init(rng, obs_channels + coord_dim, width),
        "b1": _zeros(width),
        "w2": _linear_init(rng, width, width),
        "b2": _zeros(width),
    }


def mlp_encode(u, x, params: dict) -> Tensor:
    u = u if isinstance(u, Tensor) else Tensor(u)
    x = x if isinstance(x, Tensor) else Tensor(x)
    z = T.concat([u, x], axis=1)
    h = T.tanh(z @ params["w1"] + T.reshape(params["b1"], (1, -1)))
    return h @ params["w2"] + T.reshape(params["b2"], (1, -1))
