"""Discrete latent corrector applied at a fixed cadence.

Compress (strided conv + layer norm + sigmoid), transition (1x1 bottleneck,
parallel grouped convs of kernel 3/5/7 summed, 1x1 restore), expand
(transposed conv + tanh). The operator reads only its argument, so repeated
calls on the same state are bit-identical; the tanh output range means one
blended correction moves any latent entry by at most the blend weight.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, ContractError


def build_corrector_params(rng, channels: int) -> dict:
    """Corrector weights for a latent grid with the given channel count.

    The transition bottleneck halves the channels and its grouped convs use
    4 groups, so ``channels`` must be divisible by 8.
    """
    if channels % 8:
        raise ContractError(f"corrector needs channels divisible by 8, got {channels}")
    half = channels // 2
    dt = T.default_dtype()

    def conv_w(kh, kw, cin, cout, groups=1):
        fan = kh * kw * (cin // groups)
        bound = 1.0 / np.sqrt(fan)
        w = rng.uniform(-bound, bound, size=(kh, kw, cin // groups, cout))
        return Tensor(w.astype(dt), requires_grad=True)

    def vec(n, value=0.0):
        return Tensor(np.full(n, value, dtype=dt), requires_grad=True)

    return {
        "enc": {"w": conv_w(2, 2, channels, channels), "b": vec(channels),
                "ln_g": vec(channels, 1.0), "ln_b": vec(channels)},
        "mix": {"in_w": conv_w(1, 1, channels, half), "in_b": vec(half),
                "g3_w": conv_w(3, 3, half, half, groups=4), "g3_b": vec(half),
                "g5_w": conv_w(5, 5, half, half, groups=4), "g5_b": vec(half),
                "g7_w": conv_w(7, 7, half, half, groups=4), "g7_b": vec(half),
                "out_w": conv_w(1, 1, half, channels), "out_b": vec(channels)},
        "dec": {"w": conv_w(2, 2, channels, channels), "b": vec(channels)},
    }


def markov_step(z: Tensor, params: dict) -> Tensor:
    """One corrector evaluation r(z); same shape as z, entries in (-1, 1).

    z is an NHWC latent grid with even spatial extents (the encoder halves
    them, the decoder restores them exactly).
    """
    if z.ndim != 4:
        raise ContractError(f"corrector expects an NHWC latent grid, got shape {z.shape}")
    _, H, W, _ = z.shape
    if H % 2 or W % 2:
        raise ContractError(f"corrector needs even grid extents, got {H}x{W}")
    enc, mix, dec = params["enc"], params["mix"], params["dec"]
    e = T.conv2d(z, enc["w"], enc["b"], stride=2)
    e = T.sigmoid(T.layer_norm(e, enc["ln_g"], enc["ln_b"]))
    m = T.conv2d(e, mix["in_w"], mix["in_b"])
    g = T.conv2d(m, mix["g3_w"], mix["g3_b"], groups=4) \
        + T.conv2d(m, mix["g5_w"], mix["g5_b"], groups=4) \
        + T.conv2d(m, mix["g7_w"], mix["g7_b"], groups=4)
    m = T.conv2d(g, mix["out_w"], mix["out_b"])
    return T.tanh(T.conv2d_transpose(m, dec["w"], dec["b"], stride=2))


def correct_step(z_pre: Tensor, z_prev_corrected: Tensor, lam: float,
                 params: dict) -> Tensor:
    """Blend the corrector's output into the evolved state:
    z_post = z_pre + lam * r(z_prev_corrected). lam = 0 is the exact identity."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"blend weight must lie in [0, 1], got {lam}")
    if z_pre.shape != z_prev_corrected.shape:
        raise ContractError(
            f"state shapes differ: {z_pre.shape} vs {z_prev_corrected.shape}")
    if lam == 0.0:
        return z_pre
    return z_pre + lam * markov_step(z_prev_corrected, params)
