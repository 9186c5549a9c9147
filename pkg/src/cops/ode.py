"""Multi-scale graph dynamics on the latent grid and a fixed-step RK4 solver.

The vector field runs L blocks; each block message-passes independently at
every scale of a stride-doubling "jump adjacency" hierarchy and fuses the
per-scale results with cosine-similarity attention weights. The field is
autonomous, and integration is classical RK4 on a fixed step lattice so
that split solves restart bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, ContractError, NumericError
from .gridmap import GridSpec


@dataclass
class _Scale:
    stride: int
    idx_stack: np.ndarray   # (4, n_total) neighbor columns (+x, -x, +y, -y)
    inv_stack: np.ndarray   # (4, n_total) inverse permutations
    col_weight: np.ndarray  # (4,) dedupe weights
    degree: float


@dataclass
class HierarchicalGraph:
    grid: GridSpec
    n_batch: int
    scales: list

    @property
    def n_scales(self):
        return len(self.scales)

    def neighbor_set(self, s: int, node: int) -> set:
        """Unique neighbors of a node at scale index s (test/inspection aid)."""
        return {int(col[node]) for col in self.scales[s].idx_stack}


def build_hierarchy(grid: GridSpec, n_scales: int, n_batch: int = 1) -> HierarchicalGraph:
    """Stride-2^(s-1) symmetric 4-neighborhoods over the vertex lattice."""
    if n_scales < 1:
        raise ContractError("need at least one scale")
    if 2 ** (n_scales - 1) >= min(grid.h, grid.w):
        raise ContractError(
            f"scale count {n_scales} too large for grid {grid.h}x{grid.w}: "
            f"stride {2 ** (n_scales - 1)} must stay below the smaller extent")
    n = grid.n_vertices
    r, c = np.divmod(np.arange(n), grid.w)
    scales = []
    for s in range(n_scales):
        d = 2 ** s
        base_cols = [grid.vertex_id(r, c + d), grid.vertex_id(r, c - d),
                     grid.vertex_id(r + d, c), grid.vertex_id(r - d, c)]
        idx = np.empty((4, n * n_batch), dtype=np.int64)
        inv = np.empty_like(idx)
        for k, col in enumerate(base_cols):
            full = (col[None, :] + np.arange(n_batch)[:, None] * n).reshape(-1)
            idx[k] = full
            inv[k, full] = np.arange(full.size)
        # +/- strides landing on the same node count once in the neighbor set
        w = np.ones(4)
        if 2 * d == grid.w:
            w[0] = w[1] = 0.5
        if 2 * d == grid.h:
            w[2] = w[3] = 0.5
        scales.append(_Scale(d, idx, inv, w, float(w.sum())))
    return HierarchicalGraph(grid, n_batch, scales)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def build_ode_params(rng, width: int, n_scales: int, n_layers: int) -> dict:
    def lin(n_in, n_out, gain=1.0, fan=None):
        bound = gain / np.sqrt(fan or n_in)
        return Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(T.default_dtype()),
                      requires_grad=True)

    def vec(n):
        return Tensor(np.zeros(n, dtype=T.default_dtype()), requires_grad=True)

    params: dict = {"w_query": lin(width, width), "w_key": lin(width, width),
                    "head_w": lin(width, width, gain=0.1), "head_b": vec(width)}
    for l in range(n_layers):
        layer = {}
        for s in range(n_scales):
            # combine's linear over [h || agg], stored as its two row blocks
            layer[f"scale{s}"] = {"agg_w": lin(width, width), "agg_b": vec(width),
                                  "comb_self": lin(width, width, fan=2 * width),
                                  "comb_nbr": lin(width, width, fan=2 * width),
                                  "comb_b": vec(width)}
        params[f"layer{l}"] = layer
    return params


# ---------------------------------------------------------------------------
# message passing blocks
# ---------------------------------------------------------------------------

def scale_message_pass(h: Tensor, scale: _Scale, params: dict) -> Tensor:
    """Aggregate = mean over the scale's neighbors of a shared linear map;
    combine = residual + relu(linear([h || aggregate])), with the block
    structure of the concatenated linear written out explicitly."""
    nbr_mean = T.neighbor_mean(h, scale.idx_stack, scale.inv_stack,
                               scale.col_weight, scale.degree)
    agg = nbr_mean @ params["agg_w"] + params["agg_b"]
    upd = T.relu(h @ params["comb_self"] + agg @ params["comb_nbr"]
                 + params["comb_b"])
    return h + upd


def attention_fuse(scale_states: list, h_prev: Tensor, w_query: Tensor,
                   w_key: Tensor, softmax: bool = False) -> Tensor:
    """Fuse per-scale states with cosine-similarity attention against the
    previous fused state. Raw weights by default (no cross-scale
    normalization); optional softmax over scales."""
    key = h_prev @ w_key
    alphas = [T.cosine_similarity(s @ w_query, key) for s in scale_states]
    if softmax:
        exps = [T.exp(a) for a in alphas]
        total = exps[0]
        for e in exps[1:]:
            total = total + e
        alphas = [T.div(e, total) for e in exps]
    fused = None
    for a, s in zip(alphas, scale_states):
        term = T.reshape(a, (-1, 1)) * s
        fused = term if fused is None else fused + term
    return fused


class OdeFunc:
    """dh/dt over all vertex latents: L blocks of scale-wise message passing
    plus attention fusion, then a linear head. Autonomous (t is ignored)."""

    def __init__(self, params: dict, graph: HierarchicalGraph, n_layers: int,
                 softmax: bool = False):
        self.params = params
        self.graph = graph
        self.n_layers = n_layers
        self.softmax = softmax

    def __call__(self, h: Tensor, t: float = 0.0) -> Tensor:
        p = self.params
        h_prev = h
        for l in range(self.n_layers):
            layer = p[f"layer{l}"]
            states = [scale_message_pass(h_prev, sc, layer[f"scale{s}"])
                      for s, sc in enumerate(self.graph.scales)]
            h_prev = attention_fuse(states, h_prev, p["w_query"], p["w_key"],
                                    softmax=self.softmax)
        return h_prev @ p["head_w"] + p["head_b"]


# ---------------------------------------------------------------------------
# fixed-step RK4
# ---------------------------------------------------------------------------

_SOLVE_CALLS = {"count": 0}


def solver_call_count() -> int:
    return _SOLVE_CALLS["count"]


def reset_solver_call_count() -> None:
    _SOLVE_CALLS["count"] = 0


def _rk4_step(rhs, h, t, dt):
    k1 = rhs(h, t)
    k2 = rhs(h + (dt / 2.0) * k1, t + dt / 2.0)
    k3 = rhs(h + (dt / 2.0) * k2, t + dt / 2.0)
    k4 = rhs(h + dt * k3, t + dt)
    return h + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def ode_solve(rhs, h0: Tensor, t0: float, t1: float, dt: float,
              keep_lattice: bool = False):
    """Integrate rhs from t0 to t1 with fixed-step classical RK4.

    The step lattice is t0 + i*dt; a final shortened step covers any
    remainder so the state at exactly t1 is always produced. Returns
    (times, states); times[-1] == t1. With keep_lattice, every lattice
    state (including t0) is kept, otherwise only the endpoint.
    """
    if t1 <= t0:
        raise ContractError(f"ode_solve needs t1 > t0, got [{t0}, {t1}]")
    if dt <= 0:
        raise ContractError("solver step must be positive")
    _SOLVE_CALLS["count"] += 1
    total = t1 - t0
    n_full = int(np.floor(total / dt + 1e-9))
    rem = total - n_full * dt
    if rem < 1e-9 * max(1.0, abs(t1)):
        rem = 0.0
    times = [t0]
    states = [h0]
    h = h0
    t = t0
    for i in range(n_full):
        try:
            h = _rk4_step(rhs, h, t, dt)
        except NumericError as e:
            raise NumericError(f"{e} (during step starting at t={t:.6g})") from e
        t = t0 + (i + 1) * dt
        if keep_lattice:
            times.append(t)
            states.append(h)
    if rem > 0.0:
        try:
            h = _rk4_step(rhs, h, t, rem)
        except NumericError as e:
            raise NumericError(f"{e} (during shortened step at t={t:.6g})") from e
        t = t1
        if keep_lattice:
            times.append(t)
            states.append(h)
    if not keep_lattice:
        times = [t1]
        states = [h]
    return times, states
