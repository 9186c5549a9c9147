"""Mapping between irregular points and a uniform latent grid.

Points on the periodic unit square attach to the four corners of their grid
cell; features travel point->vertex and vertex->point through residual
message passing with a relative-position embedding. Arbitrary query
coordinates are decoded back from the grid the same way.

The point->vertex accumulation is done in a canonical sorted order so the
result is exactly permutation invariant in the point list.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import gabor_filter
from .tensor import Tensor, ContractError, ShapeError


@dataclass(frozen=True)
class GridSpec:
    """Uniform H x W vertex lattice on the torus; vertex (r, c) at (c/W, r/H)."""
    h: int
    w: int

    def __post_init__(self):
        if self.h < 2 or self.w < 2:
            raise ContractError(f"grid extents must be >= 2, got {self.h}x{self.w}")

    @property
    def n_vertices(self) -> int:
        return self.h * self.w

    @property
    def cell_size(self):
        return 1.0 / self.w, 1.0 / self.h

    def vertex_coords(self) -> np.ndarray:
        cs, rs = np.meshgrid(np.arange(self.w), np.arange(self.h))
        return np.stack([(cs / self.w).ravel(), (rs / self.h).ravel()], axis=1)

    def vertex_id(self, r, c):
        return (r % self.h) * self.w + (c % self.w)


@dataclass
class PointAttachment:
    point_index: int
    cell: tuple           # (r, c)
    vertex_ids: np.ndarray  # (4,)
    offsets: np.ndarray     # (4, 2); (x_point - x_vertex) mod cell size


def wrap_unit(p: np.ndarray) -> np.ndarray:
    return np.mod(p, 1.0)


def min_displacement(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal periodic displacement a - b on the unit torus, in [-0.5, 0.5)."""
    d = a - b
    return d - np.round(d)


def locate_points(points: np.ndarray, grid: GridSpec):
    """Vectorized cell lookup. Returns (cells (P,2), vertex_ids (P,4),
    vertex_xy (P,4,2)). Corner order is fixed: LL, LR, UL, UR."""
    p = wrap_unit(np.asarray(points, dtype=np.float64))
    c = np.floor(p[:, 0] * grid.w).astype(np.int64) % grid.w
    r = np.floor(p[:, 1] * grid.h).astype(np.int64) % grid.h
    c1 = (c + 1) % grid.w
    r1 = (r + 1) % grid.h
    vids = np.stack([r * grid.w + c, r * grid.w + c1,
                     r1 * grid.w + c, r1 * grid.w + c1], axis=1)
    vx = np.stack([c, c + 1, c, c + 1], axis=1) / grid.w
    vy = np.stack([r, r, r + 1, r + 1], axis=1) / grid.h
    vxy = np.stack([vx, vy], axis=2)
    return np.stack([r, c], axis=1), vids, vxy


def locate_cell(p, grid: GridSpec, point_index: int = 0) -> PointAttachment:
    """Single-point attachment; ties on vertices/edges fall to the cell whose
    lower-left corner region contains the point (floor convention)."""
    cells, vids, vxy = locate_points(np.asarray(p, dtype=np.float64)[None, :], grid)
    pw = wrap_unit(np.asarray(p, dtype=np.float64))
    cw, ch = grid.cell_size
    off = np.mod(pw[None, None, :] - vxy[0], [cw, ch])
    return PointAttachment(point_index, (int(cells[0, 0]), int(cells[0, 1])),
                           vids[0], off[0])


# ---------------------------------------------------------------------------
# relative position embedding
# ---------------------------------------------------------------------------

def build_phi_params(rng, width: int) -> dict:
    bound = 1.0 / np.sqrt(6)
    w = rng.uniform(-bound, bound, size=(6, width)).astype(T.default_dtype())
    return {"w": Tensor(w, requires_grad=True),
            "b": Tensor(np.zeros(width, dtype=T.default_dtype()), requires_grad=True)}


def _phi_feats_np(d: np.ndarray) -> np.ndarray:
    two_pi = 2 * np.pi
    return np.stack([d[:, 0], d[:, 1],
                     np.sin(two_pi * d[:, 0]), np.cos(two_pi * d[:, 0]),
                     np.sin(two_pi * d[:, 1]), np.cos(two_pi * d[:, 1])], axis=1)


def phi_features(delta) -> Tensor:
    """[dx, dy, sin 2pi dx, cos 2pi dx, sin 2pi dy, cos 2pi dy] per row.

    ``delta`` may be a plain array (constant coordinates) or a Tensor, in
    which case the features stay differentiable w.r.t. the coordinates.
    """
    if isinstance(delta, Tensor):
        dx = T.reshape(delta, (-1, 2))
        two_pi = 2.0 * np.pi
        sx = T.sin(two_pi * dx)
        cx = T.cos(two_pi * dx)
        # interleave to [dx, dy, sin dx, cos dx, sin dy, cos dy]
        parts = [dx,
                 T.concat([sx, cx], axis=1)]
        feats = T.concat(parts, axis=1)
        # reorder columns: currently [dx, dy, sinx, siny, cosx, cosy]
        order = np.array([0, 1, 2, 4, 3, 5])
        perm = np.zeros((6, 6), dtype=T.default_dtype())
        perm[order, np.arange(6)] = 1.0
        return feats @ Tensor(perm)
    d = np.asarray(delta, dtype=np.float64).reshape(-1, 2)
    return Tensor(_phi_feats_np(d).astype(T.default_dtype()))


def relative_position_embedding(x_i, x_j, phi: dict) -> Tensor:
    """phi(x_i, x_j) built from the minimal periodic displacement x_i - x_j."""
    if isinstance(x_i, Tensor) or isinstance(x_j, Tensor):
        xi = x_i if isinstance(x_i, Tensor) else Tensor(np.asarray(x_i, dtype=T.default_dtype()))
        xj = x_j if isinstance(x_j, Tensor) else Tensor(np.asarray(x_j, dtype=T.default_dtype()))
        raw = xi - xj
        shift = np.round(raw.data)  # piecewise-constant; derivative 1 a.e.
        delta = raw - Tensor(shift.astype(raw.dtype))
    else:
        delta = min_displacement(np.asarray(x_i, dtype=np.float64),
                                 np.asarray(x_j, dtype=np.float64))
    return phi_features(delta) @ phi["w"] + T.reshape(phi["b"], (1, -1))


# ---------------------------------------------------------------------------
# encoding points onto the grid
# ---------------------------------------------------------------------------

def build_mapper_params(rng, width: int, rounds: int = 2) -> dict:
    def lin():
        bound = 1.0 / np.sqrt(width)
        return Tensor(rng.uniform(-bound, bound, size=(width, width)).astype(T.default_dtype()),
                      requires_grad=True)

    def vec():
        return Tensor(np.zeros(width, dtype=T.default_dtype()), requires_grad=True)

    params = {"phi": build_phi_params(rng, width),
              "default": Tensor(rng.normal(0.0, 0.1, size=width).astype(T.default_dtype()),
                                requires_grad=True)}
    for r in range(rounds):
        params[f"round{r}"] = {"pv_w": lin(), "pv_b": vec(),
                               "vp_w": lin(), "vp_b": vec()}
        if r >= 1:
            params[f"round{r}"]["vv_w"] = lin()
            params[f"round{r}"]["vv_b"] = vec()
    return params


@dataclass
class LatentGrid:
    """Hidden states on the vertex lattice plus the coverage mask marking
    vertices that received at least one observation message."""
    states: Tensor          # (n_batch * H * W, width)
    coverage: np.ndarray    # (n_batch * H * W,) bool
    grid: GridSpec
    n_batch: int = 1

    @property
    def width(self):
        return self.states.shape[1]

    def as_array(self) -> np.ndarray:
        return self.states.data.reshape(self.n_batch, self.grid.h, self.grid.w, -1)


@dataclass
class Attachment:
    """Precomputed structure tying a batch of point sets to the grid."""
    vids: np.ndarray           # (n_pts, 4) global vertex ids (batch-offset)
    phi_vp_feats: np.ndarray   # (n_pts*4, 6) features for vertex<-point messages
    phi_pv_feats: np.ndarray   # (n_pts*4, 6) features for point<-vertex messages
    order: np.ndarray          # canonical edge order for the vertex-side sum
    inv_order: np.ndarray
    sorted_vids: np.ndarray    # vids of edges in canonical order
    counts: np.ndarray         # (n_vertices_total,) points attached per vertex


def build_attachment(points: np.ndarray, grid: GridSpec, batch_index=None,
                     n_batch: int = 1) -> Attachment:
    points = np.asarray(points, dtype=np.float64)
    n_pts = points.shape[0]
    if batch_index is None:
        batch_index = np.zeros(n_pts, dtype=np.int64)
    _, vids, vxy = locate_points(points, grid)
    gvids = vids + batch_index[:, None] * grid.n_vertices
    p4 = np.repeat(points, 4, axis=0)
    v4 = vxy.reshape(-1, 2)
    d_vp = min_displacement(v4, p4)   # receiver vertex, sender point
    d_pv = min_displacement(p4, v4)   # receiver point, sender vertex
    flat_v = gvids.reshape(-1)
    # canonical order: by receiving vertex, then sender coordinate (content key,
    # not input position, so permuting the point list cannot change the sum)
    order = np.lexsort((p4[:, 1], p4[:, 0], flat_v))
    inv_order = np.empty_like(order)
    inv_order[order] = np.arange(order.size)
    counts = np.bincount(flat_v, minlength=n_batch * grid.n_vertices)
    return Attachment(gvids, _phi_feats_np(d_vp), _phi_feats_np(d_pv), order, inv_order,
                      flat_v[order], counts)


def _apply_phi(feats: np.ndarray, phi: dict) -> Tensor:
    return Tensor(feats.astype(T.default_dtype())) @ phi["w"] + T.reshape(phi["b"], (1, -1))


def _grid_neighbors(grid: GridSpec, n_batch: int):
    """4-neighbor index columns (+x, -x, +y, -y); each column is a permutation."""
    n = grid.n_vertices
    r, c = np.divmod(np.arange(n), grid.w)
    cols = [grid.vertex_id(r, c + 1), grid.vertex_id(r, c - 1),
            grid.vertex_id(r + 1, c), grid.vertex_id(r - 1, c)]
    out = []
    for col in cols:
        full = (col[None, :] + np.arange(n_batch)[:, None] * n).reshape(-1)
        inv = np.empty_like(full)
        inv[full] = np.arange(full.size)
        out.append((full, inv))
    cw, ch = grid.cell_size
    deltas = np.array([[-cw, 0.0], [cw, 0.0], [0.0, -ch], [0.0, ch]])  # receiver - sender
    return out, deltas


def encode_to_grid(points: np.ndarray, point_h: Tensor, grid: GridSpec,
                   params: dict, rounds: int = 2, batch_index=None,
                   n_batch: int = 1, attachment: Attachment | None = None) -> LatentGrid:
    """Propagate per-point features onto grid vertices.

    Rounds alternate bipartite point<->vertex updates; from the second round
    vertices also exchange with their four grid neighbors, spreading
    information into cells that received no observations.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] == 0:
        raise ContractError("cannot encode an empty observation set")
    if points.shape[0] != point_h.shape[0]:
        raise ShapeError("one embedding per point required")
    att = attachment or build_attachment(points, grid, batch_index, n_batch)
    width = point_h.shape[1]
    n_total = n_batch * grid.n_vertices
    phi = params["phi"]

    h_v = T.Tensor(np.zeros((n_total, width), dtype=T.default_dtype())) \
        + T.reshape(params["default"], (1, -1))
    h_p = point_h
    phi_vp = _apply_phi(att.phi_vp_feats, phi)
    phi_pv = _apply_phi(att.phi_pv_feats, phi)
    nbrs, nbr_deltas = _grid_neighbors(grid, n_batch) if rounds > 1 else (None, None)

    n_pts = points.shape[0]
    edge_p = np.repeat(np.arange(n_pts), 4)
    for r in range(rounds):
        rp = params[f"round{r}"]
        # vertex <- attached points
        h_p4 = T.take_rows(h_p, edge_p)
        h_v4 = T.take_rows(h_v, att.vids.reshape(-1))
        msg = (h_p4 - h_v4 + phi_vp) @ rp["pv_w"]
        msg_sorted = T.take_rows(msg, att.order, att.inv_order)
        h_v = h_v + T.segment_sum_sorted(msg_sorted, att.sorted_vids, n_total) \
            + T.reshape(rp["pv_b"], (1, -1))
        # point <- its four vertices
        h_v4n = T.take_rows(h_v, att.vids.reshape(-1))
        h_p4n = T.take_rows(h_p, edge_p)
        msg_p = (h_v4n - h_p4n + phi_pv) @ rp["vp_w"]
        msg_p = T.reduce_sum(T.reshape(msg_p, (n_pts, 4, width)), axis=1)
        h_p = h_p + msg_p + T.reshape(rp["vp_b"], (1, -1))
        # vertex <-> vertex grid exchange from round 2 on
        if r >= 1:
            acc = None
            for (col, inv), delta in zip(nbrs, nbr_deltas):
                phi_dir = _apply_phi(_phi_feats_np(delta[None, :]), phi)   # (1, width)
                m = T.take_rows(h_v, col, inv) - h_v + phi_dir
                acc = m if acc is None else acc + m
            h_v = h_v + acc @ rp["vv_w"] + T.reshape(rp["vv_b"], (1, -1))
    return LatentGrid(h_v, att.counts > 0, grid, n_batch)


# ---------------------------------------------------------------------------
# decoding queries from the grid
# ---------------------------------------------------------------------------

def build_decoder_params(rng, width: int, out_channels: int, rounds: int = 2) -> dict:
    def lin(n_in, n_out):
        bound = 1.0 / np.sqrt(n_in)
        return Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(T.default_dtype()),
                      requires_grad=True)

    def vec(n):
        return Tensor(np.zeros(n, dtype=T.default_dtype()), requires_grad=True)

    params = {}
    for r in range(rounds):
        params[f"round{r}"] = {"w": lin(width, width), "b": vec(width)}
    params["mlp_w1"] = lin(width, width)
    params["mlp_b1"] = vec(width)
    params["mlp_w2"] = lin(width, out_channels)
    params["mlp_b2"] = vec(out_channels)
    return params


@dataclass
class QueryAttachment:
    """Precomputed cell lookup for a fixed query point set (reusable across times)."""
    gvids: np.ndarray      # (Q*4,)
    vxy: np.ndarray        # (Q, 4, 2)
    n_queries: int


def build_query_attachment(points: np.ndarray, grid: GridSpec,
                           batch_index=None, n_batch: int = 1) -> QueryAttachment:
    q = np.asarray(points, dtype=np.float64)
    if batch_index is None:
        batch_index = np.zeros(q.shape[0], dtype=np.int64)
    _, vids, vxy = locate_points(q, grid)
    gvids = (vids + np.asarray(batch_index)[:, None] * grid.n_vertices).reshape(-1)
    return QueryAttachment(gvids, vxy, q.shape[0])


def decode_query(queries, grid_state: Tensor, grid: GridSpec, phi: dict,
                 dec_params: dict, gabor_layer: dict | None = None,
                 h_init: Tensor | None = None, rounds: int = 2,
                 batch_index=None, n_batch: int = 1,
                 qatt: QueryAttachment | None = None) -> Tensor:
    """Predict field values at query coordinates from a latent grid state.

    h_q starts as the first Gabor bank applied to the query coordinate
    (or the caller-supplied ``h_init``), is refined by `rounds` pulls from
    the enclosing cell's four vertices, and a 2-layer tanh MLP maps it to
    the output channels.
    """
    q_t = queries if isinstance(queries, Tensor) else None
    q_np = queries.data if isinstance(queries, Tensor) else np.asarray(queries, dtype=np.float64)
    n_q = q_np.shape[0]
    if qatt is None:
        qatt = build_query_attachment(q_np, grid, batch_index, n_batch)
    width = grid_state.shape[1]

    if h_init is not None:
        h_q = h_init
    else:
        h_q = gabor_filter(q_t if q_t is not None else q_np.astype(T.default_dtype()),
                           gabor_layer)
    if q_t is not None:
        # differentiable wrt query coordinates
        q4 = T.reshape(T.concat([q_t, q_t, q_t, q_t], axis=1), (n_q * 4, 2))
        phi_qv = relative_position_embedding(q4, qatt.vxy.reshape(-1, 2), phi)
    else:
        d_qv = min_displacement(np.repeat(q_np, 4, axis=0), qatt.vxy.reshape(-1, 2))
        phi_qv = _apply_phi(_phi_feats_np(d_qv), phi)
    h_v4 = T.take_rows(grid_state, qatt.gvids)
    edge_q = np.repeat(np.arange(n_q), 4)
    for r in range(rounds):
        rp = dec_params[f"round{r}"]
        h_q4 = T.take_rows(h_q, edge_q)
        msg = (h_v4 - h_q4 + phi_qv) @ rp["w"]
        msg = T.reduce_sum(T.reshape(msg, (n_q, 4, width)), axis=1)
        h_q = h_q + msg + T.reshape(rp["b"], (1, -1))
    hidden = T.tanh(h_q @ dec_params["mlp_w1"] + T.reshape(dec_params["mlp_b1"], (1, -1)))
    return hidden @ dec_params["mlp_w2"] + T.reshape(dec_params["mlp_b2"], (1, -1))
