"""End-to-end model: encode observations, alternate continuous legs with
discrete corrections, decode at arbitrary (t, x) queries; plus training,
evaluation splits, ablation variants, and checkpointing.

The forward schedule is fixed by the correction cadence alone: legs always
run in full, so the latent at any lattice time is independent of which
queries were requested (split-vs-whole queries are bit-identical).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields as dc_fields, asdict

import numpy as np

from . import tensor as T
from . import encoder as enc
from . import gridmap as gm
from . import ode as od
from . import correction as corr
from .dynamics import TrajectoryDataset, FieldSnapshot, node_coords
from .tensor import Tensor, Tape, ContractError, NumericError

VARIANTS = ("full", "no-mfn", "no-mgo", "no-nac")


@dataclass
class ModelConfig:
    grid_h: int = 128
    grid_w: int = 128
    width: int = 128              # hidden width == latent grid channels
    mfn_layers: int = 5
    mfn_freq_base: float = float(2 * np.pi)  # layer-k Gabor frequency std = base*(k+1)
    n_scales: int = 3
    n_layers: int = 2             # message-passing blocks inside the vector field
    dt_solver: float = 0.25
    dt_corr: float = 1.0
    lam: float = 0.5
    attention_softmax: bool = False
    encoder_rounds: int = 2
    decoder_rounds: int = 2
    obs_channels: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    micro_batch: int = 4          # tape chunk size; accumulation is order-fixed
    epochs: int = 200
    seed: int = 0
    subsample_ratio: float = 0.5
    train_window: int = 0         # 0 = unroll to the full training horizon
    train_random_starts: bool = False
    clip_norm: float = 0.0        # 0 disables gradient clipping
    val_every: int = 5
    variant: str = "full"

    def validate(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant '{self.variant}' (choose from {VARIANTS})")
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"blend weight must lie in [0, 1], got {self.lam}")
        ratio = self.dt_corr / self.dt_solver
        if abs(ratio - round(ratio)) > 1e-9:
            raise ContractError("dt_solver must divide dt_corr")
        if self.variant != "no-nac" and self.lam > 0:
            if self.width % 8:
                raise ContractError("corrector needs width divisible by 8")
            if self.grid_h % 2 or self.grid_w % 2:
                raise ContractError("corrector needs even grid extents")
            if min(self.grid_h, self.grid_w) < 8:
                raise ContractError("corrector kernels need a grid of at least 8x8")
        if not 0.0 < self.subsample_ratio <= 1.0:
            raise ContractError("subsample ratio must lie in (0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class ObservationSet:
    points: np.ndarray   # (P, 2) in [0,1)^2
    values: np.ndarray   # (P, C)
    indices: np.ndarray | None = None  # flat grid indices when grid-sampled


@dataclass
class QuerySet:
    times: np.ndarray    # (Q,)
    points: np.ndarray   # (Q, 2)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.points = gm.wrap_unit(np.asarray(self.points, dtype=np.float64))
        if not np.all(np.isfinite(self.times)):
            raise ContractError("query times must be finite")
        if self.times.shape[0] != self.points.shape[0]:
            raise ContractError("one time per query point required")


@dataclass
class EvalReport:
    mse: dict = field(default_factory=dict)           # tag -> float
    counts: dict = field(default_factory=dict)        # tag -> #values aggregated
    steps: dict = field(default_factory=dict)         # tag -> #time instants
    curve: dict = field(default_factory=dict)         # tag -> [(t, mse_t), ...]

    def write_csv(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write("tag,mse,steps\n")
            for tag in sorted(self.mse):
                fh.write(f"{tag},{self.mse[tag]:.10e},{self.steps[tag]}\n")

    def write_curve_csv(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write("tag,t,mse\n")
            for tag in sorted(self.curve):
                for t, v in self.curve[tag]:
                    fh.write(f"{tag},{t},{v:.10e}\n")


# ---------------------------------------------------------------------------
# observation subsampling
# ---------------------------------------------------------------------------

def subsample_observations(snapshot: FieldSnapshot, ratio: float, seed):
    """Uniform random sensor placement on the snapshot's grid, seeded.

    Returns (ObservationSet, complement_mask); the complement marks the
    held-out spatial points used for Ext-s evaluation.
    """
    if not 0.0 < ratio <= 1.0:
        raise ContractError(f"subsample ratio must lie in (0, 1], got {ratio}")
    H, W = snapshot.grid
    n = H * W
    n_keep = int(np.floor(ratio * n))
    if n_keep < 4:
        raise ContractError(f"ratio {ratio} keeps {n_keep} < 4 points")
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(n, size=n_keep, replace=False))
    mask = np.zeros(n, dtype=bool)
    mask[keep] = True
    coords = node_coords(H, W)
    values = snapshot.values.reshape(n, -1)
    obs = ObservationSet(coords[keep], values[keep].copy(), keep)
    return obs, ~mask


def sensor_indices(dataset: TrajectoryDataset, traj: int, ratio: float) -> np.ndarray:
    """Per-trajectory sensor mask, a property of the dataset (not the model)."""
    obs, _ = subsample_observations(dataset.snapshot_of(traj, 0), ratio,
                                    [dataset.config.seed, 9173, traj])
    return obs.indices


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def build_model_params(config: ModelConfig, rng) -> dict:
    config.validate()
    w = config.width
    params: dict = {}
    if config.variant == "no-mfn":
        params["encoder"] = enc.build_mlp_encoder_params(rng, w, config.obs_channels)
    else:
        params["encoder"] = enc.build_encoder_params(rng, w, config.mfn_layers,
                                                     config.obs_channels,
                                                     freq_base=config.mfn_freq_base)
    params["mapper"] = gm.build_mapper_params(rng, w, rounds=config.encoder_rounds)
    params["ode"] = od.build_ode_params(rng, w, config.n_scales, config.n_layers)
    if config.variant != "no-nac" and config.lam > 0:
        params["corrector"] = corr.build_corrector_params(rng, w)
    params["decoder"] = gm.build_decoder_params(rng, w, config.obs_channels,
                                                rounds=config.decoder_rounds)
    return params


class Model:
    def __init__(self, config: ModelConfig, params: dict | None = None, rng=None):
        config.validate()
        self.config = config
        self.grid = gm.GridSpec(config.grid_h, config.grid_w)
        if params is None:
            params = build_model_params(config, rng or np.random.default_rng(config.seed))
        self.params = params
        self._graphs: dict = {}

    def graph(self, n_batch: int) -> od.HierarchicalGraph:
        if n_batch not in self._graphs:
            self._graphs[n_batch] = od.build_hierarchy(self.grid, self.config.n_scales,
                                                       n_batch)
        return self._graphs[n_batch]

    def rhs(self, n_batch: int) -> od.OdeFunc:
        return od.OdeFunc(self.params["ode"], self.graph(n_batch),
                          self.config.n_layers, softmax=self.config.attention_softmax)

    def encode(self, points: np.ndarray, values: np.ndarray,
               batch_index=None, n_batch: int = 1) -> Tensor:
        """Observations -> initial latent grid state (n_batch*N, width)."""
        if self.config.variant == "no-mfn":
            h = enc.mlp_encode(values.astype(T.default_dtype()),
                               points.astype(T.default_dtype()), self.params["encoder"])
        else:
            h = enc.mfn_encode(values.astype(T.default_dtype()),
                               points.astype(T.default_dtype()), self.params["encoder"])
        latent = gm.encode_to_grid(points, h, self.grid, self.params["mapper"],
                                   rounds=self.config.encoder_rounds,
                                   batch_index=batch_index, n_batch=n_batch)
        return latent.states

    def query_init(self, points) -> Tensor:
        if self.config.variant == "no-mfn":
            pts = points.data if isinstance(points, Tensor) else points
            u0 = np.zeros((np.asarray(pts).shape[0], self.config.obs_channels),
                          dtype=T.default_dtype())
            return enc.mlp_encode(u0, points if isinstance(points, Tensor)
                                  else np.asarray(pts, dtype=T.default_dtype()),
                                  self.params["encoder"])
        return enc.gabor_filter(points if isinstance(points, Tensor)
                                else np.asarray(points, dtype=T.default_dtype()),
                                self.params["encoder"]["gabor0"])

    def decode(self, state: Tensor, points, batch_index=None, n_batch: int = 1,
               qatt: gm.QueryAttachment | None = None) -> Tensor:
        return gm.decode_query(points, state, self.grid, self.params["mapper"]["phi"],
                               self.params["decoder"], h_init=self.query_init(points),
                               rounds=self.config.decoder_rounds,
                               batch_index=batch_index, n_batch=n_batch, qatt=qatt)

    def correct(self, z_pre: Tensor, z_prev: Tensor, n_batch: int) -> Tensor:
        if self.config.variant == "no-nac" or self.config.lam == 0.0 \
                or "corrector" not in self.params:
            return z_pre
        H, W = self.grid.h, self.grid.w
        w = self.config.width
        z4 = T.reshape(z_prev, (n_batch, H, W, w))
        r = corr.markov_step(z4, self.params["corrector"])
        return z_pre + self.config.lam * T.reshape(r, (n_batch * H * W, w))


class Rollout:
    """Latent trajectory cache for one forward pass.

    Legs always run in full correction-cadence units; lattice states are
    keyed by solver-step index, and the state at a correction time is the
    post-correction state.
    """

    def __init__(self, model: Model, z0: Tensor, n_batch: int = 1):
        self.model = model
        self.n_batch = n_batch
        cfg = model.config
        self.steps_per_leg = int(round(cfg.dt_corr / cfg.dt_solver))
        self.states: dict[int, Tensor] = {0: z0}
        self.offlattice: dict[float, Tensor] = {}
        self.legs_done = 0
        self._rhs = model.rhs(n_batch) if cfg.variant != "no-mgo" else None
        self._residual = od.OdeFunc(model.params["ode"], model.graph(n_batch),
                                    cfg.n_layers, softmax=cfg.attention_softmax) \
            if cfg.variant == "no-mgo" else None

    def _t_of(self, idx: int) -> float:
        return idx * self.model.config.dt_solver

    def ensure_legs(self, t_max: float) -> None:
        cfg = self.model.config
        while self.legs_done * cfg.dt_corr < t_max - 1e-9:
            k = self.legs_done
            t_k = k * cfg.dt_corr
            z_prev = self.states[k * self.steps_per_leg]
            if cfg.variant == "no-mgo":
                z_pre = z_prev + self._residual(z_prev, t_k)
            else:
                try:
                    _, states = od.ode_solve(self._rhs, z_prev, t_k, t_k + cfg.dt_corr,
                                             cfg.dt_solver, keep_lattice=True)
                except NumericError as e:
                    raise NumericError(f"latent solve failed in leg [{t_k}, {t_k + cfg.dt_corr}]: {e}") from e
                for i, s in enumerate(states[1:], start=1):
                    self.states[k * self.steps_per_leg + i] = s
                z_pre = states[-1]
            z_post = self.model.correct(z_pre, z_prev, self.n_batch)
            self.states[(k + 1) * self.steps_per_leg] = z_post
            self.legs_done = k + 1

    def latent_at(self, t: float) -> Tensor:
        if t < -1e-12:
            raise ContractError(f"query time {t} precedes the initial observation")
        self.ensure_legs(t)
        cfg = self.model.config
        idx = t / cfg.dt_solver
        if abs(idx - round(idx)) < 1e-9:
            key = int(round(idx))
            if key in self.states:
                return self.states[key]
            # no-mgo holds the latent constant inside a leg
            key = int(np.floor(idx / self.steps_per_leg)) * self.steps_per_leg
            return self.states[key]
        if cfg.variant == "no-mgo":
            key = int(np.floor(t / cfg.dt_corr + 1e-12)) * self.steps_per_leg
            return self.states[key]
        if t not in self.offlattice:
            base_idx = int(np.floor(idx))
            while base_idx not in self.states:
                base_idx -= 1
            t_base = self._t_of(base_idx)
            _, states = od.ode_solve(self._rhs, self.states[base_idx], t_base, t,
                                     cfg.dt_solver)
            self.offlattice[t] = states[-1]
        return self.offlattice[t]


def forward_predict(obs: ObservationSet, queries: QuerySet, model: Model) -> np.ndarray:
    """Stage 1 encode, stage 2 evolve+correct, stage 3 decode each query.

    Deterministic; returns (Q, obs_channels) predictions in query order.
    """
    if np.any(queries.times < -1e-12):
        raise ContractError("query times must be >= the observation time t0 = 0")
    z0 = model.encode(obs.points, obs.values)
    roll = Rollout(model, z0, n_batch=1)
    out = np.empty((queries.times.shape[0], model.config.obs_channels),
                   dtype=T.default_dtype())
    for t in sorted(set(float(t) for t in queries.times)):
        sel = np.where(np.abs(queries.times - t) < 1e-12)[0]
        state = roll.latent_at(t)
        pred = model.decode(state, queries.points[sel])
        out[sel] = pred.data
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def iter_param_leaves(tree: dict, prefix: str = ""):
    for key in sorted(tree):
        val = tree[key]
        name = f"{prefix}.{key}" if prefix else key
        if isinstance(val, dict):
            yield from iter_param_leaves(val, name)
        else:
            yield name, tree, key, val


def zero_grads(tree: dict) -> None:
    for _, _, _, t in iter_param_leaves(tree):
        t.grad = None


class Adam:
    """Adaptive-moment optimizer with bias correction (functional updates)."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, tree: dict, clip_norm: float = 0.0) -> None:
        leaves = list(iter_param_leaves(tree))
        if clip_norm > 0:
            total = np.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2))
                                for _, _, _, t in leaves if t.grad is not None))
            scale = clip_norm / total if total > clip_norm else 1.0
        else:
            scale = 1.0
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, parent, key, t in leaves:
            if t.grad is None:
                continue
            g = t.grad * scale if scale != 1.0 else t.grad
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            new = t.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            parent[key] = Tensor(new.astype(t.data.dtype), requires_grad=True,
                                 dtype=t.data.dtype)


def clone_params(tree: dict) -> dict:
    out = {}
    for k, v in tree.items():
        out[k] = clone_params(v) if isinstance(v, dict) else \
            Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.data.dtype)
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _traj_sensors(dataset: TrajectoryDataset, ratio: float):
    """Sensor flat indices for every trajectory (fixed across time)."""
    return {j: sensor_indices(dataset, j, ratio) for j in range(dataset.n_traj)}


def _batch_inputs(dataset, trajs, sensors, coords, start_steps, noise=None):
    """Stack per-trajectory observations at their window-start snapshots."""
    pts, vals, bidx = [], [], []
    for b, (j, s0) in enumerate(zip(trajs, start_steps)):
        idx = sensors[j]
        snap = dataset.fields[j, dataset.snapshot_index(float(s0))].reshape(-1, dataset.channels)
        v = snap[idx]
        if noise is not None:
            v = v + noise[b]
        pts.append(coords[idx])
        vals.append(v)
        bidx.append(np.full(idx.shape[0], b, dtype=np.int64))
    return (np.concatenate(pts, axis=0), np.concatenate(vals, axis=0),
            np.concatenate(bidx, axis=0))


def _supervised_loss(model, dataset, trajs, sensors, coords, start_steps, horizon):
    """Forward a chunk of trajectories and return (sse Tensor, count)."""
    pts, vals, bidx = _batch_inputs(dataset, trajs, sensors, coords, start_steps)
    nb = len(trajs)
    z0 = model.encode(pts, vals, batch_index=bidx, n_batch=nb)
    roll = Rollout(model, z0, n_batch=nb)
    qatt = gm.build_query_attachment(pts, model.grid, bidx, nb)
    sse = None
    count = 0
    for dt_step in range(1, horizon + 1):
        state = roll.latent_at(float(dt_step))
        pred = model.decode(state, pts, batch_index=bidx, n_batch=nb, qatt=qatt)
        truth = []
        for j, s0 in zip(trajs, start_steps):
            snap = dataset.fields[j, dataset.snapshot_index(float(s0 + dt_step))]
            truth.append(snap.reshape(-1, dataset.channels)[sensors[j]])
        truth = Tensor(np.concatenate(truth, axis=0).astype(T.default_dtype()))
        diff = pred - truth
        term = T.reduce_sum(diff * diff)
        sse = term if sse is None else sse + term
        count += truth.shape[0] * truth.shape[1]
    return sse, count


@dataclass
class TrainResult:
    params: dict
    config: ModelConfig
    loss_curve: list            # [(epoch, train_loss)]
    val_curve: list             # [(epoch, val_loss)]
    best_val: float
    initial_val: float
    aborted: bool = False


def validation_loss(model: Model, dataset: TrajectoryDataset, ratio: float,
                    horizon: int, split: str = "val") -> float:
    """Full-horizon In-s MSE from t0 on a split; the checkpoint criterion."""
    sensors = _traj_sensors(dataset, ratio)
    coords = node_coords(*dataset.grid)
    trajs = dataset.splits[split]
    sse, count = 0.0, 0
    for group in _chunks(trajs, max(1, model.config.micro_batch)):
        s, c = _supervised_loss(model, dataset, group, sensors, coords,
                                [0] * len(group), horizon)
        sse += float(s.data)
        count += c
    return sse / count


def _chunks(seq, size):
    seq = list(seq)
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def train(dataset: TrajectoryDataset, config: ModelConfig,
          progress: bool = False) -> TrainResult:
    """Minimize MSE against observed future values; fully seeded.

    Checkpoints the best validation loss; a non-finite training state aborts
    with the last good checkpoint.
    """
    config.validate()
    model = Model(config, rng=np.random.default_rng([config.seed, 11]))
    opt = Adam(config.lr, config.beta1, config.beta2, config.eps)
    sensors = _traj_sensors(dataset, config.subsample_ratio)
    coords = node_coords(*dataset.grid)
    t_train = dataset.config.t_train
    window_max = config.train_window if config.train_window > 0 else t_train
    window_max = min(window_max, t_train)
    train_trajs = dataset.splits["train"]

    init_val = validation_loss(model, dataset, config.subsample_ratio, t_train)
    best_val = init_val
    best_params = clone_params(model.params)
    loss_curve, val_curve = [], [(0, init_val)]
    aborted = False

    for epoch in range(config.epochs):
        erng = np.random.default_rng([config.seed, 202, epoch])
        order = [train_trajs[i] for i in erng.permutation(len(train_trajs))]
        epoch_sse, epoch_count = 0.0, 0
        try:
            for batch in _chunks(order, config.batch_size):
                if config.train_window > 0:
                    horizon = int(erng.integers(1, window_max + 1))
                else:
                    horizon = t_train
                if config.train_random_starts and t_train > horizon:
                    starts = erng.integers(0, t_train - horizon + 1, size=len(batch))
                else:
                    starts = np.zeros(len(batch), dtype=np.int64)
                # denominator fixed up-front so accumulation == batch mean
                n_pts = sum(sensors[j].shape[0] for j in batch)
                denom = n_pts * dataset.channels * horizon
                zero_grads(model.params)
                for ci, chunk in enumerate(_chunks(list(range(len(batch))), config.micro_batch)):
                    sub = [batch[i] for i in chunk]
                    sub_starts = [int(starts[i]) for i in chunk]
                    with Tape():
                        sse, cnt = _supervised_loss(model, dataset, sub, sensors,
                                                    coords, sub_starts, horizon)
                        loss = (1.0 / denom) * sse
                        T.backward(loss)
                    epoch_sse += float(sse.data)
                    epoch_count += cnt
                opt.step(model.params, clip_norm=config.clip_norm)
        except NumericError:
            aborted = True
            break
        train_loss = epoch_sse / max(epoch_count, 1)
        loss_curve.append((epoch + 1, train_loss))
        if (epoch + 1) % config.val_every == 0 or epoch + 1 == config.epochs:
            val = validation_loss(model, dataset, config.subsample_ratio, t_train)
            val_curve.append((epoch + 1, val))
            if np.isfinite(val) and val < best_val:
                best_val = val
                best_params = clone_params(model.params)
            if progress:
                print(f"epoch {epoch + 1}: train {train_loss:.4e}  val {val:.4e}")
        elif progress:
            print(f"epoch {epoch + 1}: train {train_loss:.4e}")

    return TrainResult(best_params, config, loss_curve, val_curve, best_val,
                       init_val, aborted)


# ---------------------------------------------------------------------------
# evaluation protocol
# ---------------------------------------------------------------------------

@dataclass
class EvalProtocol:
    ratio: float = 0.5
    split: str = "test"
    t_train: int | None = None       # default: dataset's training horizon
    con_t_offset: float = 0.5
    noise_rel: float = 0.0           # input noise as a fraction of per-channel std
    noise_seed: int = 0
    noise_sign: float = 1.0          # flip for antithetic noise pairs
    space_tags: tuple = ("In-s", "Ext-s")
    time_tags: tuple = ("In-t", "Ext-t", "Con-t")


def _tag_times(protocol: EvalProtocol, dataset: TrajectoryDataset):
    t_train = protocol.t_train if protocol.t_train is not None else dataset.config.t_train
    steps = dataset.config.steps
    times = {}
    if "In-t" in protocol.time_tags:
        times["In-t"] = [float(k) for k in range(1, t_train + 1)]
    if "Ext-t" in protocol.time_tags:
        if steps <= t_train:
            raise ContractError("Ext-t requested but the dataset has no steps beyond t_train")
        times["Ext-t"] = [float(k) for k in range(t_train + 1, steps + 1)]
    if "Con-t" in protocol.time_tags:
        if dataset.config.snapshots_per_step < 2:
            raise ContractError("Con-t requested but the dataset stores no intermediate snapshots")
        times["Con-t"] = [k + protocol.con_t_offset for k in range(0, t_train)]
    return times


def _eval_predictions(predict_fn, dataset: TrajectoryDataset, protocol: EvalProtocol):
    """Shared evaluation loop; predict_fn(obs, times, points) -> (|times|, P, C)."""
    H, W = dataset.grid
    coords = node_coords(H, W)
    times = _tag_times(protocol, dataset)
    all_times = sorted({t for ts in times.values() for t in ts})
    report = EvalReport()
    acc = {}
    for s_tag in protocol.space_tags:
        for t_tag in times:
            acc[f"{s_tag}/{t_tag}"] = {}

    for j in dataset.splits[protocol.split]:
        obs, ext_mask = subsample_observations(dataset.snapshot_of(j, 0), protocol.ratio,
                                               [dataset.config.seed, 9173, j])
        if protocol.noise_rel > 0:
            rng = np.random.default_rng([protocol.noise_seed, 771, j])
            std = dataset.fields[j, 0].reshape(-1, dataset.channels).std(axis=0)
            obs.values = obs.values + (protocol.noise_sign * protocol.noise_rel
                                       * std * rng.standard_normal(obs.values.shape))
        point_sets = {}
        if "In-s" in protocol.space_tags:
            point_sets["In-s"] = (obs.points, obs.indices)
        if "Ext-s" in protocol.space_tags:
            ext_idx = np.where(ext_mask)[0]
            if ext_idx.size:
                point_sets["Ext-s"] = (coords[ext_idx], ext_idx)
        preds = predict_fn(obs, all_times, point_sets)
        for s_tag, (pts, idx) in point_sets.items():
            for t_tag, ts in times.items():
                tag = f"{s_tag}/{t_tag}"
                for t in ts:
                    truth = dataset.field_at(j, t).reshape(-1, dataset.channels)[idx]
                    err = (preds[s_tag][t] - truth).astype(np.float64)
                    sse = float(np.sum(err * err))
                    cnt = err.size
                    cur = acc[tag].get(t, (0.0, 0))
                    acc[tag][t] = (cur[0] + sse, cur[1] + cnt)

    for tag, per_t in acc.items():
        if not per_t:
            continue
        total = sum(s for s, _ in per_t.values())
        count = sum(c for _, c in per_t.values())
        report.mse[tag] = total / count
        report.counts[tag] = count
        report.steps[tag] = len(per_t)
        report.curve[tag] = sorted((t, s / c) for t, (s, c) in per_t.items())
    return report


def evaluate(model: Model, dataset: TrajectoryDataset,
             protocol: EvalProtocol) -> EvalReport:
    """MSE per (space, time) tag on ground-truth-available points."""

    def predict(obs, all_times, point_sets):
        z0 = model.encode(obs.points, obs.values)
        roll = Rollout(model, z0, n_batch=1)
        out = {s: {} for s in point_sets}
        qatts = {s: gm.build_query_attachment(pts, model.grid)
                 for s, (pts, _) in point_sets.items()}
        for t in all_times:
            state = roll.latent_at(t)
            for s_tag, (pts, _) in point_sets.items():
                out[s_tag][t] = model.decode(state, pts, qatt=qatts[s_tag]).data
        return out

    return _eval_predictions(predict, dataset, protocol)


def evaluate_persistence(dataset: TrajectoryDataset, protocol: EvalProtocol) -> EvalReport:
    """Baseline: predict the true initial field, unchanged, for every query."""
    H, W = dataset.grid
    coords = node_coords(H, W)
    times = _tag_times(protocol, dataset)
    report = EvalReport()
    acc = {f"{s}/{t}": {} for s in protocol.space_tags for t in times}
    for j in dataset.splits[protocol.split]:
        obs, ext_mask = subsample_observations(dataset.snapshot_of(j, 0), protocol.ratio,
                                               [dataset.config.seed, 9173, j])
        init = dataset.fields[j, 0].reshape(-1, dataset.channels)
        point_sets = {}
        if "In-s" in protocol.space_tags:
            point_sets["In-s"] = obs.indices
        if "Ext-s" in protocol.space_tags:
            ext_idx = np.where(ext_mask)[0]
            if ext_idx.size:
                point_sets["Ext-s"] = ext_idx
        for s_tag, idx in point_sets.items():
            for t_tag, ts in times.items():
                tag = f"{s_tag}/{t_tag}"
                for t in ts:
                    truth = dataset.field_at(j, t).reshape(-1, dataset.channels)[idx]
                    err = init[idx] - truth
                    cur = acc[tag].get(t, (0.0, 0))
                    acc[tag][t] = (cur[0] + float(np.sum(err * err)), cur[1] + err.size)
    for tag, per_t in acc.items():
        if not per_t:
            continue
        total = sum(s for s, _ in per_t.values())
        count = sum(c for _, c in per_t.values())
        report.mse[tag] = total / count
        report.counts[tag] = count
        report.steps[tag] = len(per_t)
        report.curve[tag] = sorted((t, s / c) for t, (s, c) in per_t.items())
    return report


# ---------------------------------------------------------------------------
# ablation variants and checkpointing
# ---------------------------------------------------------------------------

_VARIANT_ALIASES = {"w/o MFN": "no-mfn", "w/o MGO": "no-mgo", "w/o NAC": "no-nac",
                    "no-mfn": "no-mfn", "no-mgo": "no-mgo", "no-nac": "no-nac"}


def ablate(config: ModelConfig, variant: str) -> ModelConfig:
    """Emit the config for an ablated model variant."""
    if variant not in _VARIANT_ALIASES:
        raise ContractError(f"unknown ablation variant '{variant}'")
    out = copy.deepcopy(config)
    out.variant = _VARIANT_ALIASES[variant]
    if out.variant == "no-nac":
        out.lam = 0.0
    out.validate()
    return out


def save_checkpoint(dirpath: str, model: Model) -> None:
    T.save_params(dirpath, model.params, config=asdict(model.config))


def load_checkpoint(dirpath: str) -> Model:
    flat, cfg_dict = T.load_params(dirpath)
    if cfg_dict is None:
        raise ContractError("checkpoint manifest carries no model config")
    config = ModelConfig.from_dict(cfg_dict)
    return Model(config, params=T.unflatten_params(flat))
