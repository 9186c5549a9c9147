"""Synthetic spatio-temporal fields with known physics.

Two generators on the periodic unit square:

* diffusion--advection, integrated exactly in time mode-by-mode in Fourier
  space (the analytic oracle and the solver coincide by construction),
* incompressible 2-D flow in vorticity form, pseudo-spectral with 2/3-rule
  dealiasing and fixed-step RK4 (desk scale, grids <= 64x64).

Node (r, c) of an HxW field sits at ((c + 0.5)/W, (r + 0.5)/H); values are
stored [row][col][channel].
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .tensor import ContractError, NumericError


@dataclass
class FieldSnapshot:
    values: np.ndarray  # (H, W, C)
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if not np.all(np.isfinite(self.values)):
            raise NumericError("snapshot contains non-finite values")

    @property
    def grid(self):
        return self.values.shape[0], self.values.shape[1]


@dataclass
class Trajectory:
    fields: np.ndarray      # (S, H, W, C)
    times: np.ndarray       # (S,)
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        dt = np.diff(self.times)
        if len(dt) and (np.any(dt <= 0) or not np.allclose(dt, dt[0], rtol=1e-9, atol=1e-12)):
            raise ContractError("trajectory times must be strictly increasing and uniform")

    def snapshot(self, i: int) -> FieldSnapshot:
        return FieldSnapshot(self.fields[i], float(self.times[i]))


def node_coords(H: int, W: int) -> np.ndarray:
    """(H*W, 2) array of (x, y) node positions, row-major over (r, c)."""
    cs, rs = np.meshgrid(np.arange(W), np.arange(H))
    x = (cs + 0.5) / W
    y = (rs + 0.5) / H
    return np.stack([x.ravel(), y.ravel()], axis=1)


def random_initial_field(H: int, W: int, seed, n_modes: int = 4) -> np.ndarray:
    """Smooth random IC: the lowest n_modes x n_modes Fourier modes with
    seeded Gaussian coefficients, normalized to unit max amplitude."""
    rng = np.random.default_rng(seed)
    spec = np.zeros((H, W), dtype=np.complex128)
    for fy in range(n_modes):
        for fx in range(n_modes):
            if fx == 0 and fy == 0:
                continue
            c = rng.normal() + 1j * rng.normal()
            spec[fy, fx] += c
            spec[-fy % H, -fx % W] += np.conj(c)  # hermitian pair keeps u real
    u = np.real(np.fft.ifft2(spec))
    m = np.max(np.abs(u))
    if m > 0:
        u = u / m
    return u[:, :, None]


# ---------------------------------------------------------------------------
# diffusion--advection (spectrally exact in time)
# ---------------------------------------------------------------------------

def _wavenumbers(H: int, W: int):
    fx = np.fft.fftfreq(W, d=1.0 / W)  # integer frequencies along x (axis 1)
    fy = np.fft.fftfreq(H, d=1.0 / H)  # along y (axis 0)
    return np.meshgrid(fx, fy)  # each (H, W)


def diffusion_advection_factor(H: int, W: int, nu: float, vel, dt: float) -> np.ndarray:
    """Per-mode complex multiplier for one exact step of u_t + v.grad(u) = nu lap(u)."""
    FX, FY = _wavenumbers(H, W)
    k2 = (2 * np.pi) ** 2 * (FX ** 2 + FY ** 2)
    phase = -1j * 2 * np.pi * (FX * vel[0] + FY * vel[1])
    return np.exp((-nu * k2 + phase) * dt)


def simulate_diffusion_advection(ic: FieldSnapshot, nu: float, vel, dt: float,
                                 steps: int) -> Trajectory:
    """Exact spectral integration: each Fourier mode decays by exp(-nu|2 pi k|^2 dt)
    and picks up the advection phase shift, per stored step."""
    if nu <= 0:
        raise ContractError(f"diffusivity must be positive, got {nu}")
    if dt <= 0:
        raise ContractError(f"dt must be positive, got {dt}")
    H, W = ic.grid
    C = ic.values.shape[2]
    factor = diffusion_advection_factor(H, W, nu, vel, dt)
    out = np.empty((steps + 1, H, W, C))
    out[0] = ic.values
    spec = np.fft.fft2(ic.values, axes=(0, 1))
    for s in range(1, steps + 1):
        spec = spec * factor[:, :, None]
        out[s] = np.real(np.fft.ifft2(spec, axes=(0, 1)))
    times = ic.t + dt * np.arange(steps + 1)
    desc = {"pde": "diffusion", "nu": nu, "velocity": list(vel), "dt": dt}
    return Trajectory(out, times, desc)


# ---------------------------------------------------------------------------
# 2-D vorticity-form flow (pseudo-spectral, RK4)
# ---------------------------------------------------------------------------

class _VorticitySpectral:
    def __init__(self, H: int, W: int, nu: float):
        if H > 64 or W > 64:
            raise ContractError(f"vorticity solver is desk scale: grid {H}x{W} exceeds 64x64")
        if nu <= 0:
            raise ContractError(f"viscosity must be positive, got {nu}")
        self.nu = nu
        FX, FY = _wavenumbers(H, W)
        self.kx = 2 * np.pi * FX
        self.ky = 2 * np.pi * FY
        self.k2 = self.kx ** 2 + self.ky ** 2
        k2_safe = self.k2.copy()
        k2_safe[0, 0] = 1.0
        self.inv_k2 = 1.0 / k2_safe
        self.inv_k2[0, 0] = 0.0
        cut_x = (2.0 / 3.0) * (W // 2)
        cut_y = (2.0 / 3.0) * (H // 2)
        self.dealias = (np.abs(FX) <= cut_x) & (np.abs(FY) <= cut_y)
        self.W = W

    def velocity(self, omega_hat):
        psi_hat = omega_hat * self.inv_k2
        u = np.real(np.fft.ifft2(1j * self.ky * psi_hat))
        v = np.real(np.fft.ifft2(-1j * self.kx * psi_hat))
        return u, v

    def rhs(self, omega_hat):
        oh = omega_hat * self.dealias
        u, v = self.velocity(oh)
        wx = np.real(np.fft.ifft2(1j * self.kx * oh))
        wy = np.real(np.fft.ifft2(1j * self.ky * oh))
        nonlin = np.fft.fft2(u * wx + v * wy) * self.dealias
        nonlin[0, 0] = 0.0  # advection cannot move the spatial mean
        return -nonlin - self.nu * self.k2 * omega_hat

    def check_cfl(self, omega_hat, dt: float, t: float):
        u, v = self.velocity(omega_hat)
        vmax = float(np.max(np.hypot(u, v)))
        if vmax * dt * self.W > 0.5:
            raise ContractError(
                f"CFL violation at t={t:.4g}: max|velocity|*dt*W = {vmax * dt * self.W:.3f} > 0.5; "
                f"reduce dt below {0.5 / (vmax * self.W):.3e}")


def simulate_vorticity(ic: FieldSnapshot, nu: float, dt: float, steps: int,
                       substeps: int = 1) -> Trajectory:
    """Pseudo-spectral vorticity solve with classical RK4 time stepping."""
    if dt <= 0:
        raise ContractError(f"dt must be positive, got {dt}")
    if substeps < 1:
        raise ContractError("substeps must be >= 1")
    H, W = ic.grid
    if ic.values.shape[2] != 1:
        raise ContractError("vorticity solver expects a single channel")
    sim = _VorticitySpectral(H, W, nu)
    h = dt / substeps
    omega_hat = np.fft.fft2(ic.values[:, :, 0])
    out = np.empty((steps + 1, H, W, 1))
    out[0] = ic.values
    t = ic.t
    for s in range(1, steps + 1):
        for _ in range(substeps):
            sim.check_cfl(omega_hat, h, t)
            k1 = sim.rhs(omega_hat)
            k2 = sim.rhs(omega_hat + 0.5 * h * k1)
            k3 = sim.rhs(omega_hat + 0.5 * h * k2)
            k4 = sim.rhs(omega_hat + h * k3)
            omega_hat = omega_hat + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        w = np.real(np.fft.ifft2(omega_hat))
        if not np.all(np.isfinite(w)):
            raise NumericError(f"vorticity solve became non-finite at t={t:.4g}")
        out[s, :, :, 0] = w
    times = ic.t + dt * np.arange(steps + 1)
    desc = {"pde": "vorticity", "nu": nu, "dt": dt, "substeps": substeps}
    return Trajectory(out, times, desc)


def kinetic_energy(omega: np.ndarray, nu: float = 1.0) -> float:
    """Mean kinetic energy 0.5 <|u|^2> of the flow induced by vorticity field."""
    omega = np.asarray(omega)
    if omega.ndim == 3:
        omega = omega[:, :, 0]
    H, W = omega.shape
    sim = _VorticitySpectral(H, W, nu)
    u, v = sim.velocity(np.fft.fft2(omega))
    return float(0.5 * np.mean(u * u + v * v))


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    pde: str = "diffusion"          # "diffusion" | "vorticity"
    grid: int = 32
    trajectories: int = 100
    steps: int = 40                 # integer model time steps per trajectory
    t_train: int = 20               # training horizon; later steps are Ext-t
    seed: int = 0
    nu: float = 2.5e-3
    velocity: tuple = (0.15, -0.1)  # diffusion only
    snapshots_per_step: int = 2     # 2 => half-step snapshots stored for Con-t
    substeps: int = 4               # vorticity integrator substeps per snapshot

    def validate(self):
        if self.pde not in ("diffusion", "vorticity"):
            raise ContractError(f"unknown pde kind '{self.pde}'")
        if self.trajectories < 10:
            raise ContractError("need at least 10 trajectories for a 7:2:1 split")
        if not 0 < self.t_train <= self.steps:
            raise ContractError("t_train must lie in (0, steps]")
        if self.snapshots_per_step < 1:
            raise ContractError("snapshots_per_step must be >= 1")


@dataclass
class TrajectoryDataset:
    fields: np.ndarray        # (n_traj, S, H, W, C) float32
    times: np.ndarray         # (S,)
    splits: dict              # {"train": [...], "val": [...], "test": [...]}
    config: DatasetConfig

    @property
    def n_traj(self):
        return self.fields.shape[0]

    @property
    def grid(self):
        return self.fields.shape[2], self.fields.shape[3]

    @property
    def channels(self):
        return self.fields.shape[4]

    def snapshot_index(self, t: float) -> int:
        """Index of the stored snapshot at model time t (must be on the store lattice)."""
        sps = self.config.snapshots_per_step
        idx = t * sps
        if abs(idx - round(idx)) > 1e-9:
            raise ContractError(f"no stored snapshot at t={t}")
        idx = int(round(idx))
        if not 0 <= idx < self.fields.shape[1]:
            raise ContractError(f"t={t} outside stored horizon")
        return idx

    def field_at(self, traj: int, t: float) -> np.ndarray:
        return self.fields[traj, self.snapshot_index(t)]

    def snapshot_of(self, traj: int, t: float) -> FieldSnapshot:
        return FieldSnapshot(self.field_at(traj, t), t)


def split_indices(n: int, seed) -> dict:
    """Deterministic 7:2:1 split of range(n) by seed."""
    if n < 10:
        raise ContractError(f"split degenerates below 10 trajectories (got {n})")
    order = np.random.default_rng([seed, 0x5917]).permutation(n)
    n_tr = int(n * 0.7)
    n_va = int(n * 0.2)
    return {"train": sorted(int(i) for i in order[:n_tr]),
            "val": sorted(int(i) for i in order[n_tr:n_tr + n_va]),
            "test": sorted(int(i) for i in order[n_tr + n_va:])}


def make_dataset(cfg: DatasetConfig, workers: int = 1) -> TrajectoryDataset:
    """Simulate all trajectories; deterministic for a given config regardless
    of worker count (each trajectory is independently seeded)."""
    cfg.validate()
    H = W = cfg.grid
    sps = cfg.snapshots_per_step
    dt_snap = 1.0 / sps
    n_snap = cfg.steps * sps + 1
    fields = np.empty((cfg.trajectories, n_snap, H, W, 1), dtype=np.float32)

    def one(j: int) -> np.ndarray:
        ic = FieldSnapshot(random_initial_field(H, W, [cfg.seed, j]), 0.0)
        if cfg.pde == "diffusion":
            traj = simulate_diffusion_advection(ic, cfg.nu, cfg.velocity, dt_snap,
                                                n_snap - 1)
        else:
            traj = simulate_vorticity(ic, cfg.nu, dt_snap, n_snap - 1,
                                      substeps=cfg.substeps)
        return traj.fields.astype(np.float32)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for j, arr in enumerate(pool.map(one, range(cfg.trajectories))):
                fields[j] = arr
    else:
        for j in range(cfg.trajectories):
            fields[j] = one(j)
    times = dt_snap * np.arange(n_snap)
    return TrajectoryDataset(fields, times, split_indices(cfg.trajectories, cfg.seed), cfg)


def save_dataset(ds: TrajectoryDataset, dirpath: str) -> None:
    os.makedirs(dirpath, exist_ok=True)
    n, S, H, W, C = ds.fields.shape
    manifest = {
        "grid": [H, W],
        "channels": C,
        "dt": float(ds.times[1] - ds.times[0]) if S > 1 else 1.0,
        "n_snapshots": S,
        "n_trajectories": n,
        "times": [float(t) for t in ds.times],
        "splits": ds.splits,
        "physics": asdict(ds.config),
        "layout": "[step][row][col][channel] float32 little-endian",
        "files": [f"traj_{j:05d}.bin" for j in range(n)],
    }
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    for j in range(n):
        arr = np.ascontiguousarray(ds.fields[j], dtype="<f4")
        with open(os.path.join(dirpath, manifest["files"][j]), "wb") as fh:
            fh.write(arr.tobytes())


def load_dataset(dirpath: str) -> TrajectoryDataset:
    with open(os.path.join(dirpath, "manifest.json")) as fh:
        manifest = json.load(fh)
    H, W = manifest["grid"]
    C = manifest["channels"]
    S = manifest["n_snapshots"]
    files = manifest["files"]
    fields = np.empty((len(files), S, H, W, C), dtype=np.float32)
    for j, name in enumerate(files):
        with open(os.path.join(dirpath, name), "rb") as fh:
            raw = np.frombuffer(fh.read(), dtype="<f4")
        fields[j] = raw.reshape(S, H, W, C)
    phys = manifest["physics"]
    phys["velocity"] = tuple(phys.get("velocity", (0.0, 0.0)))
    cfg = DatasetConfig(**phys)
    return TrajectoryDataset(fields, np.asarray(manifest["times"]), manifest["splits"], cfg)
