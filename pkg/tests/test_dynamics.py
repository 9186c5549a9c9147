"""Synthetic generators against their analytic oracles, and the dataset
container contract."""

import numpy as np
import pytest

from cops import dynamics as D
from cops.tensor import ContractError


def _sin_x_field(H, W):
    coords = D.node_coords(H, W)
    return np.sin(2 * np.pi * coords[:, 0]).reshape(H, W)


# ---------------------------------------------------------------------------
# diffusion--advection
# ---------------------------------------------------------------------------

def test_single_mode_decay_matches_analytic():
    H = W = 32
    ic = D.FieldSnapshot(_sin_x_field(H, W))
    tr = D.simulate_diffusion_advection(ic, nu=0.01, vel=(0.0, 0.0), dt=1.0, steps=1)
    # analytic mode-decay oracle: amplitude factor exp(-nu (2 pi)^2 dt)
    factor = np.exp(-0.01 * (2 * np.pi) ** 2)
    assert np.isclose(factor, 0.6738254512, atol=1e-9)
    expected = _sin_x_field(H, W) * factor
    rel = np.max(np.abs(tr.fields[1][:, :, 0] - expected)) / np.max(np.abs(expected))
    assert rel < 1e-6


def test_constant_field_is_fixed_point():
    ic = D.FieldSnapshot(np.ones((8, 8)))
    tr = D.simulate_diffusion_advection(ic, nu=0.5, vel=(0.3, -0.2), dt=1.0, steps=5)
    assert np.allclose(tr.fields[-1], 1.0, atol=1e-12)


def test_full_period_advection_equals_pure_diffusion():
    H = W = 16
    ic = D.FieldSnapshot(_sin_x_field(H, W))
    pure = D.simulate_diffusion_advection(ic, nu=0.02, vel=(0.0, 0.0), dt=1.0, steps=1)
    moved = D.simulate_diffusion_advection(ic, nu=0.02, vel=(1.0, 0.0), dt=1.0, steps=1)
    assert np.allclose(pure.fields[1], moved.fields[1], atol=1e-12)


def test_every_low_mode_decays_exactly():
    H = W = 16
    coords = D.node_coords(H, W)
    x, y = coords[:, 0].reshape(H, W), coords[:, 1].reshape(H, W)
    nu, dt = 3e-3, 0.7
    for fx, fy in [(1, 0), (0, 2), (2, 3)]:
        ic = D.FieldSnapshot(np.cos(2 * np.pi * (fx * x + fy * y)))
        tr = D.simulate_diffusion_advection(ic, nu, (0.0, 0.0), dt, 1)
        k2 = (2 * np.pi) ** 2 * (fx ** 2 + fy ** 2)
        expected = ic.values * np.exp(-nu * k2 * dt)
        rel = np.max(np.abs(tr.fields[1] - expected)) / np.max(np.abs(expected))
        assert rel < 1e-6, (fx, fy)


def test_mean_is_conserved_exactly():
    ic = D.FieldSnapshot(D.random_initial_field(16, 16, 5) + 0.37)
    tr = D.simulate_diffusion_advection(ic, 1e-2, (0.2, 0.1), 0.5, 10)
    means = tr.fields.mean(axis=(1, 2, 3))
    assert np.allclose(means, means[0], atol=1e-12)


def test_contract_errors():
    ic = D.FieldSnapshot(np.ones((8, 8)))
    with pytest.raises(ContractError):
        D.simulate_diffusion_advection(ic, nu=0.0, vel=(0, 0), dt=1.0, steps=1)
    with pytest.raises(ContractError):
        D.simulate_diffusion_advection(ic, nu=0.1, vel=(0, 0), dt=-1.0, steps=1)


# ---------------------------------------------------------------------------
# vorticity
# ---------------------------------------------------------------------------

def _taylor_green(H, W, amp=1.0):
    coords = D.node_coords(H, W)
    x, y = coords[:, 0].reshape(H, W), coords[:, 1].reshape(H, W)
    return amp * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)


def test_taylor_green_decay_oracle():
    nu = 1e-3
    tr = D.simulate_vorticity(D.FieldSnapshot(_taylor_green(32, 32)), nu, 0.1, 10,
                              substeps=2)
    measured = np.max(np.abs(tr.fields[-1])) / np.max(np.abs(tr.fields[0]))
    analytic = np.exp(-2 * nu * (2 * np.pi) ** 2 * 1.0)
    assert abs(measured - analytic) / analytic < 1e-8


def test_zero_ic_stays_zero():
    tr = D.simulate_vorticity(D.FieldSnapshot(np.zeros((16, 16))), 1e-3, 0.1, 5)
    assert np.all(tr.fields == 0)


def test_energy_non_increasing():
    nu = 1e-3
    ic = D.FieldSnapshot(D.random_initial_field(32, 32, 11))
    tr = D.simulate_vorticity(ic, nu, 0.1, 10, substeps=2)
    energies = [D.kinetic_energy(tr.fields[s], nu) for s in range(tr.fields.shape[0])]
    for a, b in zip(energies, energies[1:]):
        assert b <= a + 1e-6


def test_vorticity_mean_conserved_per_step():
    ic = D.FieldSnapshot(D.random_initial_field(16, 16, 2) + 0.1)
    tr = D.simulate_vorticity(ic, 1e-3, 0.1, 8, substeps=2)
    means = tr.fields.mean(axis=(1, 2, 3))
    assert np.max(np.abs(np.diff(means))) < 1e-8


def test_refinement_order_at_least_3_5():
    # halving the internal step should shrink the error ~16x (RK4)
    nu = 1e-3
    ic = D.FieldSnapshot(0.25 * D.random_initial_field(16, 16, 3))
    ref = D.simulate_vorticity(ic, nu, 0.25, 1, substeps=16).fields[-1]
    coarse = D.simulate_vorticity(ic, nu, 0.25, 1, substeps=1).fields[-1]
    fine = D.simulate_vorticity(ic, nu, 0.25, 1, substeps=2).fields[-1]
    e_c = np.max(np.abs(coarse - ref))
    e_f = np.max(np.abs(fine - ref))
    order = np.log2(e_c / e_f)
    assert order >= 3.5, order


def test_cfl_violation_advises_smaller_dt():
    ic = D.FieldSnapshot(_taylor_green(32, 32, amp=50.0))
    with pytest.raises(ContractError, match="reduce dt"):
        D.simulate_vorticity(ic, 1e-3, 1.0, 1)


def test_grid_cap_enforced():
    with pytest.raises(ContractError, match="desk scale"):
        D.simulate_vorticity(D.FieldSnapshot(np.zeros((128, 128))), 1e-3, 0.1, 1)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def test_split_100_is_70_20_10():
    s = D.split_indices(100, seed=4)
    assert (len(s["train"]), len(s["val"]), len(s["test"])) == (70, 20, 10)
    assert sorted(s["train"] + s["val"] + s["test"]) == list(range(100))


def test_split_deterministic():
    assert D.split_indices(40, seed=9) == D.split_indices(40, seed=9)
    assert D.split_indices(40, seed=9) != D.split_indices(40, seed=10)


def test_split_too_small_errors():
    with pytest.raises(ContractError, match="10"):
        D.split_indices(9, seed=0)


def test_ext_t_region_tagging():
    cfg = D.DatasetConfig(grid=16, trajectories=10, steps=40, t_train=20, seed=0)
    ds_cfg_ok = cfg
    assert ds_cfg_ok.t_train == 20
    # steps 21..40 are beyond the training horizon by definition
    ext_steps = [k for k in range(1, cfg.steps + 1) if k > cfg.t_train]
    assert ext_steps == list(range(21, 41))


def test_dataset_roundtrip_and_times(tmp_path):
    cfg = D.DatasetConfig(grid=16, trajectories=10, steps=4, t_train=2, seed=3)
    ds = D.make_dataset(cfg)
    assert ds.fields.shape == (10, 9, 16, 16, 1)
    assert np.allclose(ds.times, 0.5 * np.arange(9))
    D.save_dataset(ds, str(tmp_path))
    ds2 = D.load_dataset(str(tmp_path))
    assert np.array_equal(ds.fields, ds2.fields)
    assert ds.splits == ds2.splits
    assert ds2.config.pde == "diffusion"


def test_make_dataset_deterministic_and_parallel_equal():
    cfg = D.DatasetConfig(grid=16, trajectories=12, steps=2, t_train=1, seed=8)
    a = D.make_dataset(cfg)
    b = D.make_dataset(cfg, workers=2)
    assert np.array_equal(a.fields, b.fields)


def test_random_ic_unit_amplitude_and_seeded():
    a = D.random_initial_field(16, 16, 42)
    b = D.random_initial_field(16, 16, 42)
    c = D.random_initial_field(16, 16, 43)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.isclose(np.max(np.abs(a)), 1.0)
