"""End-to-end model behavior: subsampling, forward schedule consistency,
training mechanics, evaluation protocol, ablations, checkpoints."""

import numpy as np
import pytest

from cops import dynamics as D
from cops import ode as O
from cops import pipeline as P
from cops import tensor as T
from cops.tensor import Tensor, Tape


@pytest.fixture(scope="module")
def tiny_dataset():
    cfg = D.DatasetConfig(grid=8, trajectories=10, steps=4, t_train=2, seed=1,
                          nu=5e-3, velocity=(0.2, -0.1))
    return D.make_dataset(cfg)


def _tiny_config(**over):
    base = dict(grid_h=8, grid_w=8, width=8, mfn_layers=2, n_scales=2, n_layers=1,
                batch_size=4, micro_batch=2, epochs=2, seed=0, subsample_ratio=0.5,
                val_every=1)
    base.update(over)
    return P.ModelConfig(**base)


# ---------------------------------------------------------------------------
# subsampling
# ---------------------------------------------------------------------------

def test_subsample_full_ratio_keeps_everything(tiny_dataset):
    snap = tiny_dataset.snapshot_of(0, 0.0)
    obs, ext = P.subsample_observations(snap, 1.0, seed=0)
    assert obs.points.shape[0] == 64
    assert not ext.any()


def test_subsample_quarter_of_32x32_is_256():
    snap = D.FieldSnapshot(np.zeros((32, 32)))
    obs, ext = P.subsample_observations(snap, 0.25, seed=3)
    assert obs.points.shape[0] == 256
    assert ext.sum() == 1024 - 256


def test_subsample_deterministic(tiny_dataset):
    snap = tiny_dataset.snapshot_of(0, 0.0)
    a, _ = P.subsample_observations(snap, 0.5, seed=42)
    b, _ = P.subsample_observations(snap, 0.5, seed=42)
    assert np.array_equal(a.indices, b.indices)


def test_subsample_too_few_points_rejected():
    snap = D.FieldSnapshot(np.zeros((8, 8)))
    with pytest.raises(T.ContractError, match="4"):
        P.subsample_observations(snap, 0.04, seed=0)


# ---------------------------------------------------------------------------
# forward schedule
# ---------------------------------------------------------------------------

def _obs_and_model(tiny_dataset, **cfg_over):
    cfg = _tiny_config(**cfg_over)
    model = P.Model(cfg)
    obs, _ = P.subsample_observations(tiny_dataset.snapshot_of(0, 0.0), 0.5,
                                      [tiny_dataset.config.seed, 9173, 0])
    return model, obs


def test_forward_deterministic(tiny_dataset):
    model, obs = _obs_and_model(tiny_dataset)
    q = P.QuerySet([0.0, 1.5, 2.0], [[0.1, 0.2], [0.8, 0.9], [0.5, 0.5]])
    a = P.forward_predict(obs, q, model)
    b = P.forward_predict(obs, q, model)
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(a))


def test_query_schedule_split_vs_whole_bit_identity(tiny_dataset):
    model, obs = _obs_and_model(tiny_dataset)
    pt = [[0.37, 0.61]]
    direct = P.forward_predict(obs, P.QuerySet([1.5], pt), model)
    via = P.forward_predict(obs, P.QuerySet([1.0, 1.5], pt + pt), model)
    assert np.array_equal(direct[0], via[1])


def test_latents_bit_identical_regardless_of_query_set(tiny_dataset):
    model, obs = _obs_and_model(tiny_dataset)
    z0 = model.encode(obs.points, obs.values)
    r1 = P.Rollout(model, z0, 1)
    r2 = P.Rollout(model, z0, 1)
    s1 = r1.latent_at(1.5)
    r2.latent_at(1.0)
    s2 = r2.latent_at(1.5)
    assert np.array_equal(s1.data, s2.data)


def test_query_before_t0_rejected(tiny_dataset):
    model, obs = _obs_and_model(tiny_dataset)
    with pytest.raises(T.ContractError, match="t0"):
        P.forward_predict(obs, P.QuerySet([-0.5], [[0.5, 0.5]]), model)


def test_lambda_zero_matches_corrector_removed(tiny_dataset):
    model, obs = _obs_and_model(tiny_dataset)
    q = P.QuerySet([2.0], [[0.3, 0.3]])
    lam0_cfg = _tiny_config(lam=0.0)
    with_corr = P.Model(lam0_cfg, params=model.params)
    without = P.Model(P.ablate(lam0_cfg, "no-nac"),
                      params={k: v for k, v in model.params.items() if k != "corrector"})
    assert np.array_equal(P.forward_predict(obs, q, with_corr),
                          P.forward_predict(obs, q, without))


def test_off_lattice_query_uses_shortened_step(tiny_dataset):
    model, obs = _obs_and_model(tiny_dataset)
    q = P.QuerySet([1.1], [[0.5, 0.5]])
    out = P.forward_predict(obs, q, model)
    assert np.all(np.isfinite(out))


# ---------------------------------------------------------------------------
# training mechanics
# ---------------------------------------------------------------------------

def test_adam_first_step_closed_form():
    lr, eps = 1e-3, 1e-8
    g = np.array([0.25, -3.0, 1e-4], dtype=np.float32)
    p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    p.grad = g.copy()
    tree = {"w": p}
    opt = P.Adam(lr=lr, eps=eps)
    opt.step(tree)
    expected = -lr * g / (np.abs(g) + eps)   # bias-corrected first step
    assert np.allclose(tree["w"].data, expected, rtol=1e-5)
    assert np.allclose(np.abs(tree["w"].data), lr, rtol=1e-3)  # ~ sign-scaled


def test_zero_epochs_returns_initial_params(tiny_dataset):
    cfg = _tiny_config(epochs=0)
    res = P.train(tiny_dataset, cfg)
    fresh = P.build_model_params(cfg, np.random.default_rng([cfg.seed, 11]))
    for (n1, _, _, t1), (n2, _, _, t2) in zip(P.iter_param_leaves(res.params),
                                              P.iter_param_leaves(fresh)):
        assert n1 == n2
        assert np.array_equal(t1.data, t2.data)


def test_training_is_seed_deterministic(tiny_dataset):
    cfg = _tiny_config(epochs=2)
    a = P.train(tiny_dataset, cfg)
    b = P.train(tiny_dataset, cfg)
    assert a.loss_curve == b.loss_curve
    assert a.val_curve == b.val_curve


def test_training_decreases_validation_loss(tiny_dataset):
    cfg = _tiny_config(epochs=6, train_window=2)
    res = P.train(tiny_dataset, cfg)
    assert res.best_val < res.initial_val
    assert not res.aborted


def test_end_to_end_gradient_check_micro_batch(tiny_dataset):
    # d(MSE)/d(every parameter group) vs central differences on 2 points
    with T.precision("float64"):
        cfg = _tiny_config()
        model = P.Model(cfg, rng=np.random.default_rng(3))
        obs_pts = np.array([[0.21, 0.34], [0.77, 0.58]])
        obs_vals = np.array([[0.5], [-0.2]])
        q_pts = np.array([[0.4, 0.4], [0.9, 0.1]])
        truth = Tensor(np.array([[0.1], [0.3]]))
        flat = T.flatten_params(model.params)

        def loss_fn(p):
            m = P.Model(cfg, params=T.unflatten_params(p))
            z0 = m.encode(obs_pts, obs_vals)
            roll = P.Rollout(m, z0, 1)
            # t = 1.25 crosses one correction and one shortened solver step,
            # so every parameter group participates
            pred = m.decode(roll.latent_at(1.25), q_pts)
            diff = pred - truth
            return T.reduce_mean(diff * diff)

        groups = {}
        for name in flat:
            groups.setdefault(name.split(".")[0], []).append(name)
        rep = T.grad_check(loss_fn, flat, tol=1e-3)
        worst = {}
        for e in rep.entries:
            g = e.name.split(".")[0]
            worst[g] = max(worst.get(g, 0.0), e.max_rel_err)
        assert set(worst) == {"encoder", "mapper", "ode", "corrector", "decoder"}
        for g, err in worst.items():
            assert err < 1e-3, (g, err)


# ---------------------------------------------------------------------------
# config + checkpoint
# ---------------------------------------------------------------------------

def test_config_json_roundtrip():
    cfg = _tiny_config(epochs=7)
    again = P.ModelConfig.from_json(cfg.to_json())
    assert again == cfg


def test_config_unknown_keys_rejected():
    with pytest.raises(T.ContractError, match="unknown config keys"):
        P.ModelConfig.from_dict({"grid_h": 8, "bogus_key": 1})


def test_config_dt_divisibility():
    with pytest.raises(T.ContractError, match="divide"):
        P.ModelConfig(dt_solver=0.3, dt_corr=1.0).validate()


def test_checkpoint_roundtrip_bit_exact(tmp_path, tiny_dataset):
    model, obs = _obs_and_model(tiny_dataset)
    P.save_checkpoint(str(tmp_path), model)
    loaded = P.load_checkpoint(str(tmp_path))
    assert loaded.config == model.config
    q = P.QuerySet([1.5], [[0.2, 0.8]])
    assert np.array_equal(P.forward_predict(obs, q, model),
                          P.forward_predict(obs, q, loaded))
    for (n1, _, _, t1), (n2, _, _, t2) in zip(P.iter_param_leaves(model.params),
                                              P.iter_param_leaves(loaded.params)):
        assert n1 == n2 and t1.data.tobytes() == t2.data.tobytes()


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def test_ablate_no_nac_sets_lambda_zero():
    cfg = P.ablate(_tiny_config(), "no-nac")
    assert cfg.lam == 0.0 and cfg.variant == "no-nac"


def test_ablate_accepts_paper_style_names():
    assert P.ablate(_tiny_config(), "w/o MFN").variant == "no-mfn"


def test_ablate_unknown_variant_rejected():
    with pytest.raises(T.ContractError, match="unknown ablation"):
        P.ablate(_tiny_config(), "no-everything")


def test_ablate_no_mfn_swaps_encoder_only():
    cfg = _tiny_config()
    full = P.build_model_params(cfg, np.random.default_rng(0))
    repl = P.build_model_params(P.ablate(cfg, "no-mfn"), np.random.default_rng(0))
    assert "gabor0" in full["encoder"] and "gabor0" not in repl["encoder"]
    assert set(full) == set(repl)


def test_ablate_no_mgo_never_calls_the_solver(tiny_dataset):
    model, obs = _obs_and_model(tiny_dataset, variant="no-mgo")
    O.reset_solver_call_count()
    q = P.QuerySet([2.0, 1.5], [[0.3, 0.3], [0.6, 0.6]])
    out = P.forward_predict(obs, q, model)
    assert O.solver_call_count() == 0
    assert np.all(np.isfinite(out))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def test_evaluate_perfect_oracle_zero_mse(tiny_dataset):
    # feed the ground truth as predictions through the shared eval loop
    proto = P.EvalProtocol(ratio=0.5)
    traj = tiny_dataset.splits["test"][0]
    sub = D.TrajectoryDataset(tiny_dataset.fields[[traj]], tiny_dataset.times,
                              {"test": [0], "train": [], "val": []},
                              tiny_dataset.config)

    def perfect_sub(obs, all_times, point_sets):
        out = {s: {} for s in point_sets}
        for s_tag, (pts, idx) in point_sets.items():
            for t in all_times:
                out[s_tag][t] = sub.field_at(0, t).reshape(-1, 1)[idx]
        return out

    rep = P._eval_predictions(perfect_sub, sub, proto)
    assert all(v == 0.0 for v in rep.mse.values())
    assert set(rep.mse) == {f"{s}/{t}" for s in ("In-s", "Ext-s")
                            for t in ("In-t", "Ext-t", "Con-t")}


def test_persistence_baseline_matches_analytic_decay_gap(tiny_dataset):
    # diffusion data: persistence MSE at time t is exactly the mean squared
    # difference between u0 and the analytically decayed field
    proto = P.EvalProtocol(ratio=1.0, space_tags=("In-s",), time_tags=("In-t",))
    rep = P.evaluate_persistence(tiny_dataset, proto)
    cfg = tiny_dataset.config
    sse, cnt = 0.0, 0
    for j in tiny_dataset.splits["test"]:
        u0 = tiny_dataset.fields[j, 0].astype(np.float64)
        for t in range(1, cfg.t_train + 1):
            tr = D.simulate_diffusion_advection(D.FieldSnapshot(u0), cfg.nu,
                                                cfg.velocity, float(t), 1)
            diff = u0 - tr.fields[1]
            sse += float(np.sum(diff * diff))
            cnt += diff.size
    assert np.isclose(rep.mse["In-s/In-t"], sse / cnt, rtol=1e-4)


def test_persistence_error_monotone_in_time():
    # pure diffusion: every mode decays monotonically, so the gap to the
    # initial state grows monotonically (advection would oscillate the phase)
    ds = D.make_dataset(D.DatasetConfig(grid=8, trajectories=10, steps=4, t_train=2,
                                        seed=2, nu=5e-3, velocity=(0.0, 0.0)))
    proto = P.EvalProtocol(ratio=1.0, space_tags=("In-s",), time_tags=("In-t", "Ext-t"))
    rep = P.evaluate_persistence(ds, proto)
    curve = rep.curve["In-s/In-t"] + rep.curve["In-s/Ext-t"]
    vals = [v for _, v in sorted(curve)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_evaluate_model_produces_all_tags(tiny_dataset):
    model, _ = _obs_and_model(tiny_dataset)
    rep = P.evaluate(model, tiny_dataset, P.EvalProtocol(ratio=0.5))
    assert set(rep.mse) == {f"{s}/{t}" for s in ("In-s", "Ext-s")
                            for t in ("In-t", "Ext-t", "Con-t")}
    assert all(v >= 0 for v in rep.mse.values())
    assert all(rep.steps[tag] > 0 for tag in rep.mse)


def test_evaluate_noise_protocol_perturbs_inputs(tiny_dataset):
    model, _ = _obs_and_model(tiny_dataset)
    clean = P.evaluate(model, tiny_dataset,
                       P.EvalProtocol(ratio=0.5, space_tags=("In-s",), time_tags=("In-t",)))
    noisy = P.evaluate(model, tiny_dataset,
                       P.EvalProtocol(ratio=0.5, noise_rel=0.2, space_tags=("In-s",),
                                      time_tags=("In-t",)))
    assert noisy.mse["In-s/In-t"] != clean.mse["In-s/In-t"]


def test_evaluate_missing_ground_truth_errors(tiny_dataset):
    cfg = D.DatasetConfig(grid=8, trajectories=10, steps=2, t_train=2, seed=3)
    ds = D.make_dataset(cfg)
    model, _ = _obs_and_model(tiny_dataset)
    with pytest.raises(T.ContractError, match="Ext-t"):
        P.evaluate(model, ds, P.EvalProtocol(ratio=0.5, time_tags=("Ext-t",)))
