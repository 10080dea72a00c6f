import json

import numpy as np
import pytest

from n2nsdf import diffkit as dk
from n2nsdf.field import ConfigError, HashGridConfig, MlpConfig, init_field
from n2nsdf.sampling import ObservationSet, synthesize_noisy
from n2nsdf.shapes import Sphere
from n2nsdf.training import (Adam, TrainConfig, TrainingDiverged, TrainLog, direct_point_optimization, load_state,
                             train)
from n2nsdf.transport import emd_loss

SMALL_MLP = MlpConfig(hidden_layers=2, width=32)
SMALL_GRID = HashGridConfig(levels=4, table_size=2 ** 12, base_resolution=4, finest_resolution=32)


def sphere_set(n=1000, sigma=0.01, N=1, seed=0):
    G = Sphere().sample(n, seed)
    return ObservationSet.from_clouds([synthesize_noisy(G, sigma, seed + 1 + k) for k in range(N)])


def small_cfg(**kw):
    base = dict(mode="mlp", iterations=50, batch=100, mlp=SMALL_MLP, k_scale=20, queries_per_point=10)
    base.update(kw)
    return TrainConfig(**base)


def test_defaults():
    cfg = TrainConfig().resolved()
    assert cfg.batch == 250
    assert cfg.iterations == 100_000
    assert cfg.mlp == MlpConfig(hidden_layers=8, width=256)
    assert cfg.grid is None and cfg.far_fraction == 0.0
    fast = TrainConfig(mode="fast").resolved()
    assert fast.iterations == 10_000
    assert fast.grid == HashGridConfig(levels=14, table_size=2 ** 19, feature_dim=2, base_resolution=16,
                                       finest_resolution=2048)
    assert fast.mlp == MlpConfig(hidden_layers=3, width=64)
    assert fast.lr == 1e-3 and fast.lr_hash == 1e-2 and fast.far_fraction == 0.1


@pytest.mark.parametrize("bad", [dict(mode="gpu"), dict(iterations=-1), dict(batch=0), dict(lr=0.0),
                                 dict(pairing="random")])
def test_bad_config_is_rejected(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad).resolved()


def test_zero_iterations_returns_initial_params():
    params, log = train(sphere_set(), small_cfg(iterations=0, seed=4))
    ref = init_field(SMALL_MLP, seed=4)
    assert len(log) == 0
    for k in ref.names():
        assert np.array_equal(params.arrays[k], ref.arrays[k])


def test_loss_decreases_over_training():
    early, late = [], []
    for seed in range(5):
        _, log = train(sphere_set(seed=seed), small_cfg(iterations=2000, seed=seed))
        total = log.column("total")
        early.append(total[95:105].mean())
        late.append(total[1995:2000].mean())
    assert np.median(late) < np.median(early)


def test_same_seed_is_bitwise_reproducible():
    S = sphere_set()
    a, la = train(S, small_cfg(seed=3))
    b, lb = train(S, small_cfg(seed=3))
    for k in a.names():
        assert a.arrays[k].tobytes() == b.arrays[k].tobytes()
    assert np.array_equal(la.column("total"), lb.column("total"))


def test_resume_replays_the_uninterrupted_run(tmp_path):
    S = sphere_set(N=2)
    cfg = small_cfg(iterations=60, seed=1, checkpoint_every=25, checkpoint_dir=str(tmp_path))
    full, full_log = train(S, cfg)
    resumed, log = train(S, cfg, resume=str(tmp_path / "iter_0000025"))
    np.testing.assert_allclose(log.column("total"), full_log.column("total"), rtol=1e-6, atol=0)
    for k in full.names():
        np.testing.assert_allclose(resumed.arrays[k], full.arrays[k], rtol=1e-6, atol=1e-9)
    params, st, _, it = load_state(tmp_path / "iter_0000050")
    assert it == 50 and set(st) >= {"m", "v"}


def test_fast_mode_pull_term_is_exactly_zero_after_ramp():
    cfg = TrainConfig(mode="fast", iterations=1100, batch=100, mlp=MlpConfig(hidden_layers=2, width=16),
                      grid=SMALL_GRID, k_scale=20, queries_per_point=10)
    _, log = train(sphere_set(), cfg)
    pull = log.column("pull")
    assert np.all(pull[1000:] == 0.0)
    assert np.all(pull[:1000] > 0.0)


def test_non_finite_parameters_abort_with_checkpoint(tmp_path):
    init = init_field(SMALL_MLP, seed=0)
    init.arrays["mlp.W0"][0, 0] = np.inf
    with pytest.raises(TrainingDiverged) as info:
        train(sphere_set(), small_cfg(checkpoint_dir=str(tmp_path)), init=init)
    assert info.value.iter == 0
    diag = json.loads((tmp_path / "diverged.json").read_text())
    assert diag["iter"] == 0
    assert (tmp_path / "last_good.ckpt").exists()


def test_gradient_clipping_caps_the_step_norm():
    _, log = train(sphere_set(), small_cfg(iterations=20, clip_grad=1e-6))
    assert np.all(log.column("gnorm") > 0)


def test_log_csv_round_trip(tmp_path):
    _, log = train(sphere_set(), small_cfg(iterations=5, log_path=str(tmp_path / "log.csv")))
    back = TrainLog.read_csv(tmp_path / "log.csv")
    assert [r["iter"] for r in back.rows] == list(range(5))
    np.testing.assert_array_equal(back.column("total"), log.column("total"))
    with pytest.raises(ValueError):
        log.append(iter=0, total=0.0)


def test_lazy_adam_leaves_untouched_rows_alone():
    params = init_field(MlpConfig(hidden_layers=1, width=4), HashGridConfig(levels=1, table_size=2 ** 4,
                        base_resolution=4, finest_resolution=4), seed=0, dtype=np.float64)
    before = params.arrays["hash.0"].copy()
    opt = Adam(params, {k: 0.1 for k in params.names()})
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    grads["hash.0"] = dk.SparseRows(np.array([2, 2, 5]), np.ones((3, before.shape[1])), before.shape)
    opt.step(params, grads)
    changed = np.nonzero(np.any(params.arrays["hash.0"] != before, axis=1))[0]
    assert list(changed) == [2, 5]


def test_point_optimization_recovers_a_clean_single_observation():
    G = Sphere().sample(50, 0)
    S = ObservationSet([G])
    start = G + np.random.default_rng(1).normal(0, 0.05, G.shape)
    X = direct_point_optimization(S, 50, iters=2000, lr=0.01, init=start)
    assert emd_loss(X, G)[0] < 1e-3


def test_point_optimization_rejects_small_observations():
    with pytest.raises(ConfigError):
        direct_point_optimization(ObservationSet([np.zeros((5, 3))]), 10)
