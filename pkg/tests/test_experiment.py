import csv
import math

import numpy as np
import pytest

from sortpool import experiment as E
from sortpool.config import ConfigError, ExperimentConfig
from sortpool.data import Dataset

SMALL = ExperimentConfig(dataset="synthetic", synthetic_train=320, synthetic_test=100,
                         epochs=2, replicates=2, batch_size=32)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_shape_trace_uses_2x2_final_pool():
    g = E.build_network(ExperimentConfig(), 1)
    pools = g.pool_layers()
    assert [p.cfg.kernel for p in pools] == [(3, 3), (3, 3), (2, 2)]
    dense = g.layers[-1]
    assert dense.weight.shape == (10, 64)
    assert g.shape_pass((1, 1, 28, 28)) == (1, 10)


def test_input_too_small():
    with pytest.raises(ConfigError):
        E.build_network(ExperimentConfig(), 1, input_hw=(12, 12))


@pytest.mark.parametrize("variant,count", [("max", 0), ("avg", 0), ("kth:4", 0), ("sorted:4", 416),
                                           ("sorted:2", 208)])
def test_pool_parameter_count(variant, count):
    g = E.build_network(E.variant_config(ExperimentConfig(), variant), 1)
    assert E.pool_param_count(g) == count


def test_variant_parsing():
    assert E.variant_config(ExperimentConfig(), "kth:3").variant == "kth3"
    assert E.variant_config(ExperimentConfig(), "max").variant == "max"
    for bad in ("sorted", "median:2", "kth:10"):
        with pytest.raises(ConfigError):
            E.variant_config(ExperimentConfig(), bad)


def test_conv_weights_shared_across_variants():
    nets = [E.build_network(E.variant_config(ExperimentConfig(), v), 4) for v in ("max", "kth:4", "sorted:4")]
    ref = {p.name: p.value for p in nets[0].params()}
    for g in nets[1:]:
        for p in g.params():
            if p.name in ref:
                assert np.array_equal(p.value, ref[p.name]), p.name


def test_sorted_one_matches_max_network(rng):
    x = rng.uniform(size=(5, 1, 28, 28))
    a = E.build_network(E.variant_config(ExperimentConfig(), "max"), 2)
    b = E.build_network(E.variant_config(ExperimentConfig(), "sorted:1"), 2)
    assert np.array_equal(a.forward(x), b.forward(x))


def test_train_csv_columns_and_ranges(tmp_path):
    cfg = SMALL.replace(pool_mode="sorted", pool_k=3, replicates=1)
    E.train(cfg, tmp_path)
    rows = read_csv(tmp_path / "metrics.csv")
    header = list(rows[0].keys())
    assert header == E.BASE_COLUMNS + [f"w_l{l}_k{k}" for l in (1, 2, 3) for k in (1, 2, 3)]
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert [int(r["step"]) for r in rows] == [10, 20]
    for r in rows:
        assert 0 <= float(r["test_err_pct"]) <= 100 and 0 <= float(r["train_err_pct"]) <= 100
        for layer in (1, 2, 3):
            w = [float(r[f"w_l{layer}_k{k}"]) for k in (1, 2, 3)]
            assert all(v > 0 for v in w) and abs(sum(w) - 1) <= 1e-9
    assert (tmp_path / "sorted3-s1.ckpt").exists()


def test_eval_every_adds_rows(tmp_path):
    cfg = SMALL.replace(replicates=1, eval_every=4, epochs=1)
    E.train(cfg, tmp_path)
    assert [int(r["step"]) for r in read_csv(tmp_path / "metrics.csv")] == [4, 8, 10]


def test_train_is_byte_deterministic(tmp_path):
    cfg = SMALL.replace(pool_mode="sorted", pool_k=2)
    E.train(cfg, tmp_path / "a")
    E.train(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_sweep_keys_and_reduction(tmp_path):
    res = E.sweep(SMALL, ["max", "sorted:1"], tmp_path)
    rows = read_csv(tmp_path / "comparison.csv")
    assert [(r["seed"], r["epoch"]) for r in rows] == [("1", "1"), ("1", "2"), ("2", "1"), ("2", "2")]
    for r in rows:
        assert r["max_test_err_pct"] == r["sorted1_test_err_pct"]
    assert [r.test_error(2) for r in res["max"]] == [r.test_error(2) for r in res["sorted1"]]


def test_sweep_needs_two_variants(tmp_path):
    with pytest.raises(ConfigError):
        E.sweep(SMALL, ["max"], tmp_path)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_names_step_and_layer():
    cfg = SMALL.replace(replicates=1, epochs=1)
    train, test = E.load_data(cfg)
    g = E.build_network(cfg, 1)
    g.layers[3].weight[0, 0, 0, 0] = np.inf  # conv2
    with pytest.raises(E.TrainingDivergedError, match=r"step 1; .*layer conv2"):
        E.train_run(cfg, 1, train, test, graph=g)


def test_synthetic_smoke_run():
    """One epoch on the default synthetic set: < 20% test error, and the loss,
    averaged over blocks of 10 steps, does not increase over the first 50 steps
    in at least 4 of 5 seeds."""
    cfg = ExperimentConfig(dataset="synthetic", epochs=1)
    train, test = E.load_data(cfg)
    monotone = 0
    for seed in range(1, 6):
        run = E.train_run(cfg, seed, train, test)
        assert run.test_error(1) < 20.0
        blocks = np.asarray(run.step_losses[:50]).reshape(5, 10).mean(axis=1)
        monotone += bool(np.all(np.diff(blocks) <= 0))
    assert monotone >= 4


# -- episodic evaluation ----------------------------------------------------

def _pool(n_per_class=40):
    labels = np.repeat(np.arange(10), n_per_class)
    return Dataset(np.zeros((len(labels), 1, 28, 28)), labels)


def test_episode_sampling():
    pool = _pool()
    eps = E.sample_episodes(pool.labels, [5, 6, 7, 8, 9], 200, 3)
    assert eps.shape == (200, 5, 2)
    assert np.all(eps[:, :, 0] != eps[:, :, 1])
    assert np.array_equal(pool.labels[eps[:, :, 0]], np.tile([5, 6, 7, 8, 9], (200, 1)))
    assert np.array_equal(pool.labels[eps[:, :, 1]], pool.labels[eps[:, :, 0]])
    assert np.array_equal(eps, E.sample_episodes(pool.labels, [5, 6, 7, 8, 9], 200, 3))


def test_one_hot_embedding_is_perfect():
    pool = _pool()
    cfg = ExperimentConfig(episodes=1000)
    held = pool.with_classes(cfg.class_split()[1])

    def one_hot(images):
        assert len(images) == len(held.labels)
        return np.eye(10)[held.labels]

    res = E.episodic_eval(one_hot, cfg, pool)
    assert res.mean == 1.0 and len(res.accuracies) == 1000


def test_random_embedding_is_at_chance():
    pool = _pool(200)
    cfg = ExperimentConfig(episodes=2000)
    noise = np.random.default_rng(5)
    res = E.episodic_eval(lambda images: noise.normal(size=(len(images), 64)), cfg, pool)
    assert abs(res.mean - 0.2) < 3 * res.stderr


def test_episodic_rejects_overlap():
    cfg = ExperimentConfig(episodes=10)
    with pytest.raises(ConfigError):
        E.episodic_eval(lambda x: np.ones((len(x), 2)), cfg, _pool(), trained_classes=[0, 1, 2, 3, 5])
    E.episodic_eval(lambda x: np.ones((len(x), 2)), cfg, _pool(), trained_classes=[0, 1, 2, 3, 4])


def test_network_embedding_is_flatten_layer(rng):
    g = E.build_network(ExperimentConfig(pool_mode="sorted", pool_k=4), 1)
    x = rng.uniform(size=(3, 1, 28, 28))
    assert E.embed(g, x).shape == (3, 64)


def test_paired_difference():
    a = E.EpisodicResult(np.array([0.2, 0.4, 0.6]))
    b = E.EpisodicResult(np.array([0.4, 0.4, 1.0]))
    mean, se = E.paired_difference(a, b)
    assert mean == pytest.approx(0.2)
    assert se == pytest.approx(np.std([0.2, 0.0, 0.4], ddof=1) / math.sqrt(3))
