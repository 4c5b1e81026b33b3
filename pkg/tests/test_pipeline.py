import numpy as np
import pytest

from conftest import three_class_spec, two_class_spec
from mpcnet import pipeline
from mpcnet.network import NetworkConfig, init_params, param_count
from mpcnet.pipeline import (TrainConfig, TrainingError, evaluate, load_params, save_params,
                             train)
from mpcnet.pointcloud import generate_synthetic_scene
from mpcnet.sampling import GridBalancedSampler, SampleSet, random_sampling_baseline

NET = NetworkConfig(bands=3, classes=2, base_channels=2, head_hidden=8)


@pytest.fixture(scope="module")
def scene():
    cloud = generate_synthetic_scene(two_class_spec(n=150, label_rate=0.5, seed=4))
    samples = random_sampling_baseline(cloud, 3, 64, seed=1)
    return cloud, samples


def test_learning_rate_schedule():
    tc = TrainConfig()
    assert tc.lr_at(0) == 0.005
    assert tc.lr_at(10) == pytest.approx(0.005 * 0.95 ** 10)
    assert round(tc.lr_at(10), 6) == 0.002994


def test_config_validation():
    for bad in ({"epochs": -1}, {"batch_size": 0}, {"learning_rate": 0}, {"lam": -1},
                {"optimizer": "rmsprop"}, {"dtype": "float16"}, {"lr_decay": 1.5}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_zero_epochs_leaves_params_unchanged(scene):
    cloud, samples = scene
    model = train(cloud, samples, NET, TrainConfig(epochs=0, seed=5))
    fresh = init_params(model.net_config, seed=5)
    assert model.log.epochs == []
    for name, t in model.params.items():
        np.testing.assert_array_equal(t.value, fresh[name].value)


def test_training_is_deterministic_and_logged(scene):
    cloud, samples = scene
    tc = TrainConfig(epochs=3, batch_size=2, learning_rate=0.1, seed=2)
    a = train(cloud, samples, NET, tc)
    b = train(cloud, samples, NET, tc)
    assert len(a.log.epochs) == 3
    assert {"loss", "scale", "tail", "lr", "time"} <= set(a.log.epochs[0])
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].value, b.params[name].value)
    c = train(cloud, samples, NET, TrainConfig(epochs=3, batch_size=2, learning_rate=0.1, seed=3))
    assert any(not np.array_equal(a.params[n].value, c.params[n].value) for n in a.params)


def test_parameters_move_and_omegas_learn(scene):
    cloud, samples = scene
    model = train(cloud, samples, NET, TrainConfig(epochs=2, learning_rate=0.5))
    fresh = init_params(model.net_config, seed=0)
    moved = [n for n in model.params if not np.array_equal(model.params[n].value, fresh[n].value)]
    assert "tail1.omega" in moved and "scale1.omega" in moved and "msff1.p_ls" in moved


def test_baseline_parameter_audit(scene):
    cloud, samples = scene
    model = train(cloud, samples, NET, TrainConfig(epochs=1, msff=False, msl=False, ltl=False))
    heads = {n.split(".")[0] for n in model.params
             if n.startswith(("ce", "tail", "scale"))}
    assert param_count(model.params, "msff") == 0
    assert heads == {"ce"}
    assert model.net_config.msff is False


def test_empty_and_unlabeled_training_sets_fail(scene):
    cloud, _ = scene
    with pytest.raises(TrainingError):
        train(cloud, SampleSet.empty(64, "train"), NET, TrainConfig(epochs=1))
    samples = random_sampling_baseline(cloud, 1, 16, seed=0)
    with pytest.raises(TrainingError):
        train(cloud, samples, NET, TrainConfig(epochs=1),
              eval_label_mask=np.ones(cloud.n_points, dtype=bool))


def test_non_finite_loss_aborts(scene, monkeypatch):
    cloud, samples = scene
    real = pipeline.init_params

    def poisoned(*args, **kwargs):
        p = real(*args, **kwargs)
        p["local1.w"].value[0, 0] = np.nan
        return p

    monkeypatch.setattr(pipeline, "init_params", poisoned)
    with pytest.raises(TrainingError, match="non-finite"):
        train(cloud, samples, NET, TrainConfig(epochs=1))


def test_shard_evaluation_matches_single_pass(scene):
    cloud, samples = scene
    model = train(cloud, samples, NET, TrainConfig(epochs=1, learning_rate=0.5))
    test = random_sampling_baseline(cloud, 7, 64, seed=9)
    one = evaluate(cloud, test, model)
    three = evaluate(cloud, test, model, n_shards=3)
    np.testing.assert_equal(one.to_dict(), three.to_dict())


def test_evaluate_with_oracle_scores(scene, monkeypatch):
    cloud, samples = scene
    model = train(cloud, samples, NET, TrainConfig(epochs=0))
    truth = np.where(cloud.labels >= 0, cloud.labels, 0)

    def oracle_scores(sample, model, plan):
        return np.eye(2)[truth[sample.indices]]

    monkeypatch.setattr(pipeline, "sample_scores", oracle_scores)
    test = random_sampling_baseline(cloud, 10, 64, seed=3)
    rep = evaluate(cloud, test, model)
    assert rep.oa == rep.aa == rep.kappa == rep.miou == 1.0


def test_duplicate_point_tie_goes_to_class_zero(monkeypatch):
    cloud = generate_synthetic_scene(two_class_spec(n=4, seed=1))
    samples = SampleSet(np.array([[0], [0]]), np.zeros((2, 3)), np.array([0, 1]), 1, "test",
                        np.zeros(2, dtype=bool))
    rows = iter([np.array([[0.9, 0.1]]), np.array([[0.1, 0.9]])])
    monkeypatch.setattr(pipeline, "sample_scores", lambda *a: next(rows))
    model = pipeline.TrainedModel(init_params(NET), NET, TrainConfig(), frozenset(), None,
                                  pipeline.RunLog())
    sums, hits = pipeline.score_sums(cloud, samples, model)
    pred, covered = pipeline.predictions_from_sums(sums, hits)
    np.testing.assert_allclose(sums[0] / hits[0], [0.5, 0.5])
    assert pred[0] == 0 and covered.sum() == 1


def test_eval_mask_errors(scene):
    cloud, samples = scene
    model = train(cloud, samples, NET, TrainConfig(epochs=0))
    with pytest.raises(ValueError):
        evaluate(cloud, samples, model, eval_mask=np.zeros(cloud.n_points, dtype=bool))
    with pytest.raises(ValueError):
        evaluate(cloud, SampleSet.empty(64, "test"), model)


def test_save_load_round_trip(scene, tmp_path):
    cloud, samples = scene
    model = train(cloud, samples, NET, TrainConfig(epochs=1, learning_rate=0.5))
    path = tmp_path / "params.npz"
    save_params(model, path)
    back = load_params(path)
    assert back.net_config == model.net_config
    assert back.train_config == model.train_config
    assert back.tail_set == model.tail_set
    np.testing.assert_array_equal(back.scaler.mean_, model.scaler.mean_)
    for name in model.params:
        np.testing.assert_array_equal(back.params[name].value, model.params[name].value)
    a, b = evaluate(cloud, samples, model), evaluate(cloud, samples, back)
    np.testing.assert_equal(a.to_dict(), b.to_dict())


def test_gbs_split_trains_and_evaluates():
    cloud = generate_synthetic_scene(three_class_spec())
    sampler = GridBalancedSampler(k=128, cell_size=0.5, seed=0).fit(cloud)
    model = train(cloud, sampler.train_samples_,
                  NetworkConfig(bands=3, classes=3, base_channels=2, head_hidden=8),
                  TrainConfig(epochs=1, learning_rate=0.5))
    rep = evaluate(cloud, sampler.test_samples_, model, sampler.eval_mask_)
    assert 0.0 <= rep.oa <= 1.0
    assert rep.coverage == 1.0
