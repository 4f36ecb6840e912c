import math
from dataclasses import replace

import numpy as np
import pytest

from dispersekit.collapse_lab import (
    EncoderParams,
    TrainConfig,
    compare_with_baseline,
    dataset_for,
    dispersion_metrics,
    encode,
    evaluate_objective,
    format_dataset_csv,
    generate_clusters,
    init_params,
    linear_probe_accuracy,
    nearest_centroid_accuracy,
    objective_and_grads,
    parse_dataset_csv,
    softmax_cross_entropy,
    train_two_stage,
)
from dispersekit.dispersion import DispersionSpec, dispersive_loss
from dispersekit.errors import ConfigError, DegenerateBatchError, DivergenceError, InvalidInputError
from dispersekit.gradcheck import objective_trial
from dispersekit.numeric_core import fd_gradient, max_rel_error, seeded_normal
from dispersekit.telu import relu, telu

from . import oracles

SHORT = dict(stage1_epochs=40, stage2_epochs=40)


# ---- data


def test_cluster_shape_and_labels():
    ds = generate_clusters(2, 10, 4, 0.1, seed=0)
    assert ds.X.shape == (20, 4)
    assert ds.y.tolist() == [0] * 10 + [1] * 10


def test_cluster_determinism():
    a, b = generate_clusters(3, 5, 4, 0.2, 7), generate_clusters(3, 5, 4, 0.2, 7)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)


def test_clusters_separable():
    ds = generate_clusters(3, 50, 8, 0.05, seed=1)
    assert nearest_centroid_accuracy(ds.X, ds.y) >= 0.99


def test_more_classes_than_axes():
    ds = generate_clusters(5, 4, 2, 0.05, seed=0)
    assert nearest_centroid_accuracy(ds.X, ds.y) == 1.0


@pytest.mark.parametrize("args", [(1, 5, 2, 0.1), (2, 1, 2, 0.1), (2, 5, 2, 0.0)])
def test_cluster_validation(args):
    with pytest.raises(InvalidInputError):
        generate_clusters(*args, seed=0)


def test_dataset_csv_roundtrip():
    ds = generate_clusters(3, 4, 2, 0.1, seed=3)
    back = parse_dataset_csv(format_dataset_csv(ds))
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y) and back.K == 3
    with pytest.raises(InvalidInputError, match="row 1, column 3"):
        parse_dataset_csv("0.1,0.2,1.5\n")


# ---- forward pass


def test_encode_zero_params():
    p = EncoderParams(np.zeros((3, 4)), np.zeros(4), np.zeros((4, 2)), np.zeros(2), np.zeros((2, 2)), np.zeros(2))
    H1, H2 = encode(p, seeded_normal(5, 3, 0))
    assert np.all(H1 == 0) and np.all(H2 == 0)


def test_encode_relu_identity():
    X = np.abs(seeded_normal(6, 4, 1))
    p = init_params(4, 4, 2, 2, "relu", seed=0)
    p.W1[...] = np.eye(4)
    H1, _ = encode(p, X)
    assert np.array_equal(H1, X)


@pytest.mark.parametrize("activation, act", [("telu", telu), ("relu", relu)])
def test_encode_matches_reference(activation, act):
    p = init_params(5, 6, 3, 2, activation, seed=5)
    p.b1[...] = seeded_normal(1, 6, 6)[0]
    p.b2[...] = seeded_normal(1, 3, 7)[0]
    X = seeded_normal(7, 5, 8)
    H1, H2 = encode(p, X)
    R1, R2 = oracles.forward_mlp(X, p.W1.tolist(), p.b1.tolist(), p.W2.tolist(), p.b2.tolist(), act)
    np.testing.assert_allclose(H1, R1, rtol=0, atol=1e-12)
    np.testing.assert_allclose(H2, R2, rtol=0, atol=1e-12)


def test_encode_shape_mismatch():
    with pytest.raises(InvalidInputError, match="shape mismatch"):
        encode(init_params(3, 4, 2, 2), seeded_normal(2, 5, 0))


# ---- objective


def test_cross_entropy_reference():
    logits = seeded_normal(4, 3, 2)
    y = np.array([0, 2, 1, 2])
    loss, _ = softmax_cross_entropy(logits, y)
    ref = -sum(logits[i, y[i]] - math.log(sum(math.exp(v) for v in logits[i])) for i in range(4)) / 4
    assert loss == pytest.approx(ref, abs=1e-14)


def test_lambda_zero_is_plain_cross_entropy():
    p = init_params(3, 5, 2, 3, seed=1)
    X, y = seeded_normal(6, 3, 2), np.array([0, 1, 2, 0, 1, 2])
    spec = DispersionSpec()
    out = evaluate_objective(p, X, y, 0.0, spec)
    H1, H2 = encode(p, X)
    ce, _ = softmax_cross_entropy(H2 @ p.head_W + p.head_b, y)
    assert out.total == ce and out.mask_loss == ce
    assert out.disp_loss == dispersive_loss(H1, spec)
    # dispersion adds nothing to the gradient at lambda = 0
    tiny = evaluate_objective(p, X, y, 1e-300, spec)
    assert np.array_equal(out.grads.flatten(), tiny.grads.flatten())


@pytest.mark.parametrize("variant", ["infonce_l2", "infonce_cos", "hinge", "covariance"])
@pytest.mark.parametrize("trial_seed", range(4))
def test_objective_gradient_fd(variant, trial_seed):
    assert objective_trial(DispersionSpec(variant=variant), trial_seed)["rel_err"] < 1e-5


def test_objective_and_grads_direct_fd():
    p = init_params(4, 5, 2, 3, "telu", seed=3)
    X, y = seeded_normal(4, 4, 4), np.array([0, 1, 2, 1])
    spec = DispersionSpec(variant="infonce_l2")
    total, grads = objective_and_grads(p, X, y, 0.6, spec, "late")
    fd = fd_gradient(lambda th: objective_and_grads(p.with_flat(th), X, y, 0.6, spec, "late")[0], p.flatten())
    assert max_rel_error(grads.flatten(), fd) < 1e-5


def test_duplicated_batch_raises_dispersive_term():
    p = init_params(3, 6, 2, 2, "telu", seed=2)
    X = seeded_normal(4, 3, 9)
    y = np.array([0, 1, 0, 1])
    spec = DispersionSpec(variant="infonce_l2", epsilon=0.0)
    spread = evaluate_objective(p, X, y, 0.6, spec, "late").disp_loss
    dup = evaluate_objective(p, np.repeat(X[:1], 4, axis=0), y, 0.6, spec, "late").disp_loss
    assert spread < dup == 0.0


def test_degenerate_batch():
    p = init_params(3, 4, 2, 2)
    with pytest.raises(DegenerateBatchError):
        evaluate_objective(p, seeded_normal(1, 3, 0), [0], 0.5, DispersionSpec())
    assert evaluate_objective(p, seeded_normal(1, 3, 0), [0], 0.0, DispersionSpec()).disp_loss == 0.0


def test_params_flat_roundtrip():
    p = init_params(3, 4, 2, 2, seed=4)
    q = p.with_flat(p.flatten())
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))
    with pytest.raises(InvalidInputError):
        p.with_flat(np.zeros(3))


# ---- metrics


def test_metrics_collapsed():
    m = dispersion_metrics(np.ones((4, 3)))
    assert m == {"mean_pairwise_dist": 0.0, "min_pairwise_dist": 0.0, "cov_offdiag_energy": 0.0}


def test_metrics_345():
    m = dispersion_metrics([[0, 0], [3, 4]])
    assert m["mean_pairwise_dist"] == 5.0 and m["min_pairwise_dist"] == 5.0


def test_metrics_reference():
    H = seeded_normal(16, 8, 9)
    m = dispersion_metrics(H)
    mean, low = oracles.pairwise_dist_stats(H)
    assert m["mean_pairwise_dist"] == pytest.approx(mean, abs=1e-12)
    assert m["min_pairwise_dist"] == pytest.approx(low, abs=1e-12)
    assert m["mean_pairwise_dist"] == pytest.approx(3.9857411028214624, abs=1e-12)
    assert m["cov_offdiag_energy"] == dispersive_loss(H, DispersionSpec(variant="covariance"))
    assert m["min_pairwise_dist"] <= m["mean_pairwise_dist"]


def test_metrics_degenerate():
    with pytest.raises(DegenerateBatchError):
        dispersion_metrics([[1.0, 2.0]])


def test_probe_on_separable_features():
    ds = generate_clusters(3, 20, 3, 0.05, seed=0)
    assert linear_probe_accuracy(ds.X, ds.y, 3) == 1.0


# ---- config


def test_config_defaults():
    c = TrainConfig()
    assert (c.lambda1, c.lambda2, c.tau, c.placement) == (0.2, 0.6, 0.8, "early")
    assert c.encoder_lr_stage2 == pytest.approx(c.lr_stage1 / 10)
    assert c.head_lr_stage2 == c.lr_stage1


def test_config_rejects_every_bad_key():
    with pytest.raises(ConfigError) as info:
        TrainConfig.from_json('{"lambda1": -1, "placement": "middle", "lamda2": 0.5, "batch_size": 1}')
    assert len(info.value.problems) == 4
    assert "lamda2: unknown key" in info.value.problems


def test_config_json_roundtrip():
    import json
    c = TrainConfig(seed=3, variant="hinge", lr_encoder_stage2=0.02)
    assert TrainConfig.from_json(json.dumps(c.to_dict())) == c


# ---- training


def test_baseline_learns():
    cfg = TrainConfig(lambda1=0.0, lambda2=0.0, spread=0.05, n_classes=3)
    _, report = train_two_stage(dataset_for(cfg), cfg)
    assert report.probe_accuracy >= 0.95


def test_training_deterministic():
    cfg = TrainConfig(**SHORT, seed=2)
    a = train_two_stage(dataset_for(cfg), cfg)[1]
    b = train_two_stage(dataset_for(cfg), cfg)[1]
    assert a == b


def test_minibatch_training_deterministic():
    cfg = TrainConfig(**SHORT, batch_size=16, seed=1)
    a = train_two_stage(dataset_for(cfg), cfg)[1]
    b = train_two_stage(dataset_for(cfg), cfg)[1]
    assert a.curve == b.curve and len(a.curve) == 80


def test_curve_and_lambda_zero_contribution():
    cfg = TrainConfig(**SHORT, lambda1=0.0, lambda2=0.0)
    _, report = train_two_stage(dataset_for(cfg), cfg)
    assert [r["stage"] for r in report.curve] == [1] * 40 + [2] * 40
    assert all(r["total"] == r["mask_loss"] for r in report.curve)
    assert all(r["disp_loss"] < 0 for r in report.curve)


def test_dispersion_widens_embedding():
    cfg = TrainConfig(seed=0)
    on = train_two_stage(dataset_for(cfg), cfg)[1]
    off = train_two_stage(dataset_for(cfg), replace(cfg, lambda1=0.0, lambda2=0.0))[1]
    assert on.mean_pairwise_dist > off.mean_pairwise_dist


def test_stage_two_uses_reduced_encoder_rate():
    # with zero stage-two head rate and encoder rate, stage two must not move anything
    cfg = TrainConfig(stage1_epochs=5, stage2_epochs=5, lr_encoder_stage2=1e-300, lr_head_stage2=1e-300)
    cfg0 = replace(cfg, stage2_epochs=0)
    p1, _ = train_two_stage(dataset_for(cfg), cfg)
    p0, _ = train_two_stage(dataset_for(cfg0), cfg0)
    assert np.allclose(p1.flatten(), p0.flatten(), rtol=0, atol=1e-200)


def test_divergence_guard():
    cfg = TrainConfig(stage1_epochs=200, stage2_epochs=0, lr_stage1=1e4, variant="covariance", lambda1=1.0)
    with pytest.raises(DivergenceError) as info:
        train_two_stage(dataset_for(cfg), cfg)
    assert info.value.epoch >= 1


def test_dataset_class_mismatch():
    cfg = TrainConfig(n_classes=4)
    with pytest.raises(InvalidInputError):
        train_two_stage(generate_clusters(3, 5, 8, 0.1, 0), cfg)


def test_lambda_sweep_monotone():
    hits = 0
    for s in range(5):
        vals = [train_two_stage(dataset_for(TrainConfig(seed=s)),
                                TrainConfig(seed=s, lambda1=lam, lambda2=lam))[1].mean_pairwise_dist
                for lam in (0.0, 0.2, 0.6)]
        hits += vals[0] <= vals[1] <= vals[2]
    assert hits >= 4


def test_compare_with_baseline_shape():
    out = compare_with_baseline(TrainConfig(**SHORT), seeds=[0, 1])
    assert [r["seed"] for r in out["seeds"]] == [0, 1]
    assert 0 <= out["wider_count"] <= 2
