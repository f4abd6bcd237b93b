import numpy as np
import pytest

from conftest import make_model
from fedhe_sim.data import Dataset
from fedhe_sim.nn import ModelSpec, param_count
from fedhe_sim.orchestrator import (
    ConfigError,
    DatasetConfig,
    ExperimentConfig,
    aggregate_weighted,
    evaluate,
    metrics_to_csv,
    prepare_data,
    public_consensus,
    run_experiment,
    run_fedavg,
    run_fedhe,
    run_fedmd_lite,
    run_private,
    tabulated_cost,
)
from fedhe_sim.protocol import Method, comm_cost
from fedhe_sim.nn import forward, logit_loss, predict


def small_cfg(method="fedhe", K=3, rounds=12, seed=11, C=2, dim=2, widths=None, **kw):
    widths = widths or (dim, 8, C)
    defaults = dict(
        method=Method(method),
        seed=seed,
        rounds=rounds,
        client_specs=[ModelSpec(tuple(widths)) for _ in range(K)],
        client_speeds=[1.0] * K,
        dataset=DatasetConfig(kind="synthetic", class_count=C, input_dim=dim, n_per_class=60),
        batch_size=8,
        inner_epochs=2,
        alpha=1.0,
        lr=0.01,
        eval_every=4.0,
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


def test_validation_catches_mismatches():
    cfg = small_cfg()
    cfg.client_speeds = [1.0, 1.0]
    with pytest.raises(ConfigError, match="speeds"):
        cfg.validate()

    cfg = small_cfg()
    cfg.client_specs[1] = ModelSpec((2, 8, 3))
    with pytest.raises(ConfigError, match="client 1"):
        cfg.validate()

    cfg = small_cfg(rounds=0)
    with pytest.raises(ConfigError, match="rounds"):
        cfg.validate()

    cfg = small_cfg()
    cfg.dataset.kind = "idx"
    with pytest.raises(ConfigError, match="images"):
        cfg.validate()


def test_fedavg_rejects_heterogeneous_specs_naming_offenders():
    cfg = small_cfg(method="fedavg", K=3)
    cfg.client_specs[2] = ModelSpec((2, 4, 2))
    with pytest.raises(ConfigError, match=r"\[2\]"):
        run_fedavg(cfg)


def test_equal_speeds_serve_clients_in_order():
    cfg = small_cfg(K=3, rounds=7)
    result = run_fedhe(cfg)
    # cycles of 0,1,2: seven events leave client 0 one round ahead
    assert result.per_client_rounds == [3, 2, 2]


def test_single_client_fedhe_completes_and_matches_private_closely():
    fedhe = run_fedhe(small_cfg(K=1, rounds=60, batch_size=16))
    private = run_private(small_cfg(method="private", K=1, rounds=60, batch_size=16))
    assert fedhe.per_client_rounds == [60]
    assert abs(fedhe.final_mean_accuracy - private.final_mean_accuracy) <= 0.05


def test_fedhe_keeps_pace_with_private_on_synthetic_clusters():
    # paired 300-event runs with shared seeds and heterogeneous specs
    specs = [
        ModelSpec((8, 8, 4)),
        ModelSpec((8, 12, 4)),
        ModelSpec((8, 6, 8, 4)),
        ModelSpec((8, 8, 8, 4)),
        ModelSpec((8, 16, 4)),
    ]

    def cfg(method):
        return small_cfg(
            method=method, K=5, rounds=300, C=4, dim=8,
            dataset=DatasetConfig(kind="synthetic", class_count=4, input_dim=8, n_per_class=150),
            client_specs=list(specs),
        )

    fedhe = run_fedhe(cfg("fedhe"))
    private = run_private(cfg("private"))
    assert fedhe.final_mean_accuracy >= private.final_mean_accuracy - 0.01


def test_fedhe_ledger_charges_match_tabulated_cost():
    cfg = small_cfg(K=3, rounds=10)
    result = run_fedhe(cfg)
    per_round = comm_cost("fedhe", class_count=2)
    for k in range(3):
        rounds_k = result.per_client_rounds[k]
        assert result.ledger.kind_total("logits_up", client=k) == rounds_k * per_round
        # replies always cover every class because updates carry zero vectors
        assert result.ledger.kind_total("logits_down", client=k) == rounds_k * per_round


def test_metrics_rows_are_sane_and_comm_is_monotone():
    result = run_fedhe(small_cfg(rounds=15))
    times = [row.time for row in result.rows]
    assert times == sorted(times)
    totals = [row.comm_total for row in result.rows]
    assert totals == sorted(totals)
    for row in result.rows:
        assert all(0.0 <= a <= 1.0 for a in row.accuracies)
        assert abs(row.mean_accuracy - np.mean(row.accuracies)) < 1e-12


def test_private_run_has_zero_ledger():
    result = run_private(small_cfg(method="private", rounds=10))
    assert result.ledger.total() == 0
    assert all(row.comm_total == 0 for row in result.rows)


def test_private_all_clients_learn_separable_clusters():
    cfg = small_cfg(method="private", K=5, rounds=300, dataset=DatasetConfig(
        kind="synthetic", class_count=2, input_dim=2, n_per_class=120,
    ))
    result = run_private(cfg)
    assert all(acc > 0.9 for acc in result.final_accuracies)


def test_fedhe_alpha_zero_equals_private_bit_for_bit():
    fedhe = run_fedhe(small_cfg(method="fedhe", alpha=0.0, rounds=20))
    private = run_private(small_cfg(method="private", alpha=1.0, rounds=20))
    csv_a = metrics_to_csv(fedhe.rows, 3)
    csv_b = metrics_to_csv(private.rows, 3)
    assert csv_a == csv_b


def test_reruns_are_bit_identical():
    for method in ("fedhe", "private", "fedavg", "fedmd"):
        a = run_experiment(small_cfg(method=method, rounds=6))
        b = run_experiment(small_cfg(method=method, rounds=6))
        assert metrics_to_csv(a.rows, 3) == metrics_to_csv(b.rows, 3)


def test_straggler_fast_client_is_never_blocked():
    cfg = small_cfg(K=2, rounds=101)
    cfg.client_speeds = [1.0, 100.0]
    result = run_fedhe(cfg)
    fast, slow = result.per_client_rounds
    assert slow >= 1
    assert fast / slow >= 90


def test_aggregate_equal_sizes_is_plain_mean():
    a = make_model((2, 3, 2), seed=1)
    b = make_model((2, 3, 2), seed=2)
    ws, bs = aggregate_weighted([a, b], [10, 10])
    for i in range(2):
        np.testing.assert_allclose(ws[i], (a.weights[i] + b.weights[i]) / 2, rtol=1e-15)
        np.testing.assert_allclose(bs[i], (a.biases[i] + b.biases[i]) / 2, rtol=1e-15)


def test_aggregate_weighted_closed_form():
    models = [make_model((2, 2), seed=s) for s in range(3)]
    for value, model in zip((1.0, 2.0, 3.0), models):
        model.weights[0][:] = value
        model.biases[0][:] = value
    ws, bs = aggregate_weighted(models, [1, 2, 3])
    expected = (1 / 6) * 1.0 + (2 / 6) * 2.0 + (3 / 6) * 3.0  # 14/6
    assert np.array_equal(ws[0], np.full((2, 2), expected))
    assert np.array_equal(bs[0], np.full(2, expected))


def test_fedavg_ledger_is_two_param_counts_per_round():
    cfg = small_cfg(method="fedavg", K=2, rounds=5)
    result = run_fedavg(cfg)
    cost = param_count(cfg.client_specs[0])
    for k in range(2):
        assert result.ledger.kind_total("weights_down", client=k) == 5 * cost
        assert result.ledger.kind_total("weights_up", client=k) == 5 * cost
        assert result.ledger.client_total(k) == 2 * 5 * cost


def test_fedavg_convex_loss_descends():
    # single linear layer + cross-entropy: convex in the parameters
    cfg = small_cfg(method="fedavg", K=3, rounds=50, widths=(2, 2), lr=0.005)
    result = run_fedavg(cfg)
    curve = result.train_loss_curve
    assert len(curve) == 51
    increases = sum(1 for a, b in zip(curve, curve[1:]) if b > a)
    assert increases <= 2  # 5% of 50 rounds
    assert curve[-1] < curve[0]


def test_fedmd_requires_public_budget():
    cfg = small_cfg(method="fedmd", rounds=3, n_public=10_000)
    with pytest.raises(ConfigError, match="n_public"):
        run_fedmd_lite(cfg)


def test_fedmd_single_client_consensus_is_own_logits():
    # with one participant the per-instance consensus is the client's own
    # logits, so the matching loss is exactly zero at emission time
    model = make_model((2, 4, 2), seed=8)
    xs = np.array([[0.2, -0.4], [1.0, 0.5], [-0.3, 0.9]])
    (trace,), consensus = public_consensus([model], xs)
    assert np.array_equal(consensus, trace.logits)
    losses, grads = logit_loss(trace.logits, consensus)
    assert np.array_equal(losses, np.zeros(3)) and np.array_equal(grads, np.zeros((3, 2)))

    cfg = small_cfg(method="fedmd", K=1, rounds=4, n_public=3)
    result = run_fedmd_lite(cfg)
    assert result.per_client_rounds == [4]
    assert result.rows[-1].comm_total == 4 * comm_cost(
        "fedmd", class_count=2, input_dim=2, n_public=3
    )


def test_fedmd_consensus_is_brute_force_mean_over_clients():
    models = [make_model((2, 4, 2), seed=s) for s in (1, 2, 3)]
    xs = np.array([[0.1, 0.3], [-0.5, 0.8]])
    traces, consensus = public_consensus(models, xs)
    brute = np.zeros((2, 2))
    for m in models:
        brute += forward(m, xs).logits
    brute /= len(models)
    np.testing.assert_allclose(consensus, brute, atol=1e-12)
    assert all(not t.train_mode for t in traces)


def test_fedmd_ledger_matches_published_mnist_row():
    cfg = small_cfg(
        method="fedmd",
        K=2,
        rounds=3,
        C=10,
        dim=784,
        widths=(784, 16, 10),
        n_public=10,
        dataset=DatasetConfig(kind="synthetic", class_count=10, input_dim=784, n_per_class=40),
    )
    result = run_fedmd_lite(cfg)
    for k in range(2):
        per_round = result.ledger.kind_total("public_fetch", client=k) + result.ledger.kind_total(
            "logits_up", client=k
        )
        assert per_round == 3 * 7940


def test_evaluate_constant_and_perfect_models():
    # a model that always answers class 0 scores exactly the class-0 share
    C = 10
    xs = np.vstack([np.eye(C)] * 3)
    ys = np.tile(np.arange(C), 3)
    test = Dataset(xs, ys, C)
    constant = make_model((C, C))
    constant.weights[0][:] = 0.0
    constant.biases[0][:] = np.eye(C)[0]
    accs = evaluate([constant], test)
    assert accs[0] == 0.1

    perfect = make_model((C, C))
    perfect.weights[0][:] = np.eye(C)
    perfect.biases[0][:] = 0.0
    three = Dataset(np.eye(C)[:3], np.arange(3), C)
    assert evaluate([perfect], three)[0] == 1.0


def test_evaluate_matches_manual_recount():
    cfg = small_cfg(rounds=10, seed=42)
    result = run_fedhe(cfg)
    model = result.clients[0].model
    test = result.test
    manual = sum(
        int(predict(forward(model, test.xs[i])) == test.ys[i]) for i in range(len(test))
    ) / len(test)
    assert evaluate([model], test)[0] == manual


def test_prepare_data_holds_out_public_split_for_fedmd():
    cfg = small_cfg(method="fedmd", rounds=2)
    partition, test, public = prepare_data(cfg)
    assert public is not None
    total = sum(partition.sizes)
    assert len(public) == (total + len(public)) // 10
    cfg2 = small_cfg(method="fedhe", rounds=2)
    _, _, no_public = prepare_data(cfg2)
    assert no_public is None


def test_tabulated_costs_per_method():
    assert tabulated_cost(small_cfg(method="fedhe", C=2)) == 6
    assert tabulated_cost(small_cfg(method="private")) == 0
    cfg = small_cfg(method="fedavg", widths=(2, 2))
    assert tabulated_cost(cfg) == param_count(ModelSpec((2, 2)))
    assert tabulated_cost(small_cfg(method="fedmd", n_public=5)) == 5 * (2 + 2)


def test_metrics_csv_shape():
    result = run_fedhe(small_cfg(K=2, rounds=6))
    text = metrics_to_csv(result.rows, 2)
    lines = text.strip().split("\n")
    header = lines[0].split(",")
    assert header == [
        "time", "round", "acc_0", "acc_1", "mean_acc",
        "loss_0", "loss_1", "comm_0", "comm_1", "comm_total",
    ]
    assert all(len(line.split(",")) == len(header) for line in lines[1:])
