import numpy as np
import pytest

from qhelearn.errors import DomainError, ProtocolError, ValidationError
from qhelearn.federation import (
    DPConfig,
    FedConfig,
    batch_gradient,
    check_vault_isolation,
    dp_sanitize,
    generate_schedule,
    make_clients,
    run_federated,
)
from qhelearn.learner import (
    LabeledSample,
    TrainConfig,
    VariationalModel,
    make_parties,
    mse_cost,
    plaintext_cost_and_gradient,
    toy_dataset,
    train_delegated,
    train_plaintext,
    write_history_csv,
)
from qhelearn.protocol import account_by_session
from qhelearn.session import upload_params
from qhelearn.simulator import random_state


def ry_model(theta):
    return VariationalModel(1, 1, [theta], rotations=("RY",))


def split(data, sizes):
    out, start = [], 0
    for s in sizes:
        out.append(data[start : start + s])
        start += s
    return out


class TestSchedule:
    def test_single_client(self, rng):
        assert not np.any(generate_schedule(50, 1, rng))

    def test_reproducible(self):
        a = generate_schedule(20, 5, np.random.default_rng(1))
        b = generate_schedule(20, 5, np.random.default_rng(1))
        np.testing.assert_array_equal(a, b)

    def test_uniform_frequencies(self):
        counts = np.bincount(generate_schedule(10_000, 4, np.random.default_rng(2)), minlength=4)
        assert np.all(np.abs(counts / 10_000 - 0.25) < 0.05)

    def test_no_clients(self, rng):
        with pytest.raises(DomainError):
            generate_schedule(5, 0, rng)


class TestDpSanitize:
    def test_small_gradient_unchanged(self, rng):
        g = np.array([0.3, -0.4])
        np.testing.assert_array_equal(dp_sanitize(g, 1.0, 0.0, rng), g)

    def test_clip_to_norm(self, rng):
        g = np.array([3.0, 4.0]) * 0.4  # norm 2
        assert np.linalg.norm(dp_sanitize(g, 1.0, 0.0, rng)) == pytest.approx(1.0)

    def test_noise_moment(self):
        rng = np.random.default_rng(4)
        draws = np.array([dp_sanitize(np.zeros(3), 1.0, 0.1, rng) for _ in range(10_000)])
        assert np.all(np.abs(draws.std(axis=0) - 0.1) < 0.005)

    def test_idempotent_on_clipped(self, rng):
        g = dp_sanitize(np.array([5.0, -2.0, 1.0]), 1.5, 0.0, rng)
        np.testing.assert_allclose(dp_sanitize(g, 1.5, 0.0, rng), g)

    @pytest.mark.parametrize("C", [0.0, -1.0])
    def test_bad_clip(self, rng, C):
        with pytest.raises(DomainError):
            dp_sanitize(np.ones(2), C, 0.0, rng)

    def test_config_checks(self):
        with pytest.raises(ValidationError):
            DPConfig(clip=0.0)


class TestRounds:
    def test_zero_rounds_rejected(self):
        with pytest.raises(ValidationError):
            FedConfig(M=1, T=0, batch=1)

    def test_one_round(self):
        res = run_federated([toy_dataset(2, np.random.default_rng(0))], ry_model(1.0), FedConfig(1, 1, 2, lr=0.1))
        assert len(res.history) == 1

    def test_batch_too_large(self):
        with pytest.raises(ValidationError):
            run_federated([toy_dataset(2, np.random.default_rng(0))], ry_model(1.0), FedConfig(1, 1, 3))

    def test_reduction_to_single_client_training(self, rng):
        model = VariationalModel.random(2, 1, rng)
        data = [LabeledSample(random_state(2, rng), int(rng.choice([-1, 1])), i) for i in range(4)]
        steps = 6
        fed = run_federated([data], model, FedConfig(1, steps, len(data), lr=0.15, seed=9))
        single = train_delegated(data, TrainConfig(lr=0.15, max_iter=steps, seed=9), model)
        plain = train_plaintext(data, TrainConfig(lr=0.15, max_iter=steps), model)
        theta = model.theta
        for i, th in enumerate(fed.thetas):
            theta = theta - 0.15 * plaintext_cost_and_gradient(model.with_theta(theta), data)[1]
            np.testing.assert_allclose(th, theta, atol=1e-9)
        np.testing.assert_allclose(fed.model.theta, single.theta, atol=1e-9)
        np.testing.assert_allclose(fed.model.theta, plain.theta, atol=1e-9)

    def test_batch_of_one_is_single_sample_gradient(self, rng):
        model = VariationalModel.random(2, 1, rng)
        data = [LabeledSample(random_state(2, rng), 1, i) for i in range(3)]
        nodes, server_seq = make_clients([data], 0)
        client = nodes[0].client
        _, server = make_parties(model, 0, transcript=client.transcript)
        upload_params(client, server, model.theta)
        cfg = FedConfig(1, 1, 1)
        _, g = batch_gradient(nodes[0], server, [2], cfg, 0)
        np.testing.assert_allclose(g, plaintext_cost_and_gradient(model, [data[2]])[1], atol=1e-10)

    def test_weighted_mean_extension(self, rng):
        model = VariationalModel.random(1, 1, rng)
        data = toy_dataset(2, rng, jitter=0.3)
        nodes, _ = make_clients([data], 0)
        nodes[0].weights = np.array([1.0, 0.0])
        client = nodes[0].client
        _, server = make_parties(model, 0, transcript=client.transcript)
        upload_params(client, server, model.theta)
        _, g = batch_gradient(nodes[0], server, [0, 1], FedConfig(1, 1, 2), 0)
        np.testing.assert_allclose(g, plaintext_cost_and_gradient(model, [data[0]])[1], atol=1e-10)

    def test_per_round_communication(self):
        data = split(toy_dataset(9, np.random.default_rng(1)), [3, 3, 3])
        res = run_federated(data, ry_model(1.0), FedConfig(3, 5, 2, lr=0.1, seed=2))
        sessions = account_by_session(res.transcript)
        evals = [s for s in sessions if s.startswith("s")]
        uploads = [s for s in sessions if s.startswith("u")]
        assert len(evals) == 5 * 2 and len(uploads) == 5 + 1
        assert all(h.rounds == 2 for h in res.history)

    def test_vault_isolation(self):
        data = split(toy_dataset(6, np.random.default_rng(1)), [2, 2, 2])
        res = run_federated(data, ry_model(1.0), FedConfig(3, 6, 1, seed=3))
        vaults = {m.vault for m in res.transcript.messages}
        assert len(vaults) == len(set(res.schedule.tolist()) | {0})
        for sid in {m.session for m in res.transcript.messages}:
            assert len({m.vault for m in res.transcript.session(sid)}) == 1

    def test_isolation_checker_flags_foreign_vault(self):
        nodes, _ = make_clients([toy_dataset(2, np.random.default_rng(0))], 0)
        tr = nodes[0].client.transcript
        tr.send("c2s", "EvalRequest", session="x", vault="deadbeefdeadbeef")
        with pytest.raises(ProtocolError):
            check_vault_isolation(tr, nodes)

    def test_deterministic(self, tmp_path):
        data = split(toy_dataset(8, np.random.default_rng(5), jitter=0.3), [4, 4])
        cfg = FedConfig(2, 15, 2, lr=0.2, dp=DPConfig(1.0, 0.0), seed=21)
        a = run_federated(data, ry_model(2.0), cfg)
        b = run_federated(data, ry_model(2.0), cfg)
        write_history_csv(a.history, tmp_path / "a.csv")
        write_history_csv(b.history, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert a.transcript.to_jsonl() == b.transcript.to_jsonl()
        np.testing.assert_array_equal(np.array(a.thetas), np.array(b.thetas))

    def test_dp_noise_changes_trajectory(self):
        data = [toy_dataset(4, np.random.default_rng(5))]
        clean = run_federated(data, ry_model(2.0), FedConfig(1, 5, 2, lr=0.2, seed=1))
        noisy = run_federated(data, ry_model(2.0), FedConfig(1, 5, 2, lr=0.2, dp=DPConfig(1.0, 0.5), seed=1))
        assert not np.allclose(clean.model.theta, noisy.model.theta)


class TestPooledOracle:
    def test_two_clients_match_pooled_run(self, rng):
        pooled = toy_dataset(8, rng, jitter=0.4)
        halves = [pooled[:4], pooled[4:]]
        T = 40
        model = ry_model(2.3)
        fed = run_federated(halves, model, FedConfig(2, T, 4, lr=0.2, seed=1), schedule=[i % 2 for i in range(T)])
        single = train_plaintext(pooled, TrainConfig(lr=0.2, max_iter=T), model)
        fed_cost = mse_cost(fed.model, pooled)
        single_cost = mse_cost(model.with_theta(single.theta), pooled)
        assert abs(fed_cost - single_cost) <= 0.1 * single_cost + 1e-3

    def test_toy_federation_accuracy(self):
        rng = np.random.default_rng(12)
        pooled = toy_dataset(12, rng, jitter=0.3)
        holdout = toy_dataset(20, rng, jitter=0.3, start_index=12)
        res = run_federated(
            split(pooled, [4, 4, 4]), ry_model(2.8), FedConfig(3, 300, 2, lr=0.2, seed=7), holdout=holdout
        )
        assert max(h.holdout_accuracy for h in res.history) >= 0.9
        assert res.history[-1].holdout_accuracy >= 0.9

    def test_schedule_override_validated(self):
        with pytest.raises(ValidationError):
            run_federated([toy_dataset(2, np.random.default_rng(0))], ry_model(1.0), FedConfig(1, 3, 1), schedule=[0, 1, 0])
