import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ifcamir import fedcore, numkit
from ifcamir.datagen import AlphaPolicy, PopulationSpec, assign_client_profiles, synthesize_population
from ifcamir.errors import InputError
from ifcamir.fedcore import (
    ClientProfile,
    ClusterSet,
    TrainSettings,
    aggregate_cluster,
    local_update,
    run_round,
    select_cluster,
    train,
)
from ifcamir.numkit import Batch, Model, ModelSpec

LIN = ModelSpec("linear-regression", 2)


def prof(alpha, tau=0.6, cid=0):
    return ClientProfile(cid, alpha, 1.0 - alpha, tau)


def small_world(n=6, seed=0, spc=20):
    spec = PopulationSpec(n, min(n, 2), 0.5, spc, "synthetic-mean-shift", (2, 3), (-3, -2), 60, seed, 30)
    pop = synthesize_population(spec)
    model_spec = ModelSpec("softmax-linear", pop.input_dim, pop.num_classes)
    return pop, model_spec


class TestSelectCluster:
    def test_pure_loss(self):
        assert select_cluster(prof(1.0), [0.4, 0.9], [0.9, 0.5]) == 0

    def test_privacy_sensitive_migrates(self):
        assert select_cluster(prof(0.2), [0.4, 0.9], [0.9, 0.5]) == 1

    def test_tie_goes_to_lowest_index(self):
        assert select_cluster(prof(0.5), [0.6, 0.6], [0.5, 0.5]) == 0

    @pytest.mark.parametrize("losses,risks", [([], []), ([0.1, np.nan], [0.5, 0.5]), ([0.1], [0.5, 0.5]), ([np.inf], [0.5])])
    def test_bad_inputs(self, losses, risks):
        with pytest.raises(InputError):
            select_cluster(prof(0.5), losses, risks)

    @given(
        alpha=st.floats(0, 1),
        losses=st.lists(st.floats(0, 10), min_size=1, max_size=5),
        data=st.data(),
    )
    def test_scale_invariance(self, alpha, losses, data):
        risks = data.draw(st.lists(st.floats(0, 1), min_size=len(losses), max_size=len(losses)))
        p = prof(alpha)
        scores = alpha * np.array(losses) + (1 - alpha) * np.array(risks)
        choice = select_cluster(p, losses, risks)
        assert scores[choice] == scores.min()
        assert choice == int(np.flatnonzero(scores == scores.min())[0])

    @given(
        losses=st.lists(st.floats(0, 10), min_size=2, max_size=4),
        data=st.data(),
    )
    def test_alpha_one_ignores_risk(self, losses, data):
        risks = data.draw(st.lists(st.floats(0, 1), min_size=len(losses), max_size=len(losses)))
        assert select_cluster(prof(1.0), losses, risks) == fedcore.select_cluster_by_loss(losses)

    @given(a1=st.floats(0, 1), a2=st.floats(0, 1), l0=st.floats(0, 5), l1=st.floats(0, 5), gap=st.floats(0.01, 0.5))
    def test_lower_alpha_never_moves_toward_riskier(self, a1, a2, l0, l1, gap):
        lo_alpha, hi_alpha = sorted((a1, a2))
        risks = [0.5 + gap, 0.5]  # cluster 0 riskier
        if select_cluster(prof(hi_alpha), [l0, l1], risks) == 1:
            assert select_cluster(prof(lo_alpha), [l0, l1], risks) == 1


class TestProfileValidation:
    @pytest.mark.parametrize("alpha,beta,tau", [(0.5, 0.4, 0.6), (1.2, -0.2, 0.6), (0.5, 0.5, 0.4), (0.5, 0.5, 1.1)])
    def test_rejects(self, alpha, beta, tau):
        with pytest.raises(InputError):
            ClientProfile(0, alpha, beta, tau)

    def test_cluster_set_validation(self):
        m = numkit.zeros_model(LIN)
        with pytest.raises(InputError):
            ClusterSet([m], [0.5, 0.5])
        with pytest.raises(InputError):
            ClusterSet([m], [1.5])


class TestLocalUpdateAndAggregate:
    def test_zero_gradient_keeps_model(self):
        m = Model(LIN, [1.0, 2.0])
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        batch = Batch(x, x @ m.params)
        assert local_update(m, batch, 0.1, 1) == m

    def test_one_step_is_sgd_step(self, rng):
        m = Model(LIN, rng.normal(size=2))
        batch = Batch(rng.normal(size=(5, 2)), rng.normal(size=5))
        expected = numkit.sgd_step(m, numkit.batch_gradient(m, batch), 0.1)
        assert local_update(m, batch, 0.1, 1) == expected

    def test_two_steps_chain(self, rng):
        m = Model(LIN, rng.normal(size=2))
        batch = Batch(rng.normal(size=(5, 2)), rng.normal(size=5))
        assert local_update(m, batch, 0.1, 2) == local_update(local_update(m, batch, 0.1, 1), batch, 0.1, 1)

    def test_broadcast_model_untouched(self, rng):
        params = rng.normal(size=2)
        m = Model(LIN, params)
        local_update(m, Batch(rng.normal(size=(5, 2)), rng.normal(size=5)), 0.5, 3)
        np.testing.assert_array_equal(m.params, params)

    def test_mean(self):
        prev = ClusterSet([numkit.zeros_model(LIN)] * 2, [0.5, 0.5])
        out = aggregate_cluster(prev, [(0, Model(LIN, [1.0, 3.0])), (0, Model(LIN, [3.0, 5.0]))])
        np.testing.assert_array_equal(out[0].params, [2.0, 4.0])
        assert out[1] is prev.models[1]

    def test_single_submission_verbatim(self):
        prev = ClusterSet([numkit.zeros_model(LIN)], [0.5])
        m = Model(LIN, [0.25, -7.0])
        assert aggregate_cluster(prev, [(0, m)])[0] == m

    def test_spec_mismatch(self):
        prev = ClusterSet([numkit.zeros_model(LIN)], [0.5])
        with pytest.raises(InputError):
            aggregate_cluster(prev, [(0, numkit.zeros_model(ModelSpec("linear-regression", 3)))])

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.integers(1, 6))
    def test_idempotent(self, params, copies):
        m = Model(LIN, params)
        prev = ClusterSet([numkit.zeros_model(LIN)], [0.5])
        np.testing.assert_allclose(aggregate_cluster(prev, [(0, m)] * copies)[0].params, m.params, rtol=1e-15)


class TestRounds:
    def test_single_client_single_cluster_is_plain_sgd(self):
        pop, spec = small_world(n=1)
        client = pop.clients[0]
        settings = TrainSettings(spec, "ifca", 1, 0.3, 5, 1, 5, 1, seed=9)
        state = ClusterSet([numkit.init_model(spec, np.random.default_rng(0))], [0.5])
        new, rec = run_round(state, [client], [prof(1.0)], settings)
        batch = fedcore.client_batch(client, 5, 9, 0)
        assert new.models[0] == local_update(state.models[0], batch, 0.3, 1)
        assert rec.member_counts == (1,)

    def test_batch_size_too_large(self):
        pop, spec = small_world(n=2, spc=4)
        settings = TrainSettings(spec, "ifca", 1, 0.3, 5)
        state = fedcore.initial_clusters(spec, 2, 0)
        with pytest.raises(InputError):
            run_round(state, pop.clients, [prof(1.0, cid=i) for i in range(2)], settings)

    def test_identical_clients_pick_same_cluster(self):
        pop, spec = small_world(n=1)
        clone = pop.clients[0]
        clients = [type(clone)(i, clone.data, clone.group, clone.deformation_param) for i in range(4)]
        settings = TrainSettings(spec, "ifca-mir", 1, 0.3, 20, 1)  # batch = all data, so every clone sees the same batch
        state = fedcore.initial_clusters(spec, 3, 0)
        _, rec = run_round(state, clients, [prof(0.7, cid=i) for i in range(4)], settings)
        assert len(set(rec.assignment)) == 1
        assert sum(rec.member_counts) == 4

    def test_batches_without_replacement_and_seeded(self):
        pop, _ = small_world(n=2)
        b1 = fedcore.client_batch(pop.clients[0], 20, 3, 7)
        b2 = fedcore.client_batch(pop.clients[0], 20, 3, 7)
        np.testing.assert_array_equal(b1.features, b2.features)
        assert len({tuple(r) for r in b1.features}) == 20


class TestTrain:
    def test_zero_rounds(self):
        pop, spec = small_world()
        profiles = assign_client_profiles(6, AlphaPolicy.fixed(0.5), (0.5, 0.8), 0)
        run = train(pop.clients, profiles, pop.shadow_pool, 2, TrainSettings(spec, rounds=0))
        assert run.rounds == [] and run.final.models == run.initial.models

    def test_risk_cadence(self):
        pop, spec = small_world()
        profiles = assign_client_profiles(6, AlphaPolicy.fixed(0.5), (0.5, 0.8), 0)
        run = train(pop.clients, profiles, pop.shadow_pool, 2, TrainSettings(spec, rounds=12, eval_period=5, batch_size=10))
        assert [t.round for t in run.risk_tables] == [0, 5, 10]
        assert [r.round for r in run.rounds] == list(range(12))
        for rec in run.rounds:
            table = [t for t in run.risk_tables if t.round <= rec.round][-1]
            assert rec.risks == table.risks

    def test_conservation_and_budgets(self):
        pop, spec = small_world()
        profiles = assign_client_profiles(6, AlphaPolicy.uniform(0, 1), (0.5, 0.8), 0)
        settings = TrainSettings(spec, rounds=8, batch_size=10, local_steps=2)
        run = train(pop.clients, profiles, pop.shadow_pool, 2, settings)
        for rec in run.rounds:
            assert sum(rec.member_counts) == 6
        active = [sum(1 for r in run.rounds if r.member_counts[j]) for j in range(2)]
        assert run.step_counts == tuple(2 * a for a in active)

    @pytest.mark.parametrize("init", ["random", "farthest-first"])
    def test_alpha_one_reduces_to_ifca(self, init):
        pop, spec = small_world(n=8, seed=5)
        profiles = assign_client_profiles(8, AlphaPolicy.fixed(1.0), (0.5, 0.8), 5)
        runs = [
            train(pop.clients, profiles, pop.shadow_pool, 2, TrainSettings(spec, alg, 10, 0.3, 10, 2, seed=5, init=init))
            for alg in ("ifca", "ifca-mir")
        ]
        for a, b in zip(runs[0].rounds, runs[1].rounds):
            assert a.assignment == b.assignment
            np.testing.assert_array_equal(a.losses, b.losses)
            assert a.models == b.models

    def test_deterministic(self):
        pop, spec = small_world()
        profiles = assign_client_profiles(6, AlphaPolicy.uniform(0, 1), (0.5, 0.8), 0)
        settings = TrainSettings(spec, rounds=6, batch_size=10)
        a = train(pop.clients, profiles, pop.shadow_pool, 2, settings)
        b = train(pop.clients, profiles, pop.shadow_pool, 2, settings)
        assert a.final.models == b.final.models and a.final.risks == b.final.risks

    def test_deadline_marks_incomplete(self):
        pop, spec = small_world()
        profiles = assign_client_profiles(6, AlphaPolicy.fixed(1.0), (0.5, 0.8), 0)
        run = train(pop.clients, profiles, pop.shadow_pool, 2, TrainSettings(spec, rounds=5, batch_size=10), deadline=0.0)
        assert not run.completed and run.rounds == []

    def test_farthest_first_seeds_distinct_clients(self):
        pop, spec = small_world(n=8, seed=1)
        clusters, seeds = fedcore.farthest_first_clusters(pop.clients, spec, 2, 0.3, 3, 1)
        assert len(set(seeds)) == 2
        # the two seeds come from different groups when groups are far apart
        assert {pop.clients[i].group for i in seeds} == {0, 1}
        assert clusters.risks == (0.5, 0.5)

    def test_settings_validation(self):
        with pytest.raises(InputError):
            TrainSettings(LIN, algorithm="fedavg")
        with pytest.raises(InputError):
            TrainSettings(LIN, init="zeros")
        with pytest.raises(InputError):
            TrainSettings(LIN, learning_rate=0.0)
