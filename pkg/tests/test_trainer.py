import json
import math

import numpy as np
import pytest

from gqe.core.errors import LabelError, PoolExhaustedError, UsageError
from gqe.models.aggregator import EncoderConfig
from gqe.models.store import SynthSpec
from gqe.models.training import TrainConfig, TrainingTuple
from gqe.services.aggregator_service import aggregate_backward, aggregate_batch, init_model
from gqe.services.embed_store_service import build_store, generate_queries
from gqe.services.hierarchy_service import backward_expansion, expand_naive, forward_expansion
from gqe.services.knn_graph_service import build_graph
from gqe.services.trainer_service import contrastive_loss, loss_gradients, mine_negatives, train


def tensor(params, name):
    return params.positional if name == "positional" else params.encoder_weights[name]


def random_tuple(store, rng, negatives=3):
    q = int(rng.integers(store.count))
    label = store.label_of(q)
    same = [i for i in range(store.count) if store.labels[i] == label and i != q]
    other = [i for i in range(store.count) if store.labels[i] != label]
    return TrainingTuple(
        q=q, p=int(rng.choice(same)), negatives=[int(i) for i in rng.choice(other, negatives, replace=False)]
    )


class TestContrastiveLoss:
    def test_identical_positive(self):
        v = np.array([0.6, 0.8])
        assert contrastive_loss(v, v, True, 0.71) == 0.0

    def test_positive_is_squared_distance(self):
        assert contrastive_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]), True, 0.71) == pytest.approx(2.0)

    def test_negative_beyond_margin(self):
        assert contrastive_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]), False, 0.71) == 0.0

    def test_negative_inside_margin(self):
        loss = contrastive_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]), False, 1.5)
        assert loss == pytest.approx((1.5 - math.sqrt(2)) ** 2)
        assert loss == pytest.approx(0.00736, abs=1e-5)

    def test_non_negative(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = rng.standard_normal((2, 6))
            a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
            margin = float(rng.uniform(0.1, 1.9))
            assert contrastive_loss(a, b, True, margin) >= 0
            assert contrastive_loss(a, b, False, margin) >= 0


class TestMineNegatives:
    @pytest.fixture
    def setup(self, make_clustered, make_model):
        store = make_clustered(clusters=3, per_cluster=10, dim=8, sigma=0.3, seed=2)
        return make_model(8, 3, 2, seed=1), store, build_graph(store, 3)

    def test_single_candidate(self, setup):
        model, store, graph = setup
        wrong = next(i for i in range(store.count) if store.labels[i] != store.labels[0])
        assert mine_negatives(model, 0, [wrong], 1, store, graph) == [wrong]

    def test_same_label_items_are_skipped(self, setup):
        model, store, graph = setup
        same = [i for i in range(store.count) if store.labels[i] == store.labels[0]]
        wrong = next(i for i in range(store.count) if store.labels[i] != store.labels[0])
        assert mine_negatives(model, 0, same + [wrong], 1, store, graph) == [wrong]

    def test_matches_brute_force_ranking(self, setup):
        model, store, graph = setup
        pool = list(range(0, store.count, 3))
        for q in (0, 11, 25):
            qe = expand_naive(model, store.vectors[q], graph, store, query_ids=graph.ids[q, :3])[0]
            candidates = [i for i in pool if store.labels[i] != store.labels[q]]
            expected = sorted(candidates, key=lambda i: (-float(store.vectors[i].astype(np.float64) @ qe), i))[:4]
            assert mine_negatives(model, q, pool, 4, store, graph) == expected

    def test_ties_go_to_the_lower_id(self, identity_model):
        rng = np.random.default_rng(3)
        matrix = rng.standard_normal((10, 4))
        matrix[8] = matrix[5]
        store = build_store(matrix, np.array([0, 0, 0, 0, 0, 1, 1, 1, 1, 1]))
        graph = build_graph(store, 2)
        assert mine_negatives(identity_model(4, 2, 1), 0, [8, 5], 1, store, graph) == [5]

    def test_pool_exhausted(self, setup):
        model, store, graph = setup
        wrong = next(i for i in range(store.count) if store.labels[i] != store.labels[0])
        with pytest.raises(PoolExhaustedError):
            mine_negatives(model, 0, [wrong], 2, store, graph)


class TestLossGradients:
    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_matches_central_differences(self, make_clustered, make_model, seed):
        store = make_clustered(clusters=4, per_cluster=10, dim=4, sigma=0.3, seed=seed)
        graph = build_graph(store, 2)
        model = make_model(4, 2, 2, seed=seed, heads=2, layers=1, ff_dim=4)
        tup = random_tuple(store, np.random.default_rng(seed))
        margin = 1.9
        _, grads = loss_gradients(model, tup, store, graph, margin)
        step = 1e-4
        for level, level_grads in enumerate(grads, start=1):
            params = model.level(level)
            for name, analytic in level_grads.items():
                values = tensor(params, name)
                for index in np.ndindex(values.shape):
                    original = values[index]
                    values[index] = original + step
                    up = loss_gradients(model, tup, store, graph, margin)[0]
                    values[index] = original - step
                    down = loss_gradients(model, tup, store, graph, margin)[0]
                    values[index] = original
                    numeric = (up - down) / (2 * step)
                    assert analytic[index] == pytest.approx(numeric, rel=1e-4, abs=1e-6), f"level{level}.{name}{index}"

    def test_every_parameter_gets_a_gradient(self, make_clustered, make_model):
        store = make_clustered(clusters=4, per_cluster=10, dim=8, seed=1)
        model = make_model(8, 3, 2)
        _, grads = loss_gradients(model, random_tuple(store, np.random.default_rng(1)), store, build_graph(store, 3), 1.0)
        for params, level_grads in zip(model.per_level_params, grads):
            assert level_grads.keys() == dict(params.named_tensors()).keys()
            for name, t in params.named_tensors():
                assert level_grads[name].shape == t.shape

    def test_zero_upstream_gives_zero_gradients(self, make_clustered, make_model):
        store = make_clustered(clusters=4, per_cluster=10, dim=8, seed=1)
        graph = build_graph(store, 3)
        model = make_model(8, 3, 2)
        record = forward_expansion(model, store.vectors[4], graph, store, query_ids=graph.ids[4, :3], keep_cache=True)
        for level_grads in backward_expansion(model, record, np.zeros(8)):
            for grad in level_grads.values():
                assert not np.any(grad)

    def test_shared_level_accumulates_every_application(self, make_clustered, make_model):
        store = make_clustered(clusters=4, per_cluster=10, dim=8, seed=5)
        graph = build_graph(store, 3)
        model = make_model(8, 3, 2, seed=5)
        record = forward_expansion(model, store.vectors[7], graph, store, query_ids=graph.ids[7, :3], keep_cache=True)
        dqe = np.random.default_rng(5).standard_normal(8)
        grads = backward_expansion(model, record, dqe)

        dx, top = aggregate_backward(model.level(2), record.caches[1], dqe[None])
        upstream = np.zeros_like(record.embeddings[1])
        upstream[record.node_idx[1][0]] += dx[0, 0]
        for col, pos in enumerate(record.neighbor_idx[1][0], start=1):
            upstream[pos] += dx[0, col]

        prev = record.embeddings[0]
        applications = len(record.sets.at(1))
        assert applications > 1
        manual = {}
        for row in range(applications):
            node = prev[record.node_idx[0][row]][None]
            neighbors = prev[record.neighbor_idx[0][row]][None]
            cache = aggregate_batch(model.level(1), node, neighbors, keep_cache=True)[3]
            for name, grad in aggregate_backward(model.level(1), cache, upstream[row][None])[1].items():
                manual[name] = manual.get(name, 0.0) + grad
        for name, grad in manual.items():
            np.testing.assert_allclose(grads[0][name], grad, atol=1e-12)
        for name, grad in top.items():
            np.testing.assert_allclose(grads[1][name], grad, atol=1e-12)

    def test_positive_with_another_label(self, make_clustered, make_model):
        store = make_clustered(clusters=2, per_cluster=5, dim=8)
        with pytest.raises(LabelError):
            loss_gradients(make_model(8, 3, 1), TrainingTuple(q=0, p=6, negatives=[7]), store, build_graph(store, 3), 0.7)

    def test_negative_with_the_same_label(self, make_clustered, make_model):
        store = make_clustered(clusters=2, per_cluster=5, dim=8)
        with pytest.raises(LabelError):
            loss_gradients(make_model(8, 3, 1), TrainingTuple(q=0, p=1, negatives=[2]), store, build_graph(store, 3), 0.7)


def tiny_model(dim=8, k=3, levels=2, seed=0):
    return init_model(EncoderConfig(dim=dim, heads=2, layers=1, ff_dim=16), k, levels, seed=seed)


class TestTrain:
    @pytest.fixture
    def data(self, make_clustered):
        store = make_clustered(clusters=4, per_cluster=8, dim=8, sigma=0.3, seed=1)
        return store, build_graph(store, 3)

    def config(self, **kwargs):
        values = dict(epochs=2, batch_size=8, pool_size=20, pool_refresh_interval=2, negatives_per_positive=3)
        values.update(kwargs)
        return TrainConfig(**values)

    def test_zero_learning_rate_keeps_parameters(self, data):
        store, graph = data
        model = tiny_model()
        trained, result = train(model, store, graph, self.config(learning_rate=0.0))
        assert trained == model
        assert [r.epoch for r in result.history] == [1, 2]

    def test_input_model_is_not_modified(self, data):
        store, graph = data
        model = tiny_model()
        before = model.copy_deep()
        train(model, store, graph, self.config(learning_rate=1e-2))
        assert model == before

    def test_same_seed_same_run(self, data):
        store, graph = data
        first, a = train(tiny_model(), store, graph, self.config(learning_rate=1e-2))
        second, b = train(tiny_model(), store, graph, self.config(learning_rate=1e-2))
        assert a.history == b.history
        assert first == second

    def test_thread_count_does_not_change_the_run(self, data):
        store, graph = data
        one, a = train(tiny_model(), store, graph, self.config(learning_rate=1e-2), threads=1)
        four, b = train(tiny_model(), store, graph, self.config(learning_rate=1e-2), threads=4)
        assert a.history == b.history
        assert one == four

    def test_parameters_stay_on_the_float32_grid(self, data):
        store, graph = data
        trained, _ = train(tiny_model(), store, graph, self.config(learning_rate=1e-2, epochs=1))
        for params in trained.per_level_params:
            for _, t in params.named_tensors():
                np.testing.assert_array_equal(t, t.astype(np.float32).astype(np.float64))

    def test_validation_selects_the_best_epoch(self, data):
        store, graph = data
        validation = generate_queries(SynthSpec(clusters=4, points_per_cluster=8, dim=8, noise_sigma=0.3, seed=1), 2)
        _, result = train(tiny_model(), store, graph, self.config(learning_rate=1e-2, epochs=3), validation)
        maps = [r.validation_map for r in result.history]
        assert all(m is not None for m in maps)
        assert result.best_epoch == 1 + maps.index(max(maps))

    def test_history_file(self, tmp_path, data):
        store, graph = data
        path = tmp_path / "history.jsonl"
        path.write_text("stale\n")
        _, result = train(tiny_model(), store, graph, self.config(), history_path=path)
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert [r["epoch"] for r in rows] == [1, 2]
        assert rows[0]["mean_loss"] == result.history[0].mean_loss

    def test_unlabelled_store(self, make_store):
        store = make_store(20, 8)
        with pytest.raises(LabelError):
            train(tiny_model(), store, build_graph(store, 3), self.config())

    def test_single_label(self, make_store):
        store = build_store(make_store(10, 8).vectors, np.zeros(10, dtype=np.int64))
        with pytest.raises(LabelError):
            train(tiny_model(), store, build_graph(store, 3), self.config())

    def test_pool_too_small(self, data):
        store, graph = data
        with pytest.raises(PoolExhaustedError):
            train(tiny_model(), store, graph, self.config(pool_size=1))

    def test_more_negatives_than_items(self, make_clustered):
        store = make_clustered(clusters=2, per_cluster=3, dim=8)
        with pytest.raises(UsageError):
            train(tiny_model(), store, build_graph(store, 3), self.config(negatives_per_positive=6))

    @pytest.mark.slow
    def test_loss_decreases(self, make_clustered):
        store = make_clustered(clusters=8, per_cluster=20, dim=16, sigma=0.3, seed=4)
        graph = build_graph(store, 5)
        model = tiny_model(dim=16, k=5, levels=2, seed=4)
        config = TrainConfig(epochs=5, batch_size=16, learning_rate=5e-3, pool_size=80, pool_refresh_interval=5, seed=4)
        _, result = train(model, store, graph, config)
        assert result.history[-1].mean_loss < result.history[0].mean_loss
