import itertools
import math

import numpy as np
import pytest
from pydantic import ValidationError

from gqe.core.errors import DimensionError, LabelError, UsageError, ZeroWeightError
from gqe.models.evaluation import MethodSpec
from gqe.models.hierarchy import WeightAttribution
from gqe.models.qe import QEMethod
from gqe.models.store import SynthSpec
from gqe.services.embed_store_service import build_store, generate_queries, generate_synthetic
from gqe.services.eval_service import (
    agreement,
    attribute_query,
    average_precision,
    diversity,
    evaluate,
    expand_query,
    load_relevance,
    rank,
    select_dba,
    sweep,
)
from gqe.services.hierarchy_service import run_dba
from gqe.services.knn_graph_service import build_graph


def oracle_ap(ranking, relevant):
    """Each relevant item contributes (relevant items at or above it) / (its rank)."""
    position = {int(idx): r for r, idx in enumerate(ranking, start=1)}
    total = 0.0
    for item in relevant:
        if item in position:
            above = sum(1 for other in relevant if other in position and position[other] <= position[item])
            total += above / position[item]
    return total / len(relevant)


def labelled_attr(weights, query_weight=0.5):
    return WeightAttribution(query_weight=query_weight, weights=dict(enumerate(weights)))


class TestAveragePrecision:
    def test_ranks_one_and_three(self):
        assert average_precision([7, 2, 9, 4], {7, 9}) == pytest.approx(0.8333333333, abs=1e-9)

    def test_single_item_at_rank_four(self):
        assert average_precision([1, 2, 3, 4, 5], {4}) == 0.25

    def test_perfect_ranking(self):
        assert average_precision([3, 1, 0, 2], {3, 1}) == 1.0

    def test_no_relevant_items(self):
        with pytest.raises(LabelError):
            average_precision([0, 1, 2], set())

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(0)
        for size in range(1, 21):
            ranking = rng.permutation(size)
            for _ in range(5):
                relevant = {int(i) for i in rng.choice(size, size=int(rng.integers(1, size + 1)), replace=False)}
                assert average_precision(ranking, relevant) == pytest.approx(oracle_ap(ranking, relevant), abs=1e-12)

    def test_every_subset_of_a_short_ranking(self):
        ranking = [4, 0, 3, 1, 2]
        for n in range(1, 6):
            for subset in itertools.combinations(range(5), n):
                ap = average_precision(ranking, set(subset))
                assert 0.0 <= ap <= 1.0
                assert ap == pytest.approx(oracle_ap(ranking, set(subset)), abs=1e-12)


class TestRank:
    def test_ties_by_ascending_id(self):
        matrix = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        result = rank(build_store(matrix), np.array([1.0, 0.0]))
        assert result.ids.tolist() == [1, 3, 0, 2]
        assert result.depth == 4

    def test_dimension_mismatch(self, make_store):
        with pytest.raises(DimensionError):
            rank(make_store(5, 4), np.ones(3))


class TestEvaluate:
    @pytest.fixture
    def data(self, make_clustered):
        db = make_clustered(clusters=4, per_cluster=15, dim=8, sigma=0.4, seed=3)
        rows = [0, 16, 33, 47, 59]
        queries = build_store(db.vectors[rows], db.labels[rows], normalize=False)
        return db, queries

    def test_no_expansion_matches_brute_force(self, data):
        db, queries = data
        report = evaluate(MethodSpec(), queries, db)
        expected = []
        for idx in range(queries.count):
            q = queries.vectors[idx].astype(np.float64)
            sims = [float(db.vectors[i].astype(np.float64) @ q) for i in range(db.count)]
            ranking = sorted(range(db.count), key=lambda i: (-sims[i], i))
            relevant = {i for i in range(db.count) if db.labels[i] == queries.labels[idx]}
            expected.append(oracle_ap(ranking, relevant))
        assert [q.id for q in report.per_query] == list(range(queries.count))
        for got, want in zip(report.per_query, expected):
            assert got.ap == pytest.approx(want, abs=1e-12)
        assert report.map == pytest.approx(sum(expected) / len(expected), abs=1e-12)
        assert report.method == "none" and report.params == {}

    def test_same_inputs_same_report(self, data):
        db, queries = data
        spec = MethodSpec(method=QEMethod.AQE, k=5)
        assert evaluate(spec, queries, db) == evaluate(spec, queries, db, threads=3)

    def test_aqe_params(self, data):
        db, queries = data
        report = evaluate(MethodSpec(method=QEMethod.ALPHAQE, k=4, alpha=3.0), queries, db)
        assert report.params == {"k": 4, "alpha": 3.0}

    def test_gqe_fast_and_naive_agree(self, data, make_model):
        db, queries = data
        graph = build_graph(db, 3)
        model = make_model(8, 3, 2, seed=2)
        naive = evaluate(MethodSpec(method=QEMethod.GQE), queries, db, graph, model)
        fast = evaluate(MethodSpec(method=QEMethod.GQE, fast=True), queries, db, graph, model)
        assert fast.map == pytest.approx(naive.map, abs=1e-6)
        assert naive.params == {"fast": False, "collapsed": False, "k": 3, "levels": 2}

    def test_gqe_without_model(self, data):
        db, queries = data
        with pytest.raises(UsageError):
            evaluate(MethodSpec(method=QEMethod.GQE), queries, db, build_graph(db, 3))

    def test_augmented_database(self, data, identity_model):
        db, queries = data
        graph = build_graph(db, 4)
        augmented = run_dba(identity_model(8, 4, 1), graph, db, 0.5, 0.5, 4)
        report = evaluate(MethodSpec(method=QEMethod.AQE, k=3), queries, db, graph, dba_store=augmented)
        assert report.params == {"k": 3, "dba": True}
        direct = evaluate(MethodSpec(method=QEMethod.AQE, k=3), queries, augmented)
        assert report.map == direct.map

    def test_augmented_database_shape(self, data, make_store):
        db, queries = data
        with pytest.raises(DimensionError):
            evaluate(MethodSpec(), queries, db, dba_store=make_store(10, 8))

    def test_unlabelled_without_relevance(self, make_store):
        store = make_store(10, 4)
        with pytest.raises(LabelError):
            evaluate(MethodSpec(), store, store)

    def test_relevance_file(self, tmp_path, make_store):
        db = make_store(10, 4, seed=1)
        queries = build_store(db.vectors[[2, 5]], normalize=False)
        path = tmp_path / "relevance.txt"
        path.write_text("2 7\n5\n")
        relevance = load_relevance(path, queries.count)
        assert relevance == [{2, 7}, {5}]
        report = evaluate(MethodSpec(), queries, db, relevance=relevance)
        assert report.per_query[1].ap == 1.0

    def test_relevance_file_line_count(self, tmp_path):
        path = tmp_path / "relevance.txt"
        path.write_text("1 2\n")
        with pytest.raises(LabelError):
            load_relevance(path, 2)

    def test_relevance_file_bad_token(self, tmp_path):
        path = tmp_path / "relevance.txt"
        path.write_text("1 x\n")
        with pytest.raises(LabelError):
            load_relevance(path, 1)


class TestSweep:
    def test_one_report_per_k(self, make_clustered):
        db = make_clustered(clusters=3, per_cluster=10, dim=8, seed=2)
        reports = sweep(MethodSpec(method=QEMethod.AQE, k=1), [1, 5, 10], db, db)
        assert [r.params["k"] for r in reports] == [1, 5, 10]

    def test_nothing_to_sweep(self, make_clustered):
        db = make_clustered(clusters=3, per_cluster=10, dim=8, seed=2)
        with pytest.raises(UsageError):
            sweep(MethodSpec(), [1, 2], db, db)


class TestSelectDBA:
    @pytest.fixture
    def data(self, make_model):
        spec = SynthSpec(clusters=4, points_per_cluster=12, dim=8, noise_sigma=0.4, seed=5)
        db = generate_synthetic(spec)
        return db, generate_queries(spec, 3), make_model(8, 3, 2, seed=1), build_graph(db, 4)

    def test_picks_the_best_scoring_triple(self, data):
        db, queries, model, graph = data
        t1s, t2s, ks = [0.05, 1.0], [0.1, 10.0], [2, 3]
        augmented, selection = select_dba(model, graph, db, queries, t1s, t2s, ks)

        expected = {}
        for k in ks:
            for t1 in t1s:
                for t2 in t2s:
                    aug = run_dba(model, graph, db, t1, t2, k)
                    report = evaluate(MethodSpec(method=QEMethod.GQE), queries, aug, build_graph(aug, 4), model)
                    expected[(t1, t2, k)] = report.map
        assert [(t.t1, t.t2, t.k_dba) for t in selection.trials] == list(expected)
        for trial in selection.trials:
            assert trial.map == pytest.approx(expected[(trial.t1, trial.t2, trial.k_dba)], abs=1e-12)

        best_map = max(expected.values())
        winner = next(key for key, value in expected.items() if value == best_map)
        assert (selection.best.t1, selection.best.t2, selection.best.k_dba) == winner
        assert selection.best.map == pytest.approx(best_map, abs=1e-12)
        assert selection.method == "gqe"
        assert augmented == run_dba(model, graph, db, *winner)

    def test_first_triple_wins_ties(self, data, make_model):
        db, queries, _, graph = data
        # a one-level model never uses t2, so both trials score the same
        _, selection = select_dba(make_model(8, 3, 1, seed=1), graph, db, queries, [0.5], [0.3, 0.7], [3])
        assert selection.trials[0].map == selection.trials[1].map
        assert selection.best.t2 == 0.3

    def test_other_ranking_method(self, data):
        db, queries, model, graph = data
        spec = MethodSpec(method=QEMethod.AQE, k=3)
        _, selection = select_dba(model, graph, db, queries, [0.2], [0.2], [3], spec=spec)
        direct = evaluate(spec, queries, run_dba(model, graph, db, 0.2, 0.2, 3))
        assert selection.method == "aqe"
        assert selection.best.map == pytest.approx(direct.map, abs=1e-12)

    def test_empty_grid(self, data):
        db, queries, model, graph = data
        with pytest.raises(UsageError, match="grid"):
            select_dba(model, graph, db, queries, [], [0.1], [3])

    def test_invalid_temperature(self, data):
        db, queries, model, graph = data
        with pytest.raises(UsageError, match="positive"):
            select_dba(model, graph, db, queries, [0.0], [0.1], [3])


class TestMethodSpec:
    def test_classic_needs_k(self):
        with pytest.raises(ValidationError):
            MethodSpec(method=QEMethod.AQE, k=0)

    def test_alpha_required(self):
        with pytest.raises(ValidationError):
            MethodSpec(method=QEMethod.ALPHAQE, k=3)

    def test_alpha_rejected_elsewhere(self):
        with pytest.raises(ValidationError):
            MethodSpec(method=QEMethod.AQE, k=3, alpha=2.0)

    def test_fast_only_for_gqe(self):
        with pytest.raises(ValidationError):
            MethodSpec(method=QEMethod.AQE, k=3, fast=True)


class TestExpandQuery:
    def test_none_returns_the_query(self, make_store):
        store = make_store(10, 4)
        q = store.vectors[1].astype(np.float64)
        np.testing.assert_array_equal(expand_query(MethodSpec(), q, store), q)

    def test_hierarchical_needs_a_graph(self, make_store):
        store = make_store(10, 4)
        with pytest.raises(UsageError):
            expand_query(MethodSpec(method=QEMethod.AQE_G, k=2), store.vectors[0], store)

    def test_no_attribution_without_expansion(self, make_store):
        store = make_store(10, 4)
        with pytest.raises(UsageError):
            attribute_query(MethodSpec(), store.vectors[0], store)


class TestAgreement:
    labels = np.array([1, 1, 0])

    def test_mixed_weights(self):
        assert agreement(labelled_attr([0.6, 0.2, 0.2]), self.labels, 1) == pytest.approx(0.8, abs=1e-6)

    def test_all_same_label(self):
        assert agreement(labelled_attr([0.6, 0.2]), self.labels, 1) == 1.0

    def test_no_same_label(self):
        assert agreement(labelled_attr([0.6, 0.2, 0.2]), self.labels, 2) == 0.0

    def test_query_weight_is_excluded(self):
        a = agreement(labelled_attr([0.6, 0.2, 0.2], query_weight=0.1), self.labels, 1)
        b = agreement(labelled_attr([0.6, 0.2, 0.2], query_weight=9.0), self.labels, 1)
        assert a == b

    def test_rescaling_invariance(self):
        a = agreement(labelled_attr([0.6, 0.2, 0.2]), self.labels, 1)
        assert agreement(labelled_attr([6.0, 2.0, 2.0]), self.labels, 1) == pytest.approx(a, abs=1e-12)

    def test_negative_weights_are_clamped(self):
        assert agreement(labelled_attr([0.6, -0.3, 0.2]), np.array([1, 0, 0]), 1) == pytest.approx(0.75)

    def test_left_out_item_does_not_count(self):
        attr = labelled_attr([0.6, 0.2, 0.2]).without(0)
        assert 0 not in attr.weights and attr.query_weight == 0.5
        assert agreement(attr, self.labels, 1) == pytest.approx(0.5, abs=1e-12)

    def test_zero_total_weight(self):
        with pytest.raises(ZeroWeightError):
            agreement(labelled_attr([0.0, -0.1]), self.labels, 1)


class TestDiversity:
    def test_point_mass(self):
        assert diversity(labelled_attr([0.6, 0.0, 0.4]), np.array([1, 1, 0]), 1) == 0.0

    def test_two_equal_weights(self):
        assert diversity(labelled_attr([0.3, 0.3, 0.4]), np.array([1, 1, 0]), 1) == pytest.approx(math.log(2), abs=1e-6)

    def test_three_weights(self):
        value = diversity(labelled_attr([0.6, 0.2, 0.2]), np.array([1, 1, 1]), 1)
        assert value == pytest.approx(0.9503, abs=1e-4)
        assert value == pytest.approx(-(0.6 * math.log(0.6) + 0.4 * math.log(0.2)), abs=1e-12)

    def test_other_labels_do_not_count(self):
        a = diversity(labelled_attr([0.6, 0.2, 0.2, 5.0]), np.array([1, 1, 1, 0]), 1)
        b = diversity(labelled_attr([0.6, 0.2, 0.2]), np.array([1, 1, 1]), 1)
        assert a == pytest.approx(b, abs=1e-12)

    def test_no_same_label_weight(self):
        with pytest.raises(ZeroWeightError):
            diversity(labelled_attr([0.6, 0.2]), np.array([0, 0]), 1)
