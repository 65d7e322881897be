"""后验收缩诊断"""

import numpy as np
import pytest

from npkit.core.exceptions import ContextSizeError, MissingClassError, PoolingMismatchError, ShapeError
from npkit.engine.distributions import entropy, kl
from npkit.engine.graph import Graph
from npkit.engine.random import make_rng
from npkit.models.domain import PointSet
from npkit.services.classifier_service import fit_classifier
from npkit.services.diagnostics_service import (
    elimination_sequence,
    embedding_stats,
    entropy_curve,
    greedy_select,
    inception_by_size,
    inception_score,
    inception_score_from_probs,
    prediction_histogram,
)


@pytest.fixture
def classifier(digits_factory):
    train = digits_factory(100)
    return fit_classifier(train.images.reshape(100, -1), train.labels, 10, "image", seed=0,
                          hidden=16, epochs=5, lr=1e-2, progress=False)


class TestInceptionScore:
    def test_identical_predictions_score_one(self):
        probs = np.tile([0.2, 0.5, 0.3], (6, 1))
        assert inception_score_from_probs(probs) == pytest.approx(1.0)

    def test_confident_uniform_predictions_score_class_count(self):
        assert inception_score_from_probs(np.eye(10)) == pytest.approx(10.0)

    def test_matches_direct_sum(self):
        probs = make_rng(0).dirichlet(np.ones(4), size=25)
        marginal = probs.mean(axis=0)
        direct = np.exp(np.mean([np.sum(p * np.log(p / marginal)) for p in probs]))
        assert inception_score_from_probs(probs) == pytest.approx(direct, rel=1e-10)

    def test_bounded_by_class_count(self):
        probs = make_rng(1).dirichlet(np.full(10, 0.1), size=50)
        score = inception_score_from_probs(probs)
        assert 1.0 <= score <= 10.0

    def test_empty(self):
        with pytest.raises(ShapeError):
            inception_score_from_probs(np.zeros((0, 10)))

    def test_images_through_classifier(self, classifier, digits_factory):
        score = inception_score(digits_factory(30, seed=4).images, classifier)
        assert 1.0 <= score <= 10.0


class TestEliminationSequence:
    def test_sizes_and_uniqueness(self, digits_factory):
        train = digits_factory(60, size=12)
        query = train.images[3]
        contexts = elimination_sequence(train, query, target_digit=3, per_step=10)
        assert [len(c) for c in contexts] == [1 + 10 * i for i in range(11)]
        final = contexts[-1].indices
        assert len(np.unique(final)) == len(final)
        assert contexts[0].indices.tolist() == [0]
        for before, after in zip(contexts, contexts[1:]):
            np.testing.assert_array_equal(after.indices[:len(before)], before.indices)
        np.testing.assert_allclose(contexts[-1].values[:, 0], query.reshape(-1)[final])

    def test_matches_brute_force(self, digits_factory):
        train = digits_factory(60, size=12)
        flat = train.images.reshape(60, -1)
        means = np.stack([flat[train.labels == d].mean(axis=0) for d in range(10)])
        expected = [0]
        for digit in range(10):
            diff = np.abs(means[3] - means[digit])
            candidates = [p for p in range(flat.shape[1]) if p not in expected]
            # 差值降序，平局取编号小者
            candidates.sort(key=lambda p: (-diff[p], p))
            expected.extend(candidates[:10])
        contexts = elimination_sequence(train, train.images[0])
        assert contexts[-1].indices.tolist() == expected

    def test_missing_class(self, digits_factory):
        train = digits_factory(60, size=12)
        keep = np.flatnonzero(train.labels != 7)
        with pytest.raises(MissingClassError):
            elimination_sequence(train.subset(keep), train.images[0])


class TestEntropyCurve:
    def test_flags_and_shape(self, plain_model, image):
        curve = entropy_curve(plain_model, image, [1, 5, 30, 64], reps=3, seed=0, train_max=20, progress=False)
        assert curve.sizes == [1, 5, 30, 64]
        assert curve.outside_training == [False, False, True, True]
        assert len(curve.rows()) == 4
        assert all(s >= 0 for s in curve.stds)

    def test_entropy_equals_encoder_entropy(self, plain_model, image):
        n = 7
        curve = entropy_curve(plain_model, image, [n], reps=1, seed=3, progress=False)
        chosen = make_rng(3, n, 0).permutation(image.size)[:n]
        graph = Graph(dtype=np.float64, requires_grad=False)
        posterior = plain_model.encode_np(graph, PointSet.from_image(image, chosen)).posterior
        assert curve.means[0] == pytest.approx(entropy(posterior).item(), rel=1e-9)

    def test_sivi_head(self, sivi_model, image):
        curve = entropy_curve(sivi_model, image, [2, 10], reps=2, seed=0, progress=False)
        assert all(np.isfinite(curve.means))

    @pytest.mark.parametrize("sizes", [[0, 5], [5, 5], [10, 3], [65]])
    def test_invalid_sizes(self, plain_model, image, sizes):
        with pytest.raises(ContextSizeError):
            entropy_curve(plain_model, image, sizes, reps=1, seed=0, progress=False)


class TestGreedySelect:
    @pytest.mark.parametrize("criterion", ["kl_to_full", "entropy"])
    def test_trace_is_non_increasing(self, plain_model, image, criterion):
        result = greedy_select(plain_model, image, 12, criterion)
        assert len(result.order) == 12
        assert len(set(result.order)) == 12
        assert all(a >= b for a, b in zip(result.trace, result.trace[1:]))
        assert all(t <= r for t, r in zip(result.trace, result.raw_trace))

    def test_zero_budget(self, plain_model, image):
        result = greedy_select(plain_model, image, 0)
        assert result.order == [] and result.trace == []
        assert np.isfinite(result.full_entropy)

    def test_budget_too_large(self, plain_model, image):
        with pytest.raises(ContextSizeError):
            greedy_select(plain_model, image, image.size + 1)

    def test_first_pick_is_brute_force_minimum(self, plain_model, image):
        graph = Graph(dtype=np.float64, requires_grad=False)
        full = plain_model.encode_np(graph, PointSet.from_image(image, np.arange(image.size))).posterior
        scores = []
        for pixel in range(image.size):
            single = plain_model.encode_np(graph, PointSet.from_image(image, [pixel])).posterior
            scores.append(kl(full, single).item())
        result = greedy_select(plain_model, image, 1)
        assert result.order[0] == int(np.argmin(scores))
        assert result.raw_trace[0] == pytest.approx(min(scores), rel=1e-9)

    def test_full_image_reaches_zero_kl_with_max_pooling(self, plain_model, image):
        result = greedy_select(plain_model, image, image.size)
        assert result.trace[-1] == pytest.approx(0.0, abs=1e-9)
        assert result.entropies[-1] == pytest.approx(result.full_entropy, rel=1e-9)

    def test_mean_pooling_and_candidate_cap(self, model_factory, image):
        model = model_factory(pooling="mean")
        result = greedy_select(model, image, 5, candidate_cap=8, seed=1)
        assert len(set(result.order)) == 5
        assert result == greedy_select(model, image, 5, candidate_cap=8, seed=1)

    def test_sivi_uses_zero_noise_conditional(self, sivi_model, image):
        result = greedy_select(sivi_model, image, 3, "entropy")
        graph = Graph(dtype=np.float64, requires_grad=False)
        s = sivi_model.embed(graph, PointSet.from_image(image, result.order))
        posterior = sivi_model.posterior_from_embedding(graph, sivi_model.pool(graph, s))
        assert result.entropies[-1] == pytest.approx(entropy(posterior).item(), rel=1e-9)

    def test_unknown_criterion(self, plain_model, image):
        with pytest.raises(ValueError):
            greedy_select(plain_model, image, 3, "variance")


class TestEmbeddingStats:
    def test_requires_max_pooling(self, model_factory, image):
        with pytest.raises(PoolingMismatchError):
            embedding_stats(model_factory(pooling="mean"), image)

    def test_norms_grow_and_meet_at_full_image(self, plain_model, image):
        traces = embedding_stats(plain_model, image)
        assert [t.mode for t in traces] == ["random", "greedy_entropy", "greedy_kl"]
        for trace in traces:
            assert trace.sizes == list(range(1, image.size + 1))
            assert all(b >= a for a, b in zip(trace.norms, trace.norms[1:]))
            assert min(trace.norms) >= 0.0
            assert -1.0 <= trace.rank_correlation <= 1.0
        finals = [t.norms[-1] for t in traces]
        np.testing.assert_allclose(finals, finals[0], rtol=1e-12)
        final_entropies = [t.entropies[-1] for t in traces]
        np.testing.assert_allclose(final_entropies, final_entropies[0], rtol=1e-12)

    def test_budget_and_modes(self, plain_model, image):
        traces = embedding_stats(plain_model, image, modes=["random"], budget=10)
        assert len(traces) == 1 and len(traces[0].norms) == 10
        with pytest.raises(ValueError):
            embedding_stats(plain_model, image, modes=["sorted"])


class TestCompletionDiagnostics:
    def test_histogram_sums_to_one(self, plain_model, image, classifier):
        context = PointSet.from_image(image, np.arange(10))
        hist = prediction_histogram(plain_model, context, image.shape, classifier, 12, make_rng(0))
        assert hist.shape == (10,)
        assert hist.sum() == pytest.approx(1.0)
        again = prediction_histogram(plain_model, context, image.shape, classifier, 12, make_rng(0))
        np.testing.assert_array_equal(hist, again)

    def test_inception_by_size(self, plain_model, digits, classifier):
        results = inception_by_size(plain_model, digits.images, [1, 20], classifier, k=6, seed=0,
                                    context_sets=3, progress=False)
        assert list(results) == [1, 20]
        for mean, std in results.values():
            assert 1.0 <= mean <= 10.0
            assert std >= 0.0

    def test_inception_by_size_rejects_large_context(self, plain_model, digits, classifier):
        with pytest.raises(ContextSizeError):
            inception_by_size(plain_model, digits.images, [65], classifier, k=2, seed=0, progress=False)

