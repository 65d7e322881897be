"""神经过程模型：置换不变性、头部、解码与条件补全"""

import numpy as np
import pytest

from npkit.core.exceptions import EmptyContextError, HeadMismatchError, ShapeError
from npkit.engine.graph import Graph
from npkit.engine.random import make_rng
from npkit.models.domain import PointSet
from npkit.services.neural_process import NeuralProcess, parameter_shapes


def _context(image, count, seed=0):
    order = make_rng(seed).permutation(image.size)
    return PointSet.from_image(image, order[:count])


class TestParameters:
    def test_plain_head_has_no_eta(self, plain_model):
        names = set(parameter_shapes(plain_model.config))
        assert not any(name.startswith("eta.") for name in names)
        assert plain_model.params["rho.1.W"].shape == (8, 16)

    def test_sivi_head_shapes(self, sivi_model):
        c = sivi_model.config
        shapes = parameter_shapes(c)
        assert shapes["rho.0.W"] == (c.d_s + c.d_eps, c.d_h)
        assert shapes["rho.1.W"] == (c.d_h, c.d_psi)
        assert shapes["eta.0.W"] == (c.d_s + c.d_psi, c.d_h)
        assert shapes["eta.1.W"] == (c.d_h, 2 * c.d_z)

    def test_fixed_variance_decoder_has_single_output(self, model_factory):
        model = model_factory(obs_variance="fixed")
        assert model.params["g.4.W"].shape == (8, 1)

    def test_params_validated(self, plain_model, sivi_model):
        with pytest.raises(ShapeError):
            NeuralProcess(sivi_model.config, plain_model.params)


class TestEncoder:
    @pytest.mark.parametrize("pooling", ["max", "mean"])
    def test_permutation_invariance(self, model_factory, image, pooling):
        model = model_factory(pooling=pooling)
        context = _context(image, 20)
        shuffled = context.permuted(make_rng(1).permutation(len(context)))
        a = model.encode_np(Graph(dtype=np.float64, requires_grad=False), context).posterior
        b = model.encode_np(Graph(dtype=np.float64, requires_grad=False), shuffled).posterior
        if pooling == "max":
            np.testing.assert_array_equal(a.mu.value, b.mu.value)
            np.testing.assert_array_equal(a.sigma.value, b.sigma.value)
        else:
            np.testing.assert_allclose(a.mu.value, b.mu.value, atol=1e-6)
            np.testing.assert_allclose(a.sigma.value, b.sigma.value, atol=1e-6)

    def test_max_pool_grows_along_nested_contexts(self, plain_model, image):
        order = make_rng(3).permutation(image.size)
        previous = None
        for n in (1, 2, 5, 10, 30, 64):
            graph = Graph(dtype=np.float64, requires_grad=False)
            s_c = plain_model.encode_np(graph, PointSet.from_image(image, order[:n])).s_c.value
            if previous is not None:
                assert np.all(s_c >= previous)
            previous = s_c

    @pytest.mark.parametrize("head,low,high", [("narrow", 0.9, 1.0), ("wide", 0.1, 1.0)])
    def test_latent_sigma_range(self, model_factory, image, head, low, high):
        model = model_factory(latent_sigma_head=head)
        sigma = model.encode_np(Graph(requires_grad=False), _context(image, 10)).posterior.sigma.value
        assert np.all(sigma >= low) and np.all(sigma <= high)

    def test_empty_context(self, plain_model, image):
        empty = PointSet.from_image(image, [])
        with pytest.raises(EmptyContextError):
            plain_model.encode_np(Graph(), empty)

    def test_head_mismatch(self, plain_model, sivi_model, image):
        context = _context(image, 5)
        with pytest.raises(HeadMismatchError):
            plain_model.encode_sivi(Graph(), context, make_rng(0))
        with pytest.raises(HeadMismatchError):
            sivi_model.encode_np(Graph(), context)

    def test_sivi_draws_share_embedding(self, sivi_model, image):
        graph = Graph(dtype=np.float64, requires_grad=False)
        encoding = sivi_model.encode_sivi(graph, _context(image, 12), make_rng(0), draws=(6,))
        assert encoding.psi.shape == (6, sivi_model.config.d_psi)
        assert encoding.posterior.mu.shape == (6, sivi_model.config.d_z)
        assert encoding.s_c.shape == (sivi_model.config.d_s,)
        # 不同 ε 得到不同的条件高斯
        assert not np.allclose(encoding.posterior.mu.value[0], encoding.posterior.mu.value[1])

    def test_sivi_default_conditional_uses_zero_noise(self, sivi_model, image):
        context = _context(image, 12)
        graph = Graph(dtype=np.float64, requires_grad=False)
        s_c = sivi_model.pool(graph, sivi_model.embed(graph, context))
        default = sivi_model.posterior_from_embedding(graph, s_c)
        explicit = sivi_model.encode_sivi(graph, context, make_rng(0), eps=np.zeros(4)).posterior
        np.testing.assert_allclose(default.mu.value, explicit.mu.value)


class TestDecoder:
    def test_single_latent_shapes(self, plain_model, image):
        graph = Graph(requires_grad=False)
        target = _context(image, 9)
        z = graph.constant(np.zeros(plain_model.config.d_z))
        prediction = plain_model.decode(graph, target.coords, z)
        assert prediction.mu.shape == (9, 1)
        assert np.all(prediction.sigma.value >= 0.9)
        assert plain_model.log_likelihood(graph, target, z).shape == ()

    def test_batched_latent_shapes(self, plain_model, image):
        graph = Graph(requires_grad=False)
        target = _context(image, 9)
        z = graph.constant(np.zeros((4, plain_model.config.d_z)))
        assert plain_model.decode(graph, target.coords, z).mu.shape == (9, 4, 1)
        assert plain_model.log_likelihood(graph, target, z).shape == (4,)

    def test_fixed_variance(self, model_factory, image):
        model = model_factory(obs_variance="fixed", sigma0=0.3)
        graph = Graph(requires_grad=False)
        prediction = model.decode(graph, _context(image, 5).coords, graph.constant(np.zeros(8)))
        np.testing.assert_allclose(prediction.sigma.value, 0.3, rtol=1e-6)

    def test_batched_matches_single(self, plain_model, image):
        target = _context(image, 7)
        latents = make_rng(2).normal(size=(3, plain_model.config.d_z))
        graph = Graph(dtype=np.float64, requires_grad=False)
        batched = plain_model.log_likelihood(graph, target, graph.constant(latents)).value
        for i, z in enumerate(latents):
            single = plain_model.log_likelihood(graph, target, graph.constant(z)).value
            assert single == pytest.approx(batched[i])

    def test_empty_target(self, plain_model):
        graph = Graph()
        with pytest.raises(ShapeError):
            plain_model.decode(graph, np.zeros((0, 2)), graph.constant(np.zeros(8)))


class TestCompletion:
    @pytest.mark.parametrize("head", ["plain", "sivi"])
    def test_shapes(self, model_factory, image, head):
        model = model_factory(head=head)
        completion = model.sample_completion(_context(image, 10), image.shape, k=5, rng=make_rng(0), chunk_size=2)
        assert completion.means.shape == (5, 8, 8)
        assert completion.std.shape == (8, 8)
        assert np.all(completion.std >= 0)

    def test_deterministic_for_fixed_stream(self, plain_model, image):
        a = plain_model.sample_completion(_context(image, 10), image.shape, k=4, rng=make_rng(9))
        b = plain_model.sample_completion(_context(image, 10), image.shape, k=4, rng=make_rng(9))
        np.testing.assert_array_equal(a.means, b.means)

    def test_copy_context(self, plain_model, image):
        context = _context(image, 10)
        completion = plain_model.sample_completion(context, image.shape, k=3, rng=make_rng(0), copy_context=True)
        rows, cols = np.divmod(context.indices, 8)
        for sample in completion.means:
            np.testing.assert_allclose(sample[rows, cols], image[rows, cols])
        np.testing.assert_allclose(completion.std[rows, cols], 0.0, atol=1e-12)

    def test_point_mass_posterior_has_zero_spread(self, plain_model, image):
        class PointMass(NeuralProcess):
            def sample_latents(self, graph, context, k, rng):
                return graph.constant(np.zeros((k, self.config.d_z)))

        model = PointMass(plain_model.config, plain_model.params)
        completion = model.sample_completion(_context(image, 10), image.shape, k=6, rng=make_rng(0))
        np.testing.assert_allclose(completion.std, 0.0, atol=1e-6)

    def test_rejects_zero_samples(self, plain_model, image):
        with pytest.raises(ValueError):
            plain_model.sample_completion(_context(image, 3), image.shape, k=0, rng=make_rng(0))
