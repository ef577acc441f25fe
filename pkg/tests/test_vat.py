import numpy as np
import pytest

from laddervat import ladder
from laddervat import numerics as nx
from laddervat.harness import adam_step
from laddervat.numerics import RngStream, Tape, Tensor
from laddervat.vat import (
    EncoderPath,
    VatSettings,
    injection_noise,
    layerwise_vadv_cost,
    power_iteration,
    scale_direction,
    vadv_cost,
    vadv_perturbation,
)


def quadratic(a):
    """r -> 0.5 * sum_i r_i^T A r_i, which is zero with zero gradient at r = 0."""
    a = Tensor(np.asarray(a, dtype=np.float64))
    return lambda r: nx.scale(nx.total(nx.mul(r, nx.affine(r, a))), 0.5)


def wishart_with_gap(rng, gap, dim=10):
    while True:
        g = rng.normal(size=(dim, dim))
        a = g @ g.T
        w, v = np.linalg.eigh(a)
        if w[-1] / w[-2] >= gap:
            return a, v[:, -1]


def row_kl(p, q):
    return np.sum(p * (np.log(p) - np.log(q)), axis=1)


@pytest.fixture
def toy_classifier():
    """Encoder (20-16-2) fitted to two Gaussian blobs, and a batch to probe.

    The input has more dimensions than the output's curvature has rank, so a
    random direction is a meaningful baseline.
    """
    rng = np.random.default_rng(0)
    y = np.repeat([0, 1], 100)
    x = rng.normal(size=(200, 20)) + np.where(y[:, None] == 0, -0.5, 0.5)
    params = ladder.LadderParams.init((20, 16, 2), RngStream(3), dtype=np.float64)
    for _ in range(150):
        with Tape() as tape:
            tape.watch(params.parameters())
            loss = ladder.supervised_cost(ladder.encode(params, x).logits, y)
        for p, g in zip(params.parameters(), tape.gradient(loss, params.parameters())):
            p.grad += g
        adam_step(params.parameters(), 0.02)
    probe_x = rng.normal(size=(100, 20)) * 1.5
    return params, probe_x


class TestPowerIteration:
    @pytest.mark.parametrize("seed", range(5))
    def test_diagonal_quadratic(self, seed):
        d, _ = power_iteration(quadratic(np.diag([3.0, 1.0])), (1, 2), RngStream(seed), iters=5)
        assert abs(d[0, 0]) >= 0.99

    def test_isotropic_unit_norm(self):
        d, degenerate = power_iteration(quadratic(2 * np.eye(5)), (8, 5), RngStream(0), iters=3)
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-9)
        assert not degenerate.any()

    def test_matches_eigendecomposition(self):
        a, top = wishart_with_gap(np.random.default_rng(11), 1.5)
        d, _ = power_iteration(quadratic(a), (1, 10), RngStream(0), iters=10)
        assert abs(d[0] @ top) >= 0.99

    def test_rows_are_independent(self):
        # each row of r only sees its own quadratic term
        a = np.diag([1.0, 4.0, 2.0])
        d, _ = power_iteration(quadratic(a), (6, 3), RngStream(1), iters=20)
        np.testing.assert_allclose(np.abs(d[:, 1]), 1.0, atol=1e-6)

    def test_zero_gradient_is_flagged(self):
        d, degenerate = power_iteration(lambda r: nx.scale(nx.total(r), 0.0), (3, 4),
                                        RngStream(2), iters=2)
        d0 = RngStream(2).normal((3, 4))
        np.testing.assert_allclose(d, d0 / np.linalg.norm(d0, axis=1, keepdims=True))
        assert degenerate.all()


class TestScaling:
    def test_linf_magnitude(self):
        d = np.array([[0.3, -0.2, 0.0], [-1.0, 0.5, 0.1]])
        r = scale_direction(d, 0.25, "linf")
        np.testing.assert_allclose(np.abs(r), 0.25, atol=1e-9)
        assert r[0, 2] == 0.25

    def test_l2_norm(self):
        d = np.random.default_rng(0).normal(size=(4, 7))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        np.testing.assert_allclose(np.linalg.norm(scale_direction(d, 3.0, "l2"), axis=1), 3.0,
                                   atol=1e-6)

    def test_settings_validation(self):
        with pytest.raises(ValueError):
            VatSettings(epsilon=(-1.0,))
        with pytest.raises(ValueError):
            VatSettings(epsilon=(1.0,), xi=0)
        with pytest.raises(ValueError):
            VatSettings(epsilon=(1.0,), power_iters=0)
        with pytest.raises(ValueError):
            VatSettings(epsilon=(1.0,), norm="l1")


class TestPerturbation:
    def test_zero_epsilon(self, small_params, small_batches):
        _, x_u = small_batches
        path = EncoderPath(small_params, ladder.encode(small_params, x_u))
        res = vadv_perturbation(path, 0, VatSettings(epsilon=(0.0,)), RngStream(0))
        assert not res.r_vadv.any() and res.divergence_value == 0.0

    @pytest.mark.parametrize("layer", [0, 1, 2])
    def test_linf_every_component(self, small_params, small_batches, layer):
        _, x_u = small_batches
        path = EncoderPath(small_params, ladder.encode(small_params, x_u))
        res = vadv_perturbation(path, layer, VatSettings(epsilon=(0.2, 0.2, 0.2)), RngStream(0))
        np.testing.assert_allclose(np.abs(res.r_vadv), 0.2, atol=1e-9)

    def test_l2_per_sample_norm(self, small_params, small_batches):
        _, x_u = small_batches
        path = EncoderPath(small_params, ladder.encode(small_params, x_u))
        res = vadv_perturbation(path, 0, VatSettings(epsilon=(1.5,), norm="l2"), RngStream(0))
        np.testing.assert_allclose(np.linalg.norm(res.r_vadv, axis=1), 1.5, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(res.direction, axis=1), 1.0, atol=1e-9)

    def test_beats_random_direction(self, toy_classifier):
        params, x = toy_classifier
        path = EncoderPath(params, ladder.encode(params, x))
        eps = 0.1
        res = vadv_perturbation(path, 0, VatSettings(epsilon=(eps,), norm="l2", power_iters=1),
                                RngStream(5))
        rand = RngStream(6).normal(x.shape)
        rand *= eps / np.linalg.norm(rand, axis=1, keepdims=True)
        p = path.reference_probs()
        with nx.no_grad():
            kl_adv = row_kl(p, path.probs_at(0, res.r_vadv).data)
            kl_rand = row_kl(p, path.probs_at(0, rand).data)
        assert np.mean(kl_adv >= kl_rand) >= 0.9

    def test_parameters_untouched(self, small_params, small_batches):
        _, x_u = small_batches
        before = {k: v.copy() for k, v in small_params.named_arrays().items()}
        path = EncoderPath(small_params, ladder.encode(small_params, x_u, 0.3, RngStream(1)))
        layerwise_vadv_cost(path, VatSettings(epsilon=(0.5, 0.5, 0.5, 0.5)), RngStream(2))
        for k, v in small_params.named_arrays().items():
            np.testing.assert_array_equal(v, before[k])
        assert all(not p.grad.any() for p in small_params.parameters())

    def test_generation_not_recorded_on_outer_tape(self, small_params, small_batches):
        _, x_u = small_batches
        params = small_params.parameters()
        with Tape() as tape:
            tape.watch(params)
            path = EncoderPath(small_params, ladder.encode(small_params, x_u))
            cache = {}
            cost = vadv_cost(path, VatSettings(epsilon=(0.5,)), RngStream(2), cache)
        r, _ = cache[0]
        assert isinstance(r, np.ndarray)
        grads = tape.gradient(cost, params)
        assert all(np.all(np.isfinite(g)) for g in grads)


class TestCosts:
    def test_matches_two_pass_recomputation(self, small_params, small_batches):
        _, x_u = small_batches
        trace = ladder.encode(small_params, x_u)
        cache = {}
        cost = vadv_cost(EncoderPath(small_params, trace), VatSettings(epsilon=(0.7,)),
                         RngStream(3), cache).item()
        r, _ = cache[0]
        stats = [(trace.mean[l].data, trace.std[l].data) for l in range(1, 4)]
        p = ladder.encode(small_params, x_u, stats=stats).probs.data
        q = ladder.encode(small_params, x_u + r, stats=stats).probs.data
        assert abs(cost - np.mean(row_kl(p, q))) <= 1e-10

    def test_zero_perturbation(self, small_params, small_batches):
        _, x_u = small_batches
        path = EncoderPath(small_params, ladder.encode(small_params, x_u))
        cache = {0: (np.zeros_like(x_u), path.reference_probs().copy())}
        assert vadv_cost(path, VatSettings(epsilon=(1.0,)), RngStream(0), cache).item() == 0.0

    def test_nonnegative(self, small_params):
        for seed in range(5):
            x = RngStream(seed).normal((6, 6))
            path = EncoderPath(small_params, ladder.encode(small_params, x, 0.3, RngStream(seed)))
            assert vadv_cost(path, VatSettings(epsilon=(2.0,)), RngStream(seed)).item() >= 0

    def test_all_alpha_zero(self, small_params, small_batches):
        _, x_u = small_batches
        path = EncoderPath(small_params, ladder.encode(small_params, x_u))
        s = VatSettings(epsilon=(1.0, 1.0, 1.0, 1.0), alpha=(0.0, 0.0, 0.0, 0.0))
        assert layerwise_vadv_cost(path, s, RngStream(0)).item() == 0.0

    def test_all_epsilon_zero(self, small_params, small_batches):
        _, x_u = small_batches
        path = EncoderPath(small_params, ladder.encode(small_params, x_u))
        s = VatSettings(epsilon=(0.0, 0.0, 0.0, 0.0))
        assert layerwise_vadv_cost(path, s, RngStream(0)).item() == 0.0

    def test_single_layer_reduces_to_input_cost(self, small_params, small_batches):
        _, x_u = small_batches
        trace = ladder.encode(small_params, x_u, 0.3, RngStream(1))
        s = VatSettings(epsilon=(0.4, 0.0, 0.0, 0.0))
        a = layerwise_vadv_cost(EncoderPath(small_params, trace), s, RngStream(9)).item()
        b = vadv_cost(EncoderPath(small_params, trace), s, RngStream(9)).item()
        assert abs(a - b) <= 1e-10

    def test_layerwise_hand_sum(self, small_params, small_batches):
        _, x_u = small_batches
        noise = ladder.sample_noise(small_params.widths, len(x_u), 0.3, RngStream(4), np.float64)
        trace = ladder.encode(small_params, x_u, noise=noise)
        s = VatSettings(epsilon=(0.3, 0.5, 0.2, 0.1), alpha=(1.0, 0.5, 2.0, 0.25))
        cache = {}
        total = layerwise_vadv_cost(EncoderPath(small_params, trace), s, RngStream(5),
                                    cache=cache).item()
        stats = [(trace.mean[l].data, trace.std[l].data) for l in range(1, 4)]
        p = trace.probs.data
        expected = 0.0
        for layer in range(4):
            extra = [None] * 4
            extra[layer] = cache[layer][0]
            q = ladder.encode(small_params, x_u, noise=noise, extra_noise=extra,
                              stats=stats).probs.data
            expected += s.alpha[layer] * np.mean(row_kl(p, q))
        assert abs(total - expected) <= 1e-10

    def test_injection_noise_slots(self, small_params, small_batches):
        _, x_u = small_batches
        path = EncoderPath(small_params, ladder.encode(small_params, x_u))
        out = injection_noise(path, VatSettings(epsilon=(0.1, 0.0, 0.2, 0.2)), RngStream(0),
                              layers=[0, 1, 2])
        assert out[1] is None and out[3] is None
        assert out[0].shape == (7, 6) and out[2].shape == (7, 4)
