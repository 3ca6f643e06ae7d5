import math

import pytest
import torch
import torch.nn.functional as F

from adaptor import (
    AdaptorDecoder,
    RegionFeatureSequence,
    adaptor_forward,
    adaptor_gradients,
    count_parameters,
    draw_noise,
    inject_region_noise,
    inject_region_noise_batch,
)
from backbone.common import TextEmbedding
from utils.config import NoiseConfig
from utils.errors import InvalidArgumentException, NumericFailureException


def _unit(dim, seed):
    v = torch.randn((dim,), generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    return v / v.norm()


def _tiny_adaptor(seed=0, dim=4, lm_dim=3, n_q=2, n_heads=1, ffn_mult=2):
    return AdaptorDecoder(dim=dim, lm_dim=lm_dim, n_q=n_q, n_heads=n_heads, ffn_mult=ffn_mult, seed=seed)


class TestInjectRegionNoise:
    def test_matches_seeded_oracle(self):
        t_c = _unit(32, 0)
        cfg = NoiseConfig(sigma=0.016, n_cr=10)
        rows = inject_region_noise(TextEmbedding(t_c), cfg, torch.Generator().manual_seed(11)).rows

        g = torch.Generator().manual_seed(11)
        noise = torch.randn((1, 10, 32), generator=g, dtype=torch.float64)[0] * 0.016
        expected = torch.stack([(t_c + n) / (t_c + n).norm() for n in noise])
        torch.testing.assert_close(rows, expected, rtol=0, atol=1e-12)

    def test_randomized_contract(self):
        """Unit rows for any sigma; sigma 0 returns exact copies."""
        rng = torch.Generator().manual_seed(0)
        noise_gen = torch.Generator().manual_seed(1)
        for call in range(10000):
            dim = int(torch.randint(1, 9, (1,), generator=rng))
            n_cr = int(torch.randint(1, 13, (1,), generator=rng))
            sigma = 0.0 if call % 10 == 0 else float(torch.rand((1,), generator=rng)) * 0.2
            t_c = _unit(dim, call)
            rows = inject_region_noise(t_c, NoiseConfig(sigma=sigma, n_cr=n_cr), noise_gen).rows
            assert rows.shape == (n_cr, dim)
            if sigma == 0:
                assert torch.equal(rows, t_c.expand(n_cr, dim))
            else:
                assert float((rows.norm(dim=-1) - 1).abs().max()) < 1e-5

    @pytest.mark.parametrize("distribution", ["gaussian", "uniform"])
    def test_noise_is_zero_mean_with_requested_std(self, distribution):
        sigma, n = 0.016, 100000
        noise = draw_noise((n, 8), distribution, sigma, torch.Generator().manual_seed(3))
        assert float(noise.mean(dim=0).abs().max()) < 5 * sigma / math.sqrt(n)
        torch.testing.assert_close(noise.std(dim=0), torch.full((8,), sigma, dtype=torch.float64), rtol=0.02, atol=0)

    def test_rows_distinct(self, generator):
        rows = inject_region_noise(_unit(16, 2), NoiseConfig(sigma=0.016, n_cr=10), generator).rows
        for i in range(10):
            for j in range(i + 1, 10):
                assert float((rows[i] - rows[j]).abs().max()) > 1e-9

    def test_batch_shape(self, generator):
        t_c = torch.stack([_unit(8, s) for s in range(3)])
        rows = inject_region_noise_batch(t_c, NoiseConfig(sigma=0.1, n_cr=4), generator)
        assert rows.shape == (3, 4, 8)

    def test_invalid_inputs(self, generator):
        with pytest.raises(InvalidArgumentException):
            draw_noise((2,), "gaussian", -1.0, generator)
        with pytest.raises(InvalidArgumentException):
            draw_noise((2,), "laplace", 0.1, generator)
        with pytest.raises(InvalidArgumentException):
            inject_region_noise_batch(torch.zeros(4, dtype=torch.float64), NoiseConfig(), generator)


class TestAdaptorForward:
    def test_shapes(self):
        adaptor = AdaptorDecoder(dim=8, lm_dim=6, n_q=5, n_heads=2)
        rows = torch.randn((7, 8), dtype=torch.float64)
        prefix = adaptor_forward(RegionFeatureSequence(rows), adaptor)
        assert prefix.rows.shape == (5, 6)
        assert adaptor(rows[None].expand(3, -1, -1)).shape == (3, 5, 6)

    def test_permutation_invariant(self):
        adaptor = AdaptorDecoder(dim=8, lm_dim=6, n_q=5, n_heads=2, seed=1)
        rows = torch.randn((10, 8), generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        perm = torch.randperm(10, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            torch.testing.assert_close(adaptor(rows[perm]), adaptor(rows), rtol=0, atol=1e-12)

    def test_matches_hand_unrolled_block(self):
        adaptor = _tiny_adaptor(seed=5)
        with torch.no_grad():
            for p in adaptor.parameters():
                p.add_(0.1 * torch.randn(p.shape, generator=torch.Generator().manual_seed(p.numel()), dtype=p.dtype))
        rows = torch.randn((3, 4), generator=torch.Generator().manual_seed(9), dtype=torch.float64)
        P = dict(adaptor.named_parameters())

        def ln(x, name):
            mean = x.mean(-1, keepdim=True)
            var = ((x - mean) ** 2).mean(-1, keepdim=True)
            return (x - mean) / torch.sqrt(var + 1e-5) * P[f"{name}.weight"] + P[f"{name}.bias"]

        def lin(x, name):
            return x @ P[f"{name}.weight"].T + P[f"{name}.bias"]

        def attn(x, mem, name):
            q, k, v = lin(x, f"{name}.query"), lin(mem, f"{name}.key"), lin(mem, f"{name}.value")
            out = torch.zeros_like(q)
            for i in range(q.shape[0]):
                scores = torch.stack([q[i] @ k[j] / 2.0 for j in range(k.shape[0])])
                w = torch.exp(scores - scores.max())
                w = w / w.sum()
                out[i] = sum(w[j] * v[j] for j in range(k.shape[0]))
            return lin(out, f"{name}.out")

        with torch.no_grad():
            q = P["queries"]
            h = ln(q, "norm_self")
            q = q + attn(h, h, "self_attn")
            q = q + attn(ln(q, "norm_cross"), rows, "cross_attn")
            q = q + lin(F.gelu(lin(ln(q, "norm_ffn"), "ffn.0")), "ffn.2")
            expected = lin(torch.tanh(lin(q, "mlp.0")), "mlp.2")
            torch.testing.assert_close(adaptor(rows), expected, rtol=0, atol=1e-12)

    def test_zero_head_mask_ignores_regions(self):
        adaptor = AdaptorDecoder(dim=8, lm_dim=6, n_q=3, n_heads=2, seed=2)
        mask = torch.zeros(2, dtype=torch.float64)
        a = torch.randn((4, 8), generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        b = torch.randn((6, 8), generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        with torch.no_grad():
            torch.testing.assert_close(adaptor(a, mask), adaptor(b, mask))
            assert not torch.allclose(adaptor(a), adaptor(b))

    def test_deterministic_initialization(self):
        a, b = _tiny_adaptor(seed=3), _tiny_adaptor(seed=3)
        for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(pa, pb), name

    def test_width_mismatch(self):
        with pytest.raises(InvalidArgumentException):
            _tiny_adaptor()(torch.zeros((3, 5), dtype=torch.float64))

    def test_empty_region_sequence(self):
        with pytest.raises(InvalidArgumentException):
            _tiny_adaptor()(torch.zeros((0, 4), dtype=torch.float64))


class TestAdaptorGradients:
    @pytest.mark.parametrize("seed, n_q, n_heads, n_rows", [(0, 2, 1, 3), (1, 3, 2, 5), (2, 1, 4, 2)])
    def test_match_central_finite_differences(self, seed, n_q, n_heads, n_rows):
        adaptor = _tiny_adaptor(seed=seed, n_q=n_q, n_heads=n_heads)
        g = torch.Generator().manual_seed(seed + 10)
        rows = torch.randn((n_rows, 4), generator=g, dtype=torch.float64)
        weight = torch.randn((n_q, 3), generator=g, dtype=torch.float64)
        loss_fn = lambda e: (e * weight).sum() + (e ** 2).sum()

        grads = adaptor_gradients(rows, adaptor, loss_fn)
        h = 1e-5
        worst = 0.0
        with torch.no_grad():
            for name, param in adaptor.named_parameters():
                flat = param.view(-1)
                numeric = torch.zeros_like(flat)
                for i in range(flat.numel()):
                    original = float(flat[i])
                    flat[i] = original + h
                    up = float(loss_fn(adaptor(rows)))
                    flat[i] = original - h
                    down = float(loss_fn(adaptor(rows)))
                    flat[i] = original
                    numeric[i] = (up - down) / (2 * h)
                analytic = grads[name].reshape(-1)
                scale = torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=1e-3)
                worst = max(worst, float(((analytic - numeric).abs() / scale).max()))
        assert worst < 1e-4

    def test_every_parameter_reported(self):
        adaptor = _tiny_adaptor()
        grads = adaptor_gradients(torch.ones((2, 4), dtype=torch.float64), adaptor, lambda e: e.sum())
        assert set(grads) == {name for name, _ in adaptor.named_parameters()}

    def test_constant_loss_gives_zero_gradients(self):
        adaptor = _tiny_adaptor()
        grads = adaptor_gradients(torch.ones((2, 4), dtype=torch.float64), adaptor,
                                  lambda e: torch.tensor(1.0, dtype=torch.float64))
        assert all(float(g.abs().max()) == 0.0 for g in grads.values())

    def test_non_finite_loss(self):
        adaptor = _tiny_adaptor()
        with pytest.raises(NumericFailureException):
            adaptor_gradients(torch.ones((2, 4), dtype=torch.float64), adaptor, lambda e: e.sum() * float("inf"))


class TestCountParameters:
    def test_hand_count(self):
        dim, lm_dim, n_q, mult = 4, 3, 2, 2
        attention = 4 * (dim * dim + dim)
        expected = (
            n_q * dim
            + 3 * 2 * dim
            + 2 * attention
            + (dim * mult * dim + mult * dim) + (mult * dim * dim + dim)
            + (dim * 4 + 4) + (4 * lm_dim + lm_dim)
        )
        adaptor = _tiny_adaptor()
        assert count_parameters(adaptor) == expected
        assert count_parameters(dict(adaptor.named_parameters())) == expected
        assert count_parameters(adaptor.parameters()) == expected
