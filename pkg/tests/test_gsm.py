import numpy as np
import pytest
import torch

from usd_fss.gsm import (
    FeatureMap,
    GlobalSupplement,
    downsample_mask,
    kshot_prototype,
    masked_average_pool,
    resize_to_grid,
)


class TestResizeToGrid:
    def test_identity(self):
        x = torch.randn(3, 4, 5)
        assert torch.equal(resize_to_grid(x, (4, 5)), x)

    def test_constant_stays_constant(self):
        x = torch.full((2, 8, 8), 1.7)
        np.testing.assert_allclose(resize_to_grid(x, (16, 16)).numpy(), 1.7, rtol=1e-6)

    def test_two_by_two_to_one(self):
        # half-pixel centres: the single output sample sits at the centre,
        # equidistant from all four inputs
        x = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
        assert resize_to_grid(x, (1, 1)).item() == pytest.approx(2.5)

    def test_upsample_matches_half_pixel_oracle(self):
        x = torch.tensor([[[0.0, 1.0]]])  # 1x2 -> 1x4
        # output centres at (j + .5) / 2 - .5 in input coords, clamped to [0, 1]
        coords = np.clip((np.arange(4) + 0.5) / 2 - 0.5, 0, 1)
        np.testing.assert_allclose(resize_to_grid(x, (1, 4))[0, 0].numpy(), coords, atol=1e-7)

    def test_rejects_empty_target(self):
        with pytest.raises(ValueError):
            resize_to_grid(torch.zeros(1, 2, 2), (0, 2))


class TestFeatureMaps:
    def test_output_non_negative(self):
        torch.manual_seed(0)
        gsm = GlobalSupplement(8, 4)
        out = gsm.map_query(torch.randn(2, 8, 3, 3), (6, 6))
        assert out.shape == (2, 4, 6, 6)
        assert (out >= 0).all()

    def test_zero_input_is_bias_constant(self):
        torch.manual_seed(1)
        fm = FeatureMap(5, 3)
        out = fm(torch.zeros(1, 5, 4, 4))
        expected = torch.relu(fm.conv.bias).view(1, 3, 1, 1).expand(1, 3, 4, 4)
        assert torch.equal(out, expected)

    def test_maps_are_disjoint(self):
        torch.manual_seed(2)
        gsm = GlobalSupplement(4, 4)
        before = {k: v.clone() for k, v in gsm.query_map.state_dict().items()}
        opt = torch.optim.SGD(gsm.support_map.parameters(), lr=0.1)
        gsm.map_support(torch.randn(1, 4, 2, 2), (2, 2)).sum().backward()
        opt.step()
        for k, v in gsm.query_map.state_dict().items():
            assert torch.equal(v, before[k])
        assert gsm.query_map.conv.weight.grad is None

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            FeatureMap(4, 2)(torch.zeros(1, 3, 2, 2))

    def test_weight_gradient_matches_finite_differences(self):
        torch.manual_seed(3)
        fm = FeatureMap(4, 3).double()
        x = torch.randn(1, 4, 3, 3, dtype=torch.float64)
        fm(x).sum().backward()
        w = fm.conv.weight
        h = 1e-6
        for idx in [(0, 0, 0, 0), (1, 2, 0, 0), (2, 3, 0, 0)]:
            with torch.no_grad():
                w[idx] += h
                up = fm(x).sum().item()
                w[idx] -= 2 * h
                down = fm(x).sum().item()
                w[idx] += h
            fd = (up - down) / (2 * h)
            assert abs(fd - w.grad[idx].item()) <= 1e-3 * max(abs(fd), 1e-6)


class TestMaskedPooling:
    def test_full_mask_is_spatial_mean(self):
        f = torch.randn(3, 4, 4, dtype=torch.float64)
        p = masked_average_pool(f, torch.ones(4, 4))
        np.testing.assert_allclose(p.numpy(), f.mean(dim=(-2, -1)).numpy(), rtol=1e-12)

    def test_single_pixel(self):
        f = torch.randn(3, 4, 4)
        m = torch.zeros(4, 4)
        m[2, 1] = 1
        assert torch.equal(masked_average_pool(f, m), f[:, 2, 1])

    def test_hand_case(self):
        f = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
        m = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
        # (1 + 3) / 2
        assert masked_average_pool(f, m).item() == pytest.approx(2.0)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            masked_average_pool(torch.randn(2, 3, 3), torch.zeros(3, 3))

    def test_grid_mismatch_rejected(self):
        with pytest.raises(ValueError):
            masked_average_pool(torch.randn(2, 3, 3), torch.ones(4, 4))

    @pytest.mark.parametrize("seed", range(10))
    def test_bounded_by_masked_columns(self, seed):
        g = torch.Generator().manual_seed(seed)
        f = torch.randn(4, 5, 5, generator=g, dtype=torch.float64)
        m = (torch.rand(5, 5, generator=g) > 0.5).double()
        m[0, 0] = 1
        p = masked_average_pool(f, m)
        cols = f[:, m.bool()]
        assert (p >= cols.min(dim=1).values - 1e-12).all()
        assert (p <= cols.max(dim=1).values + 1e-12).all()

    @pytest.mark.parametrize("scale", [0.5, 2.0, 7.0])
    def test_linear_in_features(self, scale):
        f = torch.randn(4, 3, 3, dtype=torch.float64)
        m = torch.tensor([[1.0, 0, 1], [0, 1, 0], [0, 0, 1]], dtype=torch.float64)
        np.testing.assert_allclose(
            masked_average_pool(scale * f, m).numpy(), scale * masked_average_pool(f, m).numpy(), rtol=1e-12
        )

    def test_downsample_nearest(self):
        m = torch.zeros(8, 8)
        m[:4, :4] = 1
        d = downsample_mask(m, (2, 2))
        assert torch.equal(d, torch.tensor([[1.0, 0.0], [0.0, 0.0]]))


class TestKShot:
    def test_single(self):
        v = torch.tensor([1.0, 2.0])
        assert torch.equal(kshot_prototype([v]), v)

    def test_duplicates(self):
        v = torch.tensor([3.0, -1.0])
        assert torch.equal(kshot_prototype([v, v.clone()]), v)

    def test_arithmetic(self):
        out = kshot_prototype([torch.tensor([0.0, 2.0]), torch.tensor([2.0, 0.0])])
        assert torch.equal(out, torch.tensor([1.0, 1.0]))

    def test_empty(self):
        with pytest.raises(ValueError):
            kshot_prototype([])

    def test_prototype_is_mean_over_supports(self):
        torch.manual_seed(4)
        gsm = GlobalSupplement(4, 4)
        feats = torch.randn(1, 3, 4, 2, 2)
        masks = torch.ones(1, 3, 8, 8)
        proto = gsm.prototype(feats, masks, (4, 4))
        each = [masked_average_pool(gsm.map_support(feats[:, k], (4, 4)), torch.ones(1, 4, 4)) for k in range(3)]
        np.testing.assert_allclose(proto.detach().numpy(), kshot_prototype(each).detach().numpy(), rtol=1e-6)
