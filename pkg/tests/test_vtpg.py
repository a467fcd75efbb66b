import numpy as np
import pytest
import torch

from usd_fss.layers import grid_positional_encoding
from usd_fss.vtpg import PromptGenerator


@pytest.fixture
def gen():
    torch.manual_seed(0)
    return PromptGenerator(text_dim=12, dim=8, tokens=4, heads=2)


class TestExpandText:
    def test_zero_offsets_identical_rows(self, gen):
        with torch.no_grad():
            gen.offsets.zero_()
        rows = gen.expand_text(torch.randn(12))
        assert rows.shape == (4, 8)
        for r in rows[1:]:
            assert torch.equal(r, rows[0])

    def test_shape(self, gen):
        assert gen.expand_text(torch.randn(3, 12)).shape == (3, 4, 8)

    def test_distinct_texts(self, gen):
        a = gen.expand_text(torch.randn(12, generator=torch.Generator().manual_seed(1)))
        b = gen.expand_text(torch.randn(12, generator=torch.Generator().manual_seed(2)))
        assert not torch.allclose(a, b)

    def test_text_path_disabled(self):
        g = PromptGenerator(12, 8, 4, 2, use_text=False)
        assert g.fc is None
        with pytest.raises(RuntimeError):
            g.expand_text(torch.randn(12))


class TestGeneratePrompt:
    def test_shape_and_rows(self, gen):
        tokens = gen.expand_text(torch.randn(2, 12))
        visual = torch.randn(2, 9, 8)
        out, attn = gen.generate_prompt(tokens, visual, grid_positional_encoding(3, 3, 8))
        assert out.shape == (2, 4, 8)
        np.testing.assert_allclose(attn.detach().double().sum(-1).numpy(), 1.0, atol=1e-5)

    def test_permutation_invariance(self, gen):
        g = torch.Generator().manual_seed(3)
        tokens = gen.expand_text(torch.randn(1, 12, generator=g))
        visual = torch.randn(1, 16, 8, generator=g)
        pos = grid_positional_encoding(4, 4, 8)
        perm = torch.from_numpy(np.random.default_rng(0).permutation(16))
        a, _ = gen.generate_prompt(tokens, visual, pos)
        b, _ = gen.generate_prompt(tokens, visual[:, perm], pos[perm])
        np.testing.assert_allclose(a.detach().numpy(), b.detach().numpy(), atol=1e-5)

    def test_dim_mismatch(self, gen):
        with pytest.raises(ValueError):
            gen.generate_prompt(torch.randn(1, 4, 8), torch.randn(1, 9, 6), torch.zeros(9, 6))

    def test_pure(self, gen):
        text, visual = torch.randn(2, 12), torch.randn(2, 8, 3, 3)
        assert torch.equal(gen(text, visual), gen(text, visual))

    def test_visual_only_tokens(self):
        torch.manual_seed(1)
        g = PromptGenerator(12, 8, 4, 2, use_text=False)
        out = g(None, torch.randn(3, 8, 2, 2))
        assert out.shape == (3, 4, 8)


class TestTwoPaths:
    def test_disjoint_parameters(self):
        torch.manual_seed(0)
        a, b = PromptGenerator(12, 8, 4, 2), PromptGenerator(12, 8, 4, 2)
        ids_a = {id(p) for p in a.parameters()}
        assert not ids_a & {id(p) for p in b.parameters()}
        before = {k: v.clone() for k, v in b.state_dict().items()}
        opt = torch.optim.SGD(list(a.parameters()) + list(b.parameters()), lr=0.1)
        a(torch.randn(1, 12), torch.randn(1, 8, 2, 2)).sum().backward()
        opt.step()
        for k, v in b.state_dict().items():
            assert torch.equal(v, before[k])
