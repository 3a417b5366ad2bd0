"""
Tests for contraction, hash encoding and volume rendering.
"""

import pytest
import torch
from torch.func import functional_call

from app.models.radiance_field import HashEncoding, NerfModel
from app.services.errors import RenderError
from app.services.radiance_field import (
    construct_ray_warps,
    contract,
    hash_decay,
    hash_encode,
    render_image,
    render_ray,
    render_rays,
    render_weights,
    resample_edges,
    volume_render,
)


def _rays(n: int, dtype=torch.float64):
    generator = torch.Generator().manual_seed(1)
    origins = torch.tensor([3.0, 0.5, 1.0], dtype=dtype).expand(n, 3).clone()
    targets = torch.rand((n, 3), generator=generator, dtype=dtype) * 0.4 - 0.2
    directions = targets - origins
    return origins, directions / directions.norm(dim=-1, keepdim=True)


def test_contract_examples():
    assert torch.allclose(contract(torch.tensor([0.5, 0.0, 0.0])), torch.tensor([0.5, 0.0, 0.0]))
    assert torch.allclose(contract(torch.tensor([2.0, 0.0, 0.0])), torch.tensor([1.5, 0.0, 0.0]))
    far = torch.randn(100, 3, dtype=torch.float64)
    far = far / far.norm(dim=-1, keepdim=True) * 1e6
    norms = contract(far).norm(dim=-1)
    assert torch.all(norms > 1.999) and torch.all(norms < 2.0)


def test_contract_is_radially_one_lipschitz():
    direction = torch.randn(50, 3, dtype=torch.float64)
    direction = direction / direction.norm(dim=-1, keepdim=True)
    r1 = 1.0 + torch.rand(50, 1, dtype=torch.float64) * 10
    r2 = r1 + torch.rand(50, 1, dtype=torch.float64) * 5
    gap = (contract(direction * r2) - contract(direction * r1)).norm(dim=-1)
    assert torch.all(gap <= (r2 - r1)[:, 0] + 1e-12)


@pytest.mark.parametrize("table_size", [1024, 64])
def test_hash_encode_on_a_vertex_returns_the_entry(table_size):
    """Dense (1024) and hashed (64) levels both interpolate with weight 1 on a vertex."""
    encoding = HashEncoding(levels=2, table_size=table_size, features=2, base_resolution=4, max_resolution=8)
    assert encoding.resolutions == [4, 8]
    with torch.no_grad():
        encoding.tables.copy_(torch.randn_like(encoding.tables))
    # unit point (1/4, 1/2, 3/4) is a vertex at resolution 4 and 8
    features = hash_encode(torch.tensor([[-1.0, 0.0, 1.0]]), encoding)[0]
    unit = torch.tensor([0.25, 0.5, 0.75])
    expected = []
    for level, resolution in enumerate(encoding.resolutions):
        corner = torch.round(unit * resolution).long()
        expected.append(encoding.tables[level][encoding.grid_index(level, corner)])
    assert torch.allclose(features, torch.cat(expected))


def test_hash_encode_zero_tables():
    encoding = HashEncoding(levels=3, table_size=256, features=4, base_resolution=4, max_resolution=32)
    with torch.no_grad():
        encoding.tables.zero_()
    features = hash_encode(torch.rand(10, 3) * 4 - 2, encoding)
    assert features.shape == (10, 12)
    assert torch.count_nonzero(features) == 0


def test_hash_encode_gradients_match_finite_differences():
    encoding = HashEncoding(levels=2, table_size=64, features=2, base_resolution=4, max_resolution=8).double()
    with torch.no_grad():
        encoding.tables.copy_(torch.randn_like(encoding.tables))
    points = (torch.rand(20, 3, dtype=torch.float64) * 3.6 - 1.8).requires_grad_(True)
    tables = encoding.tables.detach().clone().requires_grad_(True)

    def encode(p, t):
        return hash_encode(p, _Bound(encoding, t))

    assert torch.autograd.gradcheck(encode, (points, tables), eps=1e-6, atol=1e-6, rtol=1e-4)


class _Bound(torch.nn.Module):
    """Calls an encoding with substituted tables."""

    def __init__(self, encoding: HashEncoding, tables: torch.Tensor):
        super().__init__()
        self.encoding = encoding
        self.tables = tables

    def forward(self, unit_points):
        return functional_call(self.encoding, {"tables": self.tables}, (unit_points,))


def test_render_weights_match_formula():
    sigma = torch.tensor([[0.5, 1.0, 2.0]], dtype=torch.float64)
    edges = torch.tensor([[1.0, 1.5, 2.5, 3.0]], dtype=torch.float64)
    weights = render_weights(sigma, edges)[0]
    deltas = torch.tensor([0.5, 1.0, 0.5], dtype=torch.float64)
    optical = sigma[0] * deltas
    expected = torch.stack(
        [
            1 - torch.exp(-optical[0]),
            torch.exp(-optical[0]) * (1 - torch.exp(-optical[1])),
            torch.exp(-optical[0] - optical[1]) * (1 - torch.exp(-optical[2])),
        ]
    )
    assert torch.allclose(weights, expected)


def test_non_finite_density_names_the_sample():
    sigma = torch.tensor([[0.1, 0.2, 0.3], [0.1, float("nan"), 0.3]])
    edges = torch.linspace(1.0, 2.0, 4).expand(2, 4)
    with pytest.raises(RenderError) as excinfo:
        render_weights(sigma, edges)
    assert excinfo.value.details == {"ray": 1, "sample": 1}


def test_opaque_slab_takes_its_colour_and_midpoint():
    sigma = torch.tensor([[0.0, 1e6, 0.0]], dtype=torch.float64)
    edges = torch.tensor([[1.0, 2.0, 3.0, 4.0]], dtype=torch.float64)
    rgb = torch.tensor([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]], dtype=torch.float64)
    color, depth, weights = volume_render(sigma, rgb, edges, torch.tensor([0.5, 0.5, 0.5], dtype=torch.float64), 20.0)
    assert torch.allclose(color[0], torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64))
    assert depth[0].item() == pytest.approx(2.5)
    assert weights.sum().item() == pytest.approx(1.0)


def test_splitting_an_interval_leaves_colour_and_mass_unchanged():
    """Piecewise constant density and colour: one bin or two halves render the same."""
    background = torch.tensor([0.2, 0.3, 0.4], dtype=torch.float64)
    rgb = torch.tensor([[[0.9, 0.1, 0.1], [0.1, 0.8, 0.3]]], dtype=torch.float64)
    whole = volume_render(
        torch.tensor([[0.3, 0.7]], dtype=torch.float64),
        rgb,
        torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64),
        background,
        20.0,
    )
    split = volume_render(
        torch.tensor([[0.3, 0.7, 0.7]], dtype=torch.float64),
        torch.cat([rgb, rgb[:, 1:]], dim=1),
        torch.tensor([[1.0, 2.0, 2.5, 3.0]], dtype=torch.float64),
        background,
        20.0,
    )
    assert torch.allclose(whole[0], split[0], atol=1e-6)
    assert torch.allclose(whole[2].sum(), split[2].sum(), atol=1e-6)


def test_zero_density_renders_background_at_far(tiny_field):
    model = NerfModel(tiny_field).double()
    with torch.no_grad():
        model.field.density_mlp[-1].weight.zero_()
        model.field.density_mlp[-1].bias.fill_(-1e4)
    origins, directions = _rays(1)
    out = render_ray(model, origins[0], directions[0])
    assert torch.allclose(out.color, model.background)
    assert out.depth.item() == pytest.approx(tiny_field.far)
    assert out.histogram.weights.sum().item() == 0.0


def test_histograms_are_valid(tiny_field):
    model = NerfModel(tiny_field).double()
    origins, directions = _rays(16)
    out = render_rays(model, origins, directions, generator=torch.Generator().manual_seed(0))
    for histogram in [out.histogram] + out.proposal_histograms:
        assert torch.all(histogram.edges[..., 1:] > histogram.edges[..., :-1])
        assert torch.all(histogram.weights >= 0)
        assert torch.all(histogram.weights.sum(dim=-1) <= 1 + 1e-6)
    assert out.histogram.weights.shape == (16, tiny_field.samples[2])
    assert [h.weights.shape[-1] for h in out.proposal_histograms] == list(tiny_field.samples[:2])


def test_resample_edges_keep_endpoints_and_order():
    edges = torch.linspace(0, 1, 9, dtype=torch.float64).expand(4, 9)
    weights = torch.rand(4, 8, dtype=torch.float64)
    weights[0] = 0.0
    out = resample_edges(edges, weights, 16, floor=0.01, generator=torch.Generator().manual_seed(2))
    assert out.shape == (4, 17)
    assert torch.all(out[:, 0] == 0.0) and torch.all(out[:, -1] == 1.0)
    assert torch.all(out[:, 1:] > out[:, :-1])


def test_ray_warps_are_inverse():
    t_to_s, s_to_t = construct_ray_warps(0.2, 20.0)
    s = torch.linspace(0, 1, 11, dtype=torch.float64)
    assert torch.allclose(t_to_s(s_to_t(s)), s)
    assert s_to_t(torch.tensor(0.0)).item() == pytest.approx(0.2)
    assert s_to_t(torch.tensor(1.0)).item() == pytest.approx(20.0)


def test_render_ray_requires_unit_direction(tiny_field):
    model = NerfModel(tiny_field)
    with pytest.raises(RenderError):
        render_ray(model, torch.zeros(3), torch.tensor([0.0, 0.0, 2.0]))


def test_render_gradients_match_finite_differences(tiny_field):
    """Colour and depth w.r.t. the density head, with proposal resampling held fixed."""
    model = NerfModel(tiny_field).double()
    origins, directions = _rays(3)
    bias = model.field.density_mlp[-1].bias.detach().clone().requires_grad_(True)

    def render(b):
        with PatchedBias(model, b):
            out = render_rays(model, origins, directions)
        return out.color, out.depth

    assert torch.autograd.gradcheck(render, (bias,), eps=1e-6, atol=1e-6, rtol=1e-4)


class PatchedBias:
    """Temporarily replaces the density head bias with a plain tensor."""

    def __init__(self, model: NerfModel, bias: torch.Tensor):
        self.layer = model.field.density_mlp[-1]
        self.bias = bias

    def __enter__(self):
        self.saved = self.layer.bias
        del self.layer.bias
        self.layer.bias = self.bias

    def __exit__(self, *exc):
        del self.layer.bias
        self.layer.bias = self.saved


def test_hash_decay(tiny_field):
    model = NerfModel(tiny_field)
    tables = model.hash_tables()
    with torch.no_grad():
        for table in tables:
            table.zero_()
    assert hash_decay(model).item() == 0.0
    total = sum(t.numel() for t in tables)
    with torch.no_grad():
        tables[1][0, 3, 1] = 3.0
    assert hash_decay(model).item() == pytest.approx(9.0 / total)
    with torch.no_grad():
        for table in tables:
            table.copy_(torch.randn_like(table))
    brute = sum(float((t.double() ** 2).sum()) for t in tables) / total
    assert hash_decay(model).item() == pytest.approx(brute, rel=1e-5)


def test_render_image_shapes(tiny_field, camera):
    out = render_image(NerfModel(tiny_field), camera, chunk=300)
    assert out["rgb"].shape == (32, 32, 3)
    assert out["depth"].shape == (32, 32)
    assert out["rgb"].min() >= 0 and out["rgb"].max() <= 1
