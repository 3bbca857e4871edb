import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from shapepoint.backbone import FeaturePyramid, UNet3D
from shapepoint.errors import ConfigurationError, GeometryError, ShapeError
from shapepoint.pointgen import (NEIGHBORHOOD_OFFSETS, PointInitializer,
                                 PointNetConfig, PointNetwork, PointRefiner,
                                 TwoBranch, feature_index)


def coded_feature(dims=(4, 4, 4), channels=1):
    """X_F whose value at (c, z, y, x) encodes the full index uniquely."""
    d, h, w = dims
    x = torch.zeros(channels, d, h, w, dtype=torch.float64)
    for c in range(channels):
        for z in range(d):
            for y in range(h):
                for xx in range(w):
                    x[c, z, y, xx] = 10000 * c + 100 * z + 10 * y + xx + 1
    return x


def make_pyramid(coarse=4, fine=2, dims=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return FeaturePyramid(
        x_c=torch.rand(coarse, dims // 8, dims // 8, dims // 8, generator=g),
        x_f=torch.rand(fine, dims, dims, dims, generator=g),
    )


# ---------------------------------------------------------------------------
# Config contracts
# ---------------------------------------------------------------------------


def test_config_rejects_bad_values():
    with pytest.raises(ConfigurationError):
        PointNetConfig(n_points=0)
    with pytest.raises(ConfigurationError):
        PointNetConfig(gather="cubic")


def test_offsets_are_lexicographic():
    assert NEIGHBORHOOD_OFFSETS.shape == (27, 3)
    assert NEIGHBORHOOD_OFFSETS[0].tolist() == [-1, -1, -1]
    assert NEIGHBORHOOD_OFFSETS[13].tolist() == [0, 0, 0]
    assert NEIGHBORHOOD_OFFSETS[26].tolist() == [1, 1, 1]


# ---------------------------------------------------------------------------
# feature_index
# ---------------------------------------------------------------------------


def test_feature_index_rounds_to_nearest_voxel():
    x = coded_feature()
    # p*dims = 1.496 -> voxel 1; p*dims = 2.004 -> voxel 2
    pts = torch.tensor([[0.374, 0.5, 0.25], [0.501, 0.5, 0.25]], dtype=torch.float64)
    feats = feature_index(x, pts)
    assert feats.shape == (2, 27)
    assert feats[0, 13].item() == x[0, 1, 2, 1].item()
    assert feats[1, 13].item() == x[0, 2, 2, 1].item()


def test_feature_index_interior_neighborhood_complete():
    x = coded_feature()
    feats = feature_index(x, torch.tensor([[0.5, 0.5, 0.5]], dtype=torch.float64))
    for k, (dz, dy, dx) in enumerate(NEIGHBORHOOD_OFFSETS.tolist()):
        assert feats[0, k].item() == x[0, 2 + dz, 2 + dy, 2 + dx].item()


def test_feature_index_corner_zero_padding():
    x = torch.ones(1, 4, 4, 4, dtype=torch.float64)
    feats = feature_index(x, torch.tensor([[0.0, 0.0, 0.0]], dtype=torch.float64))
    # at a corner only the 2x2x2 in-bounds cells survive; 19 cells are padding
    assert int((feats[0] == 1.0).sum()) == 8
    assert int((feats[0] == 0.0).sum()) == 19


def test_feature_index_clamps_upper_edge():
    x = coded_feature()
    feats = feature_index(x, torch.tensor([[1.0, 1.0, 1.0]], dtype=torch.float64))
    assert feats[0, 13].item() == x[0, 3, 3, 3].item()


def test_feature_index_channel_major_flatten():
    x = coded_feature(channels=2)
    feats = feature_index(x, torch.tensor([[0.5, 0.5, 0.5]], dtype=torch.float64))
    assert feats.shape == (1, 54)
    assert feats[0, 13].item() == x[0, 2, 2, 2].item()
    assert feats[0, 27 + 13].item() == x[1, 2, 2, 2].item()


def test_feature_index_constant_field():
    x = torch.ones(4, 8, 8, 8)
    feats = feature_index(x, torch.tensor([[0.5, 0.5, 0.5]]))
    assert feats.shape == (1, 108)
    assert torch.equal(feats, torch.ones(1, 108))


def test_feature_index_rejects_out_of_range_points():
    x = torch.ones(1, 4, 4, 4)
    with pytest.raises(GeometryError):
        feature_index(x, torch.tensor([[1.2, 0.5, 0.5]]))
    with pytest.raises(GeometryError):
        feature_index(x, torch.tensor([[-0.1, 0.5, 0.5]]))


def test_feature_index_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        feature_index(torch.ones(4, 4, 4), torch.ones(1, 3) * 0.5)
    with pytest.raises(ShapeError):
        feature_index(torch.ones(1, 4, 4, 4), torch.tensor([[0.5, 0.5]]))
    with pytest.raises(ConfigurationError):
        feature_index(torch.ones(1, 4, 4, 4), torch.tensor([[0.5, 0.5, 0.5]]),
                      gather="bicubic")


def test_feature_index_no_coordinate_gradient_in_nearest_mode():
    x = torch.rand(2, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    pts = torch.tensor([[0.4, 0.5, 0.6]], dtype=torch.float64, requires_grad=True)
    feature_index(x, pts).sum().backward()
    assert x.grad is not None
    assert pts.grad is None


def test_feature_index_feature_gradient_hits_gathered_cells_only():
    x = torch.rand(1, 4, 4, 4, dtype=torch.float64, requires_grad=True)
    pts = torch.tensor([[0.5, 0.5, 0.5]], dtype=torch.float64)
    feature_index(x, pts).sum().backward()
    grad = x.grad[0]
    nonzero = {tuple(ix) for ix in torch.nonzero(grad).tolist()}
    expected = {(2 + dz, 2 + dy, 2 + dx) for dz, dy, dx in NEIGHBORHOOD_OFFSETS.tolist()}
    assert nonzero == expected


def test_trilinear_matches_nearest_on_grid_points():
    x = torch.rand(2, 4, 4, 4, dtype=torch.float64)
    # p*dims integral -> both modes sample voxel centers exactly
    pts = torch.tensor([[0.25, 0.5, 0.75], [0.5, 0.25, 0.25]], dtype=torch.float64)
    near = feature_index(x, pts, gather="nearest")
    tri = feature_index(x, pts, gather="trilinear")
    assert torch.allclose(near, tri, atol=1e-12)


def test_trilinear_interpolates_between_centers():
    x = torch.zeros(1, 4, 4, 4, dtype=torch.float64)
    x[0, 2, 2, 2] = 1.0
    x[0, 2, 2, 3] = 3.0
    # halfway between voxels (2,2,2) and (2,2,3) along x
    feats = feature_index(x, torch.tensor([[0.5, 0.5, 0.625]], dtype=torch.float64),
                          gather="trilinear")
    center = feats[0, 13].item()
    assert center == pytest.approx(2.0, abs=1e-12)


def test_trilinear_passes_coordinate_gradients():
    x = torch.rand(1, 4, 4, 4, dtype=torch.float64)
    pts = torch.tensor([[0.4, 0.55, 0.6]], dtype=torch.float64, requires_grad=True)
    feature_index(x, pts, gather="trilinear").sum().backward()
    assert pts.grad is not None and not torch.equal(pts.grad, torch.zeros_like(pts))


@given(st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_feature_index_deterministic_and_finite(seed):
    rng = np.random.default_rng(seed)
    x = torch.tensor(rng.standard_normal((2, 4, 4, 4)))
    pts = torch.tensor(rng.random((5, 3)))
    a = feature_index(x, pts)
    b = feature_index(x, pts)
    assert torch.equal(a, b)
    assert torch.isfinite(a).all()


# ---------------------------------------------------------------------------
# Initializer / refiners / full network
# ---------------------------------------------------------------------------


def test_initializer_output_contract():
    torch.manual_seed(0)
    init = PointInitializer(4, PointNetConfig(n_points=32))
    pts = init(torch.rand(4, 2, 2, 2))
    assert pts.shape == (32, 3)
    assert float(pts.min()) > 0.0 and float(pts.max()) < 1.0


def test_initializer_zero_feature_gives_constant_rows():
    torch.manual_seed(0)
    init = PointInitializer(4, PointNetConfig(n_points=16))
    pts = init(torch.zeros(4, 2, 2, 2))
    # pooled vector is zero regardless of spatial content -> rows fixed by biases
    assert torch.equal(pts, init(torch.zeros(4, 4, 4, 4)))


def test_refiner_identity_at_init():
    torch.manual_seed(1)
    refiner = PointRefiner(2, PointNetConfig(n_points=8))
    x_f = torch.rand(2, 8, 8, 8)
    pts = torch.rand(8, 3)
    assert torch.equal(refiner(pts, x_f), pts)


def test_refiner_clamps_large_residuals():
    torch.manual_seed(2)
    refiner = PointRefiner(1, PointNetConfig(n_points=4))
    with torch.no_grad():
        refiner.net[-1].bias.fill_(50.0)
    out = refiner(torch.rand(4, 3), torch.rand(1, 8, 8, 8))
    assert torch.equal(out, torch.ones(4, 3))
    with torch.no_grad():
        refiner.net[-1].bias.fill_(-50.0)
    out = refiner(torch.rand(4, 3), torch.rand(1, 8, 8, 8))
    assert torch.equal(out, torch.zeros(4, 3))


def test_refiner_per_point_permutation_equivariance():
    torch.manual_seed(3)
    refiner = PointRefiner(2, PointNetConfig(n_points=6))
    with torch.no_grad():  # randomize away the zero init
        for p in refiner.parameters():
            p.add_(torch.randn_like(p) * 0.3)
    x_f = torch.rand(2, 8, 8, 8)
    pts = torch.rand(6, 3)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    assert torch.allclose(refiner(pts[perm], x_f), refiner(pts, x_f)[perm])


def test_point_network_identity_at_init_equals_initializer():
    torch.manual_seed(4)
    net = PointNetwork(coarse_channels=4, fine_channels=2,
                       config=PointNetConfig(n_points=16))
    pyr = make_pyramid(coarse=4, fine=2)
    assert torch.equal(net(pyr), net.initializer(pyr.x_c))


def test_point_network_moves_after_training_signal():
    torch.manual_seed(5)
    net = PointNetwork(4, 2, PointNetConfig(n_points=16))
    pyr = make_pyramid(coarse=4, fine=2)
    with torch.no_grad():
        net.refine1.net[-1].weight.add_(0.1)
    assert not torch.equal(net(pyr), net.initializer(pyr.x_c))


def test_point_network_backprop_reaches_backbone_input():
    torch.manual_seed(6)
    backbone = UNet3D()
    net = PointNetwork(backbone.coarse_channels, backbone.fine_channels,
                       PointNetConfig(n_points=8))
    volume = torch.rand(16, 16, 16, requires_grad=True)
    pyramid, _ = backbone(volume)
    net(pyramid).sum().backward()
    assert volume.grad is not None and float(volume.grad.abs().sum()) > 0.0


# ---------------------------------------------------------------------------
# Two-branch baseline
# ---------------------------------------------------------------------------


def test_two_branch_rejects_odd_n_points():
    with pytest.raises(ConfigurationError, match="even"):
        TwoBranch(4, PointNetConfig(n_points=7))


def test_two_branch_output_contract():
    torch.manual_seed(7)
    model = TwoBranch(4, PointNetConfig(n_points=32))
    pts = model(make_pyramid(coarse=4, fine=2))
    assert pts.shape == (32, 3)
    assert float(pts.min()) > 0.0 and float(pts.max()) < 1.0


def test_two_branch_ignores_fine_feature():
    torch.manual_seed(8)
    model = TwoBranch(4, PointNetConfig(n_points=32))
    pyr_a = make_pyramid(coarse=4, fine=2, seed=1)
    pyr_b = FeaturePyramid(x_c=pyr_a.x_c.clone(), x_f=torch.rand_like(pyr_a.x_f))
    assert torch.equal(model(pyr_a), model(pyr_b))


def test_two_branch_needs_enough_grid_cells():
    torch.manual_seed(9)
    model = TwoBranch(4, PointNetConfig(n_points=4096))
    with pytest.raises(ConfigurationError, match="cells"):
        model(make_pyramid(coarse=4, fine=2))  # 2^3 coarse -> 8^3*3 = 1536 cells


def test_two_branch_deterministic():
    torch.manual_seed(10)
    model = TwoBranch(4, PointNetConfig(n_points=16))
    pyr = make_pyramid(coarse=4, fine=2)
    assert torch.equal(model(pyr), model(pyr))
