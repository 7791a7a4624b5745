import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvfnet import tensor as T
from cvfnet.errors import ConfigurationError, ContractError
from cvfnet.gradcheck import check_gradients, check_parameter_gradients
from cvfnet.pillars import (BEVBackbone, PillarChannelMLP, VoxelGridConfig, compute_voxel_index,
                            plan_pillars, scatter_to_pillars, voxel_indices)
from cvfnet.tensor import Tensor

KITTI = VoxelGridConfig()
SMALL = VoxelGridConfig(x_range=(0.0, 3.2), y_range=(-1.6, 1.6), z_range=(-2.0, 2.0), voxel_size=(0.4, 0.4, 1.0))


def test_kitti_grid_dimensions():
    assert (KITTI.H, KITTI.W, KITTI.D) == (496, 432, 20)


def test_voxel_index_examples():
    assert compute_voxel_index((34.56, 0.0, -1.0), KITTI) == (216, 248, 10)
    assert compute_voxel_index((0.0, -39.68, -3.0), KITTI) == (0, 0, 0)
    assert compute_voxel_index((70.0, 0.0, 0.0), KITTI) is None


def test_grid_upper_bounds_are_exclusive():
    assert compute_voxel_index((69.12, 0.0, 0.0), KITTI) is None
    assert compute_voxel_index((10.0, 39.68, 0.0), KITTI) is None
    assert compute_voxel_index((10.0, 0.0, 1.0), KITTI) is None


def test_grid_must_tile_exactly():
    with pytest.raises(ConfigurationError):
        VoxelGridConfig(x_range=(0.0, 1.0), voxel_size=(0.3, 0.16, 0.2))


def random_points(n, seed, cfg=SMALL, margin=0.5):
    r = np.random.default_rng(seed)
    lo = np.array([cfg.x_range[0], cfg.y_range[0], cfg.z_range[0]]) - margin
    hi = np.array([cfg.x_range[1], cfg.y_range[1], cfg.z_range[1]]) + margin
    return r.uniform(lo, hi, size=(n, 3))


def scatter_oracle(feats, xyz, cfg):
    """Dict voxel -> last point index that lands in it."""
    table = {}
    for i, p in enumerate(xyz):
        v = compute_voxel_index(p, cfg)
        if v is not None:
            table[v] = i
    dense = np.zeros((cfg.H, cfg.W, cfg.D, feats.shape[1]))
    for (ix, iy, iz), i in table.items():
        dense[iy, ix, iz] = feats[i]
    return table, dense


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 300), st.integers(0, 10_000))
def test_scatter_matches_hash_map_oracle(n, seed):
    xyz = random_points(n, seed)
    feats = np.random.default_rng(seed + 1).standard_normal((n, 2))
    vol = scatter_to_pillars(Tensor(feats), xyz, SMALL)
    table, dense = scatter_oracle(feats, xyz, SMALL)
    got = vol.features.data.reshape(SMALL.H, SMALL.W, SMALL.D, 2)
    np.testing.assert_array_equal(got, dense)
    expect = {(iy * SMALL.W + ix) * SMALL.D + iz: i for (ix, iy, iz), i in table.items()}
    assert vol.winners() == expect
    occ = {(iy, ix) for (ix, iy, _) in table}
    assert {(int(a), int(b)) for a, b in zip(*np.nonzero(vol.occupancy))} == occ


def test_occupancy_equals_set_of_point_columns():
    xyz = random_points(500, 3)
    plan = plan_pillars(xyz, SMALL)
    ix, iy, _, ok = voxel_indices(xyz, SMALL)
    cells = {(int(b), int(a)) for a, b, k in zip(ix, iy, ok) if k}
    assert {(int(a), int(b)) for a, b in zip(*np.nonzero(plan.occupancy))} == cells


def test_scatter_gradient_reaches_winners_only():
    xyz = random_points(80, 4)
    feats = Tensor(np.random.default_rng(0).standard_normal((80, 3)), requires_grad=True)
    vol = scatter_to_pillars(feats, xyz, SMALL)
    T.backward(T.sum(vol.column_features))
    win = np.zeros(80, dtype=bool)
    win[vol.winner_index] = True
    assert np.all(feats.grad[win] == 1.0)
    assert np.all(feats.grad[~win] == 0.0)


def test_scatter_gradcheck():
    xyz = random_points(30, 5, margin=0.0)
    errs = check_gradients(lambda f: scatter_to_pillars(f, xyz, SMALL).column_features,
                           [np.random.default_rng(1).standard_normal((30, 2))])
    assert max(errs) < 1e-4


def test_scatter_rejects_row_mismatch():
    with pytest.raises(ContractError):
        scatter_to_pillars(Tensor(np.zeros((3, 2))), np.zeros((4, 3)), SMALL)


def test_channel_mlp_equals_1x1_convs():
    xyz = random_points(120, 6)
    c = 2
    feats = np.random.default_rng(2).standard_normal((120, c))
    vol = scatter_to_pillars(Tensor(feats), xyz, SMALL)
    mlp = PillarChannelMLP(SMALL.D * c, (6, 5), np.random.default_rng(3))
    got = mlp(vol).data
    # dense (D*C, H, W) map through the same weights as 1x1 convolutions
    x = vol.features.data.T.reshape(SMALL.D * c, SMALL.H, SMALL.W)
    for layer in mlp.mlp.layers:
        k = layer.weight.data.T[:, :, None, None]
        x = T.relu(T.conv2d(Tensor(x), Tensor(k), layer.bias)).data
    np.testing.assert_allclose(got, x, atol=1e-12)


def test_channel_mlp_empty_volume_is_bias_only():
    vol = scatter_to_pillars(Tensor(np.zeros((0, 2))), np.zeros((0, 3)), SMALL)
    mlp = PillarChannelMLP(SMALL.D * 2, (4,), np.random.default_rng(0))
    out = mlp(vol).data
    assert out.shape == (4, SMALL.H, SMALL.W)
    expect = np.maximum(mlp.mlp.layers[0].bias.data, 0)[:, None, None]
    np.testing.assert_allclose(out, np.broadcast_to(expect, out.shape))


def test_channel_mlp_gradcheck():
    xyz = random_points(25, 7, margin=0.0)
    c = 2
    mlp = PillarChannelMLP(SMALL.D * c, (3,), np.random.default_rng(4), dtype=np.float64)
    # zero-initialised biases would put empty cells exactly on the relu kink
    mlp.mlp.layers[0].bias.data[:] = [0.3, -0.2, 0.5]
    feats = Tensor(np.random.default_rng(5).standard_normal((25, c)), requires_grad=True)
    errs = check_parameter_gradients(lambda: mlp(scatter_to_pillars(feats, xyz, SMALL)),
                                     [feats] + mlp.parameters())
    assert max(errs) < 1e-4


def test_backbone_output_shape_kitti():
    bb = BEVBackbone(4, (4, 4, 4), rng=np.random.default_rng(0))
    out = bb(Tensor(np.zeros((4, KITTI.H, KITTI.W))))
    assert out.shape == (12, 248, 216)


def test_backbone_rejects_indivisible_grid():
    bb = BEVBackbone(1, (2, 2, 2), rng=np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        bb(Tensor(np.zeros((1, 12, 16))))


def test_backbone_gradcheck():
    bb = BEVBackbone(2, (2, 3, 2), rng=np.random.default_rng(1))
    errs = check_gradients(lambda x: bb(x), [np.random.default_rng(2).standard_normal((2, 8, 16))])
    assert max(errs) < 1e-4
