"""Encoder tensor accounting, preprocessing, and forward behavior."""

import math

import numpy as np
import pytest

from coopbev.autodiff import ParamStore
from coopbev.encoders import (BEVFeature, EncoderError, EncoderParams,
                              adapter_channels, block_widths, depth_bin_targets,
                              depth_splat_cells, encode_agent, encoder_shapes,
                              preprocess_observation, register_encoder)
from coopbev.geometry import Pose
from coopbev.scene import (ModalityKind, N_RAYS, N_SLABS, Observation,
                           generate_scene, render_observation)

from oracles import encoder_tensor_sizes

WR = 51.2
ALL_MODALITIES = ["pillar", "voxel", "depth", "bev"]


# ---------------------------------------------------------------------------
# tensor accounting

@pytest.mark.parametrize("modality", ALL_MODALITIES)
def test_encoder_shapes_match_independent_enumeration(modality):
    shapes = encoder_shapes(modality)
    sizes = {name: int(np.prod(shape)) for name, shape in shapes.items()}
    assert sizes == encoder_tensor_sizes(modality)


@pytest.mark.parametrize("modality,total",
                         [("pillar", 71552), ("bev", 71552),
                          ("voxel", 71984), ("depth", 72608)])
def test_encoder_parameter_totals(modality, total):
    shapes = encoder_shapes(modality)
    assert sum(int(np.prod(s)) for s in shapes.values()) == total


def test_block_widths_and_adapter_channels():
    assert block_widths(16) == (32, 64)
    assert adapter_channels() == {"block1": 32, "block2": 64, "post": 32}


def test_register_encoder_prefixes_and_determinism():
    s1, s2 = ParamStore(), ParamStore()
    register_encoder(s1, 2, "voxel", seed=9)
    register_encoder(s2, 2, "voxel", seed=9)
    names = set(s1.names())
    assert names == {f"enc/2/{rel}" for rel in encoder_shapes("voxel")}
    for n in names:
        np.testing.assert_array_equal(s1[n], s2[n])
    s3 = ParamStore()
    register_encoder(s3, 2, "voxel", seed=10)
    assert any(not np.array_equal(s1[n], s3[n]) for n in names)


# ---------------------------------------------------------------------------
# preprocessing

def _obs(modality, seed=5):
    mods = ["pillar", "voxel", "depth", "bev"]
    sc = generate_scene(seed, 4, 8, WR, mods)
    return render_observation(sc, mods.index(modality))


def test_preprocess_pillar_is_log_counts():
    obs = _obs("pillar")
    arrays = preprocess_observation(obs, WR)
    np.testing.assert_array_equal(arrays["grid"],
                                  np.log1p(obs.payload["counts"])[..., None])


def test_preprocess_voxel_mask_pyramid():
    obs = _obs("voxel")
    arrays = preprocess_observation(obs, WR)
    assert arrays["grid"].shape == (48, 48, N_SLABS)
    m0, m1, m2 = arrays["mask0"], arrays["mask1"], arrays["mask2"]
    assert m0.shape == (48, 48, 1) and m1.shape == (24, 24, 1) \
        and m2.shape == (12, 12, 1)
    # each level is the 2x2 max of the previous one
    np.testing.assert_array_equal(
        m1, m0.reshape(24, 2, 24, 2, 1).max(axis=(1, 3)))
    np.testing.assert_array_equal(
        m2, m1.reshape(12, 2, 12, 2, 1).max(axis=(1, 3)))


def test_preprocess_depth_ray_features():
    obs = _obs("depth")
    arrays = preprocess_observation(obs, WR)
    rays = arrays["rays"]
    assert rays.shape == (N_RAYS, 4)
    ranges = obs.payload["ranges"]
    finite = np.isfinite(ranges)
    np.testing.assert_array_equal(rays[:, 1], finite.astype(np.float64))
    assert (rays[~finite, 0] == 1.0).all()  # misses clamp to max range
    assert rays[finite, 0].max() <= 1.0 and rays[finite, 0].min() >= 0.0
    phis = -math.pi + 2 * math.pi * np.arange(N_RAYS) / N_RAYS
    np.testing.assert_allclose(rays[:, 2], np.sin(phis), atol=1e-12)
    np.testing.assert_allclose(rays[:, 3], np.cos(phis), atol=1e-12)


def test_depth_bin_targets_edges():
    bins, mask = depth_bin_targets(np.array([0.0, 3.1, 51.2, np.inf]), WR,
                                   depth_bins=16)
    # bin width 3.2: 0 -> bin 0, 3.1 -> bin 0, max range clips to last bin
    np.testing.assert_array_equal(bins, [0, 0, 15, 0])
    np.testing.assert_array_equal(mask, [1.0, 1.0, 1.0, 0.0])


def test_depth_splat_cells_range_and_cache():
    cells = depth_splat_cells(WR, 48, 16)
    assert cells.shape == (N_RAYS, 16)
    assert cells.min() >= 0 and cells.max() < 48 * 48
    assert depth_splat_cells(WR, 48, 16) is cells  # cached


# ---------------------------------------------------------------------------
# forward

@pytest.mark.parametrize("modality", ALL_MODALITIES)
def test_encode_agent_output_grid(modality):
    store = ParamStore()
    register_encoder(store, 0, modality, seed=3)
    params = EncoderParams(ModalityKind(modality), 0, store, "enc/0")
    feat = encode_agent(_obs(modality), params)
    assert isinstance(feat, BEVFeature)
    assert feat.data.shape == (12, 12, 35)  # unified C plus 3 positional
    assert np.isfinite(feat.data).all()
    np.testing.assert_array_equal(feat.data[..., -1], np.ones((12, 12)))
    assert feat.pose == Pose(0.0, 0.0, 0.0)
    assert feat.agent_index == 0


def test_encode_agent_deterministic():
    store = ParamStore()
    register_encoder(store, 0, "pillar", seed=3)
    params = EncoderParams(ModalityKind.PILLAR, 0, store, "enc/0")
    a = encode_agent(_obs("pillar"), params)
    b = encode_agent(_obs("pillar"), params)
    np.testing.assert_array_equal(a.data, b.data)


def test_encode_agent_modality_mismatch():
    store = ParamStore()
    register_encoder(store, 0, "pillar", seed=3)
    params = EncoderParams(ModalityKind.PILLAR, 0, store, "enc/0")
    with pytest.raises(EncoderError):
        encode_agent(_obs("voxel"), params)
    with pytest.raises(EncoderError):
        encode_agent({"counts": np.zeros((48, 48))}, params)


def test_encode_agent_keeps_pose():
    store = ParamStore()
    register_encoder(store, 0, "pillar", seed=3)
    params = EncoderParams(ModalityKind.PILLAR, 0, store, "enc/0")
    pose = Pose(3.0, -1.0, 0.4)
    assert encode_agent(_obs("pillar"), params, pose=pose).pose == pose
