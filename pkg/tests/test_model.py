import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from plyfile import PlyData, PlyElement
from scipy.spatial.transform import Rotation

from conftest import random_scene
from locogs.model import (
    ExplicitAttrs, Gaussian, ImplicitAttrs, PlyFormatError, SplatScene, compose_attrs, covariance,
    load_ply, quaternion_to_matrix, save_ply, split_attrs,
)


def _write_minimal(path, **overrides):
    fields = {"x": 0.0, "y": 0.0, "z": 0.0, "f_dc_0": 0.1, "f_dc_1": 0.2, "f_dc_2": 0.3, "opacity": 0.0,
              "scale_0": 0.0, "scale_1": 0.0, "scale_2": 0.0, "rot_0": 1.0, "rot_1": 0.0, "rot_2": 0.0, "rot_3": 0.0}
    fields.update(overrides)
    rec = np.array([tuple(fields.values())], dtype=[(k, "<f4") for k in fields])
    PlyData([PlyElement.describe(rec, "vertex")], byte_order="<").write(str(path))


def _assert_scene_equal(a: SplatScene, b: SplatScene):
    assert len(a) == len(b)
    for name in ("positions", "raw_opacities", "log_scales", "rotations", "sh", "bandwidth"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name), err_msg=name)


# ---- PLY --------------------------------------------------------------------


def test_zero_logit_loads_as_half_opacity(tmp_path):
    _write_minimal(tmp_path / "a.ply", opacity=0.0)
    s = load_ply(tmp_path / "a.ply")
    assert s.opacities[0] == 0.5
    assert s[0].bandwidth == 0


def test_rotation_is_normalized_on_load(tmp_path):
    _write_minimal(tmp_path / "a.ply", rot_0=2.0)
    np.testing.assert_array_equal(load_ply(tmp_path / "a.ply").rotations[0], [1, 0, 0, 0])


def test_scale_is_exponentiated(tmp_path):
    _write_minimal(tmp_path / "a.ply", scale_0=np.log(2.0), scale_1=0.0, scale_2=np.log(0.5))
    np.testing.assert_allclose(load_ply(tmp_path / "a.ply").scales[0], [2, 1, 0.5], rtol=1e-6)


def test_three_gaussians_round_trip_bitwise(tmp_path):
    s = random_scene(3, seed=5)
    save_ply(s, tmp_path / "s.ply")
    _assert_scene_equal(load_ply(tmp_path / "s.ply"), s)


def test_hundred_gaussians_round_trip(tmp_path):
    s = random_scene(100, seed=6)
    save_ply(s, tmp_path / "s.ply")
    back = load_ply(tmp_path / "s.ply")
    _assert_scene_equal(back, s)
    save_ply(back, tmp_path / "t.ply")
    assert (tmp_path / "s.ply").read_bytes() == (tmp_path / "t.ply").read_bytes()


def test_empty_scene_round_trip(tmp_path):
    save_ply(SplatScene.empty(), tmp_path / "e.ply")
    ply = PlyData.read(str(tmp_path / "e.ply"))
    assert ply["vertex"].count == 0
    assert len(load_ply(tmp_path / "e.ply")) == 0


def test_bandwidth_zero_writes_no_rest_fields(tmp_path):
    s = random_scene(10, seed=1, max_band=0)
    save_ply(s, tmp_path / "s.ply")
    names = [p.name for p in PlyData.read(str(tmp_path / "s.ply"))["vertex"].properties]
    assert not any(n.startswith("f_rest") for n in names)
    _assert_scene_equal(load_ply(tmp_path / "s.ply"), s)


def test_rest_layout_is_channel_major(tmp_path):
    # 3DGS stores f_rest as all red coefficients, then green, then blue
    s = random_scene(1, seed=2)
    s.bandwidth[:] = 3
    s.sh[0, 1:, :] = np.arange(45, dtype=np.float32).reshape(3, 15).T
    save_ply(s, tmp_path / "s.ply")
    v = PlyData.read(str(tmp_path / "s.ply"))["vertex"].data
    assert [float(v[f"f_rest_{j}"][0]) for j in range(45)] == list(range(45))


def test_extra_fields_preserved(tmp_path):
    s = random_scene(4, seed=3)
    s.extras["nx"] = np.arange(4, dtype=np.float32)
    save_ply(s, tmp_path / "s.ply")
    np.testing.assert_array_equal(load_ply(tmp_path / "s.ply").extras["nx"], np.arange(4))


def test_half_precision_flag_round_trips(tmp_path):
    s = random_scene(4, seed=3)
    s.position_precision = "float16"
    s.metadata["note"] = "abc"
    save_ply(s, tmp_path / "s.ply")
    back = load_ply(tmp_path / "s.ply")
    assert back.position_precision == "float16" and back.metadata == {"note": "abc"}


def test_nan_attribute_rejected_with_index(tmp_path):
    rec = np.zeros(3, dtype=[(k, "<f4") for k in ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                                                   "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]])
    rec["rot_0"] = 1
    rec["opacity"][2] = np.nan
    PlyData([PlyElement.describe(rec, "vertex")]).write(str(tmp_path / "n.ply"))
    with pytest.raises(PlyFormatError, match="record 2"):
        load_ply(tmp_path / "n.ply")


def test_missing_field_rejected(tmp_path):
    rec = np.zeros(1, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4")])
    PlyData([PlyElement.describe(rec, "vertex")]).write(str(tmp_path / "m.ply"))
    with pytest.raises(PlyFormatError, match="missing"):
        load_ply(tmp_path / "m.ply")


def test_bad_rest_count_rejected(tmp_path):
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3"] + [f"f_rest_{j}" for j in range(7)]
    rec = np.zeros(1, dtype=[(k, "<f4") for k in names])
    PlyData([PlyElement.describe(rec, "vertex")]).write(str(tmp_path / "r.ply"))
    with pytest.raises(PlyFormatError, match="f_rest"):
        load_ply(tmp_path / "r.ply")


def test_garbage_file_rejected(tmp_path):
    (tmp_path / "g.ply").write_bytes(b"not a ply at all")
    with pytest.raises(PlyFormatError):
        load_ply(tmp_path / "g.ply")


def test_ascii_ply_accepted(tmp_path):
    s = random_scene(2, seed=4, max_band=0)
    rec = np.empty(2, dtype=[(k, "<f4") for k in ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                                                   "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]])
    for j, k in enumerate("xyz"):
        rec[k] = s.positions[:, j]
    for j in range(3):
        rec[f"f_dc_{j}"] = s.sh[:, 0, j]
        rec[f"scale_{j}"] = s.log_scales[:, j]
    rec["opacity"] = s.raw_opacities
    for j in range(4):
        rec[f"rot_{j}"] = s.rotations[:, j]
    PlyData([PlyElement.describe(rec, "vertex")], text=True).write(str(tmp_path / "a.ply"))
    back = load_ply(tmp_path / "a.ply")
    np.testing.assert_allclose(back.positions, s.positions, rtol=1e-6)


# ---- split / compose ----------------------------------------------------------


def _g(scale, rotation=(1, 0, 0, 0), band=0):
    sh = tuple(np.full((2 * l + 1, 3), 0.1 * (l + 1)) for l in range(band + 1))
    return Gaussian([0.1, 0.2, 0.3], 0.7, scale, rotation, sh)


def test_split_normalizes_by_largest_scale():
    e, i = split_attrs(_g([2, 1, 0.5]))
    assert e.base_scale == 2.0
    np.testing.assert_array_equal(i.norm_scale, [1, 0.5, 0.25])


def test_isotropic_split():
    _, i = split_attrs(_g([0.3, 0.3, 0.3]))
    np.testing.assert_array_equal(i.norm_scale, [1, 1, 1])


def test_compose_with_unit_base_scale_keeps_scale():
    i = ImplicitAttrs(0.5, np.array([1.0, 0.5, 0.25]), np.array([1.0, 0, 0, 0]), ())
    g = compose_attrs(ExplicitAttrs(np.zeros(3), 1.0, np.zeros(3), 0), i)
    np.testing.assert_array_equal(g.scale, [1, 0.5, 0.25])
    assert len(g.sh) == 1


def test_compose_rejects_band_mismatch():
    i = ImplicitAttrs(0.5, np.ones(3), np.array([1.0, 0, 0, 0]), ())
    with pytest.raises(ValueError):
        compose_attrs(ExplicitAttrs(np.zeros(3), 1.0, np.zeros(3), 2), i)


def test_split_compose_identity_over_many_gaussians():
    s = random_scene(10_000, seed=8)
    for g in s.gaussians:
        back = compose_attrs(*split_attrs(g))
        assert np.array_equal(back.scale, g.scale)
        assert np.array_equal(back.position, g.position)
        assert np.array_equal(back.rotation, g.rotation)
        assert back.opacity == g.opacity
        assert len(back.sh) == len(g.sh) and all(np.array_equal(a, b) for a, b in zip(back.sh, g.sh))


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(1e-6, 1e3, allow_nan=False), min_size=3, max_size=3))
def test_split_compose_exact_for_any_positive_scale(scale):
    g = _g(scale)
    e, i = split_attrs(g)
    assert np.max(i.norm_scale) == 1.0 and np.all(i.norm_scale > 0)
    np.testing.assert_array_equal(compose_attrs(e, i).scale, g.scale)


def test_invalid_gaussians_rejected():
    with pytest.raises(ValueError):
        _g([0.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        Gaussian(np.zeros(3), 1.5, np.ones(3), (1, 0, 0, 0), (np.zeros((1, 3)),))
    with pytest.raises(ValueError):
        ExplicitAttrs(np.zeros(3), 1.0, np.zeros(3), 4)


# ---- covariance -----------------------------------------------------------------


def test_identity_rotation_covariance_is_diagonal():
    np.testing.assert_allclose(covariance(_g([1, 2, 3])), np.diag([1, 4, 9]), atol=1e-12)


def test_quarter_turn_about_z_swaps_axes():
    q = (np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4))
    np.testing.assert_allclose(covariance(_g([1, 2, 1], q)), np.diag([4, 1, 1]), atol=1e-6)


def test_quaternion_matrix_matches_scipy(rng):
    q = rng.normal(size=(200, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    for qi in q:
        ref = Rotation.from_quat([qi[1], qi[2], qi[3], qi[0]]).as_matrix()
        np.testing.assert_allclose(quaternion_to_matrix(qi), ref, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 1e-3),
       st.lists(st.floats(1e-3, 10), min_size=3, max_size=3))
def test_covariance_spectrum_and_determinant(q, s):
    g = _g(s, q)
    cov = covariance(g)
    np.testing.assert_allclose(cov, cov.T, atol=1e-12)
    sc = g.scale.astype(np.float64)
    np.testing.assert_allclose(np.linalg.eigvalsh(cov), np.sort(sc**2), rtol=1e-9, atol=1e-9 * np.max(sc**2))
    np.testing.assert_allclose(np.linalg.det(cov), np.prod(sc) ** 2, rtol=1e-6)


# ---- scene container --------------------------------------------------------------


def test_scene_rejects_non_finite():
    s = random_scene(3)
    with pytest.raises(ValueError, match="record 1"):
        SplatScene(s.positions, np.array([0, np.inf, 0]), s.log_scales, s.rotations, s.sh, s.bandwidth)


def test_bounds_contain_every_position():
    s = random_scene(50, seed=9)
    lo, hi = s.bounds
    assert np.all(s.positions >= lo) and np.all(s.positions <= hi)


def test_subset_preserves_order():
    s = random_scene(20, seed=10)
    idx = np.array([5, 2, 17])
    sub = s.subset(idx)
    np.testing.assert_array_equal(sub.positions, s.positions[idx])


def test_from_gaussians_round_trip():
    # activated values pass through sigmoid/logit in float32, so compare activated
    s = random_scene(30, seed=11)
    back = SplatScene.from_gaussians(s.gaussians)
    np.testing.assert_array_equal(back.positions, s.positions)
    np.testing.assert_allclose(back.opacities, s.opacities, rtol=1e-6)
    np.testing.assert_allclose(back.scales, s.scales, rtol=1e-6)
    np.testing.assert_array_equal(back.sh, s.sh)
    np.testing.assert_array_equal(back.bandwidth, s.bandwidth)
