import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from conftest import random_scene
from locogs.codec import (CATEGORIES, CompressedScene, ContainerError, EncodeOptions, EntropyError,
                          StreamCorruptError, clip_multiplier, decode_scene, dequantize, encode_scene,
                          entropy_decode, entropy_encode, load_container, morton_key, morton_order, morton_sort,
                          octree_decode, octree_encode, quantize, reinterpret_pos, reinterpret_pos_inv,
                          save_container, storage_stats)
from locogs.codec.entropy import HEADER_SIZE
from locogs.codec.positions import OctreeError
from locogs.field import HashGridConfig, HashGridField, field_param_vector
from locogs.model import ExplicitSet, SplatScene
from locogs.synthetic import coherent_scene

ALL_FINITE_HALVES = np.arange(1 << 16, dtype=np.uint16).view(np.float16)
ALL_FINITE_HALVES = ALL_FINITE_HALVES[np.isfinite(ALL_FINITE_HALVES)]


# ---- morton ---------------------------------------------------------------------

def test_morton_single_bits():
    keys = morton_key(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]))
    assert keys.tolist() == [0, 1, 2, 4]


def _interleave_reference(x, y, z, bits):
    key = 0
    for b in range(bits):
        key |= ((x >> b) & 1) << (3 * b) | ((y >> b) & 1) << (3 * b + 1) | ((z >> b) & 1) << (3 * b + 2)
    return key


def test_morton_cube_is_a_permutation_matching_reference():
    grid = np.array(np.meshgrid(*[np.arange(4)] * 3, indexing="ij")).reshape(3, -1).T
    keys = morton_key(grid, bits=2)
    assert sorted(keys.tolist()) == list(range(64))
    assert keys.tolist() == [_interleave_reference(*map(int, p), 2) for p in grid]


@settings(max_examples=200)
@given(st.integers(0, 2**21 - 1), st.integers(0, 2**21 - 1), st.integers(0, 2**21 - 1))
def test_morton_matches_reference_interleaver(x, y, z):
    assert int(morton_key(np.array([x, y, z]))) == _interleave_reference(x, y, z, 21)


def test_morton_rejects_overflow():
    with pytest.raises(ValueError):
        morton_key(np.array([[1 << 21, 0, 0]]))
    with pytest.raises(ValueError):
        morton_key(np.array([[-1, 0, 0]]))
    with pytest.raises(ValueError):
        morton_key(np.array([[4, 0, 0]]), bits=2)


def test_morton_sort_identity_and_reverse():
    scene = random_scene(200, seed=3)
    sorted_scene, perm = morton_sort(scene)
    again, perm2 = morton_sort(sorted_scene)
    np.testing.assert_array_equal(perm2, np.arange(200))
    _, perm3 = morton_sort(sorted_scene.subset(np.arange(199, -1, -1)))
    np.testing.assert_array_equal(perm3, np.arange(199, -1, -1))


def test_morton_sort_improves_locality():
    scene = random_scene(5000, seed=4)
    before = np.linalg.norm(np.diff(scene.positions, axis=0), axis=1).mean()
    s, _ = morton_sort(scene)
    after = np.linalg.norm(np.diff(s.positions, axis=0), axis=1).mean()
    assert after <= before


def test_morton_order_is_stable_on_duplicates():
    p = np.zeros((10, 3), np.float32)
    np.testing.assert_array_equal(morton_order(p), np.arange(10))
    with pytest.raises(ValueError):
        morton_order(np.array([[np.nan, 0, 0]]))


# ---- half reinterpretation ---------------------------------------------------------

def test_reinterpret_zero_and_range():
    assert int(reinterpret_pos(np.float16(0.0))) == 0
    assert int(reinterpret_pos(np.float16(-0.0))) == 0
    q = reinterpret_pos(ALL_FINITE_HALVES)
    assert q.min() == -0x7BFF and q.max() == 0x7BFF


def test_every_finite_half_round_trips():
    back = reinterpret_pos_inv(reinterpret_pos(ALL_FINITE_HALVES))
    assert len(ALL_FINITE_HALVES) == 63488
    nonzero = ALL_FINITE_HALVES != 0
    # bit-exact except that -0.0 comes back as +0.0
    np.testing.assert_array_equal(back[nonzero].view(np.uint16), ALL_FINITE_HALVES[nonzero].view(np.uint16))
    assert np.all(back[~nonzero].view(np.uint16) == 0)


def test_reinterpretation_is_order_preserving():
    vals = np.unique(ALL_FINITE_HALVES.astype(np.float64))
    q = reinterpret_pos(vals.astype(np.float16))
    assert np.all(np.diff(q) > 0)


def test_reinterpret_rejects_non_finite():
    for bad in (np.nan, np.inf, -np.inf):
        with pytest.raises(ValueError):
            reinterpret_pos(np.array([bad], np.float16))
    with pytest.raises(ValueError):
        reinterpret_pos_inv(np.array([0x7C00]))


# ---- octree --------------------------------------------------------------------------

def test_octree_single_point():
    p = np.array([[5, 9, 200]])
    blob = octree_encode(p, depth=8)
    np.testing.assert_array_equal(octree_decode(blob), p)
    # one occupied child per level
    occ = np.frombuffer(blob[9 : 9 + 8], np.uint8)
    assert all(bin(o).count("1") == 1 for o in occ)


def test_octree_corners_fill_the_root():
    corners = np.array([[x, y, z] for x in (0, 15) for y in (0, 15) for z in (0, 15)])
    blob = octree_encode(corners, depth=4)
    assert blob[9] == 0xFF
    assert sorted(map(tuple, octree_decode(blob))) == sorted(map(tuple, corners))


def _morton_sorted(points, depth):
    keys = morton_key(points, depth)
    return points[np.argsort(keys, kind="stable")]


def test_octree_round_trip_and_size_on_clustered_points():
    rng = np.random.default_rng(0)
    centers = rng.integers(0, 1 << 16, (20, 3))
    pts = np.clip(centers[rng.integers(0, 20, 10_000)] + rng.integers(-8, 8, (10_000, 3)), 0, (1 << 16) - 1)
    blob = octree_encode(pts)
    np.testing.assert_array_equal(octree_decode(blob), _morton_sorted(pts, 16))
    assert len(blob) < 10_000 * 3 * 16 / 8


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.int64, st.tuples(st.integers(0, 60), st.just(3)), elements=st.integers(0, 63)))
def test_octree_preserves_multisets(pts):
    out = octree_decode(octree_encode(pts, depth=6))
    np.testing.assert_array_equal(out, _morton_sorted(pts, 6))


def test_octree_large_duplicate_counts():
    pts = np.repeat(np.array([[1, 2, 3], [4, 5, 6]]), [300, 70_000], axis=0)
    out = octree_decode(octree_encode(pts, depth=4))
    assert len(out) == 70_300


def test_octree_errors():
    with pytest.raises(OctreeError):
        octree_encode(np.array([[16, 0, 0]]), depth=4)
    blob = octree_encode(np.array([[1, 2, 3], [7, 7, 7]]), depth=4)
    with pytest.raises(OctreeError):
        octree_decode(blob[:-3])
    with pytest.raises(OctreeError):
        octree_decode(blob[:4])


# ---- quantization ----------------------------------------------------------------------

def test_clip_multipliers():
    assert clip_multiplier(6) == 4.0
    assert clip_multiplier(8) == pytest.approx(4.4, abs=1e-15)
    assert clip_multiplier(1) == 3.0 and clip_multiplier(16) == 6.0


def test_constant_input_reconstructs_exactly():
    codes, spec = quantize(np.full(50, 1.25), 6)
    assert spec.degenerate and np.all(codes == 0)
    assert np.all(dequantize(codes, spec) == 1.25)


@pytest.mark.parametrize("bits", [1, 2, 6, 8, 12, 16])
def test_unclipped_error_is_at_most_half_a_step(bits):
    x = np.random.default_rng(bits).normal(0.3, 2.0, 100_000)
    codes, spec = quantize(x, bits)
    err = np.abs(dequantize(codes, spec) - x)
    inside = (x >= spec.lo) & (x <= spec.hi)
    assert err[inside].max() <= spec.step / 2 * (1 + 1e-12)
    assert codes.max() < spec.levels


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, st.integers(2, 200), elements=st.floats(-1e6, 1e6)), st.integers(1, 16))
def test_quantized_values_land_in_the_clipped_range(x, bits):
    codes, spec = quantize(x, bits)
    y = dequantize(codes, spec)
    if spec.degenerate:
        assert np.all(y == x[0])
    else:
        assert np.all((y >= spec.lo - 1e-9 * abs(spec.lo)) & (y <= spec.hi + 1e-9 * abs(spec.hi)))


def test_quantize_rejects_bad_input():
    with pytest.raises(ValueError):
        quantize([], 6)
    with pytest.raises(ValueError):
        quantize([1.0, np.nan], 6)
    with pytest.raises(ValueError):
        quantize([1.0, 2.0], 17)


# ---- entropy coding -----------------------------------------------------------------------

def test_constant_symbols_compress_below_one_percent():
    blob = entropy_encode(np.full(10_000, 42, np.uint8))
    assert len(blob) < 0.01 * 10_000
    assert np.all(entropy_decode(blob) == 42)


def test_empty_stream_is_header_only():
    blob = entropy_encode([])
    assert len(blob) == HEADER_SIZE
    assert entropy_decode(blob).size == 0


def test_random_bytes_barely_expand():
    x = np.random.default_rng(0).integers(0, 256, 100_000).astype(np.uint8)
    blob = entropy_encode(x)
    assert len(blob) <= 1.005 * len(x)
    np.testing.assert_array_equal(entropy_decode(blob), x)


def test_skewed_small_alphabet_beats_fixed_width():
    x = np.random.default_rng(1).choice(64, 20_000, p=np.r_[[0.5], np.full(63, 0.5 / 63)])
    blob = entropy_encode(x, 64)
    assert len(blob) <= 20_000 * 6 / 8 + HEADER_SIZE
    np.testing.assert_array_equal(entropy_decode(blob), x)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 256).flatmap(
    lambda a: st.tuples(st.just(a), st.lists(st.integers(0, a - 1), max_size=400))))
def test_entropy_round_trip(args):
    alphabet, sym = args
    np.testing.assert_array_equal(entropy_decode(entropy_encode(sym, alphabet)), np.array(sym, np.uint8))


def test_truncation_is_detected():
    blob = entropy_encode(np.random.default_rng(2).integers(0, 4, 1000), 4)
    with pytest.raises(EntropyError):
        entropy_decode(blob[:-1])
    with pytest.raises(EntropyError):
        entropy_decode(blob[:5])
    with pytest.raises(EntropyError):
        entropy_encode([5], 4)


def test_morton_order_shrinks_color_stream():
    scene = coherent_scene(20_000, seed=0)
    colors = ExplicitSet.from_scene(scene).base_colors.astype(np.float64)

    def coded_size(perm):
        planes = [quantize(colors[perm, c], 8)[0] for c in range(3)]
        return len(entropy_encode(np.concatenate(planes), 256))

    assert coded_size(morton_order(scene.positions)) < coded_size(np.random.default_rng(0).permutation(len(scene)))


# ---- container ---------------------------------------------------------------------------------

SMALL_FIELD = HashGridConfig(levels=3, min_res=4, max_res=32, table_size_log2=8, hidden=16)


def _encoded(n=300, seed=0, **opts):
    scene = random_scene(n, seed=seed)
    scene.positions[:5] = scene.positions[5]  # duplicates survive too
    field = HashGridField(SMALL_FIELD, seed=seed)
    explicit = ExplicitSet.from_scene(scene)
    return explicit, field, encode_scene(explicit, field, EncodeOptions(**opts))


def test_container_round_trip_by_key_lookup():
    explicit, field, comp = _encoded()
    dec = decode_scene(comp.to_bytes())
    half = explicit.positions.astype(np.float16).astype(np.float32)
    assert sorted(map(bytes, half)) == sorted(map(bytes, dec.explicit.positions))
    spec = comp.header["base_scale"]
    step_log = (2 * spec["clip"] * spec["std"]) / (1 << spec["bits"])
    color_steps = [(2 * s["clip"] * s["std"]) / (1 << s["bits"]) for s in comp.header["base_color"]]
    lookup = {}
    for i, p in enumerate(dec.explicit.positions):
        lookup.setdefault(p.tobytes(), []).append(i)
    for i, p in enumerate(half):
        j_candidates = lookup[p.tobytes()]
        ok = False
        for j in j_candidates:
            ok |= (abs(np.log(dec.explicit.base_scales[j]) - np.log(explicit.base_scales[i])) <= step_log / 2 + 1e-5
                   and np.all(np.abs(dec.explicit.base_colors[j] - explicit.base_colors[i])
                              <= np.array(color_steps) / 2 + 1e-5)
                   and dec.explicit.bandwidth[j] == explicit.bandwidth[i])
        assert ok, i


def test_decoded_field_matches_within_quantization():
    _, field, comp = _encoded()
    dec = decode_scene(comp)
    t0, h0 = field_param_vector(field)
    t1, h1 = field_param_vector(dec.field)
    np.testing.assert_array_equal(h1, h0.astype(np.float32))
    from locogs.codec import QuantSpec
    from locogs.codec.container import level_slices
    for sl, d in zip(level_slices(field.config), comp.header["hash_grid"]):
        spec = QuantSpec.from_dict(d)
        inside = (t0[sl] >= spec.lo) & (t0[sl] <= spec.hi)
        # float32 storage of the dequantized values adds a little rounding
        assert np.all(np.abs(t1[sl] - t0[sl])[inside] <= spec.step / 2 + 1e-7)
    assert len(dec.scene) == 300


def test_container_file_round_trip(tmp_path):
    _, _, comp = _encoded(50)
    size = save_container(comp, tmp_path / "a.locogs")
    again = load_container(tmp_path / "a.locogs")
    assert size == (tmp_path / "a.locogs").stat().st_size
    assert again.to_bytes() == comp.to_bytes()


def test_stats_categories_sum_to_payload():
    _, _, comp = _encoded()
    stats = storage_stats(comp.to_bytes())
    assert list(stats) == list(CATEGORIES) + ["Total"]
    assert stats["Total"] == sum(stats[c] for c in CATEGORIES) == len(comp.to_bytes()) - comp.header_size()


def _corrupt(blob, comp, name):
    table = {e["name"]: e for e in CompressedScene.from_bytes(blob)._checks.values()}
    hlen = struct.unpack_from("<I", blob, 12)[0]
    pos = 20 + hlen
    for k in comp.streams:
        if k == name:
            break
        pos += table[k]["length"]
    b = bytearray(blob)
    b[pos] ^= 0x5A
    return bytes(b)


@pytest.mark.parametrize("name", ["positions", "base_color", "base_scale", "bandwidth", "hash_grid", "mlp"])
def test_corruption_names_the_stream(name):
    _, _, comp = _encoded(80)
    bad = CompressedScene.from_bytes(_corrupt(comp.to_bytes(), comp, name))
    with pytest.raises(StreamCorruptError) as exc:
        decode_scene(bad)
    assert exc.value.stream == name
    for other in comp.streams:
        if other != name:
            assert bad.stream(other) == comp.streams[other]


def test_version_and_magic_are_checked():
    blob = bytearray(_encoded(10)[2].to_bytes())
    v = bytearray(blob)
    v[8:12] = struct.pack("<I", 99)
    with pytest.raises(ContainerError, match="version"):
        CompressedScene.from_bytes(bytes(v))
    with pytest.raises(ContainerError, match="magic"):
        CompressedScene.from_bytes(b"NOTLOCOG" + bytes(blob[8:]))
    with pytest.raises(ContainerError):
        CompressedScene.from_bytes(bytes(blob[:-1]))
    h = bytearray(blob)
    h[25] ^= 1
    with pytest.raises(ContainerError, match="header"):
        CompressedScene.from_bytes(bytes(h))


def test_empty_scene_container():
    empty = SplatScene.empty()
    comp = encode_scene(empty, None)
    blob = comp.to_bytes()
    dec = decode_scene(blob)
    assert len(dec.scene) == 0 and dec.field is None
    # only stream headers: the octree header inside the positions stream, nothing else
    assert all(len(v) <= HEADER_SIZE + 9 for v in comp.streams.values())
    with pytest.raises(ValueError):
        encode_scene(random_scene(3), None)


def test_half_overflow_is_rejected():
    s = random_scene(4)
    s.positions[0, 0] = 1e6
    with pytest.raises(ValueError):
        encode_scene(s, HashGridField(SMALL_FIELD))


def test_encoding_is_deterministic():
    assert _encoded(100, seed=2)[2].to_bytes() == _encoded(100, seed=2)[2].to_bytes()
