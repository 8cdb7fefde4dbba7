import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgicnn.volume_io import (
    Candidate,
    MetaImageError,
    UnsupportedElementType,
    Volume,
    filter_by_thickness,
    load_volume,
    read_candidates,
    save_volume,
    voxel_to_world,
    world_to_voxel,
    write_candidates,
)


def make_volume(spacing=(0.7, 0.7, 2.5), origin=(-100.0, -100.0, -50.0), shape=(4, 8, 8), sid="s1", thickness=None):
    vox = np.arange(np.prod(shape), dtype=np.int16).reshape(shape) - 1000
    return Volume(vox, spacing, origin, sid, thickness)


def test_round_trip_is_bit_exact(tmp_path):
    v = make_volume(spacing=(0.7031249, 0.7031249, 1.25), origin=(-187.5, -163.20000000000002, -340.25))
    save_volume(v, tmp_path / "s1.mhd")
    back = load_volume(tmp_path / "s1.mhd")
    assert back.voxels.dtype == v.voxels.dtype
    np.testing.assert_array_equal(back.voxels, v.voxels)
    assert back.spacing_mm == v.spacing_mm
    assert back.origin_mm == v.origin_mm
    assert back.series_id == "s1"
    assert back.voxels.shape == (4, 8, 8)


def test_spacing_passthrough(tmp_path):
    save_volume(make_volume(spacing=(0.7, 0.7, 2.5)), tmp_path / "a.mhd")
    v = load_volume(tmp_path / "a.mhd")
    assert v.spacing_mm == (0.7, 0.7, 2.5)
    assert v.slice_thickness_mm == 2.5


def test_thick_slices_load_but_are_filtered(tmp_path):
    save_volume(make_volume(spacing=(0.7, 0.7, 3.0)), tmp_path / "thick.mhd")
    v = load_volume(tmp_path / "thick.mhd")
    assert v.slice_thickness_mm == 3.0
    assert filter_by_thickness([v]) == []


def _write_header(path, **overrides):
    fields = {
        "ObjectType": "Image",
        "NDims": "3",
        "DimSize": "2 2 2",
        "ElementType": "MET_SHORT",
        "ElementSpacing": "1 1 1",
        "Offset": "0 0 0",
        "BinaryDataByteOrderMSB": "False",
        "ElementDataFile": path.with_suffix(".raw").name,
    }
    fields.update(overrides)
    fields = {k: v for k, v in fields.items() if v is not None}
    data_file = fields.pop("ElementDataFile")
    path.write_text("".join(f"{k} = {v}\n" for k, v in fields.items()) + f"ElementDataFile = {data_file}\n")


def test_big_endian_is_honoured(tmp_path):
    p = tmp_path / "be.mhd"
    _write_header(p, BinaryDataByteOrderMSB="True")
    data = np.array([-1000, 5, 400, -3, 7, 8, 9, 10], dtype=">i2")
    p.with_suffix(".raw").write_bytes(data.tobytes())
    v = load_volume(p)
    np.testing.assert_array_equal(v.voxels.ravel(), data.astype(np.int16))


def test_float_element_type(tmp_path):
    p = tmp_path / "f.mhd"
    _write_header(p, ElementType="MET_FLOAT")
    data = np.linspace(-1000, 400, 8).astype("<f4")
    p.with_suffix(".raw").write_bytes(data.tobytes())
    np.testing.assert_array_equal(load_volume(p).voxels.ravel(), data)


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_volume("/nonexistent/volume.mhd")


def test_missing_raw_file(tmp_path):
    p = tmp_path / "noraw.mhd"
    _write_header(p)
    with pytest.raises(FileNotFoundError):
        load_volume(p)


@pytest.mark.parametrize(
    "overrides, key",
    [
        ({"DimSize": "2 2"}, "DimSize"),
        ({"DimSize": None}, "DimSize"),
        ({"ElementSpacing": "1 x 1"}, "ElementSpacing"),
        ({"ElementSpacing": "1 0 1"}, "ElementSpacing"),
        ({"NDims": "2"}, "NDims"),
        ({"BinaryDataByteOrderMSB": "maybe"}, "BinaryDataByteOrderMSB"),
        ({"ElementType": None}, "ElementType"),
    ],
)
def test_malformed_header_names_key(tmp_path, overrides, key):
    p = tmp_path / "bad.mhd"
    _write_header(p, **overrides)
    p.with_suffix(".raw").write_bytes(np.zeros(8, "<i2").tobytes())
    with pytest.raises(MetaImageError) as exc:
        load_volume(p)
    assert exc.value.key == key
    assert key in str(exc.value)


def test_unsupported_element_type(tmp_path):
    p = tmp_path / "rgb.mhd"
    _write_header(p, ElementType="MET_UCHAR_ARRAY")
    p.with_suffix(".raw").write_bytes(b"\0" * 8)
    with pytest.raises(UnsupportedElementType) as exc:
        load_volume(p)
    assert exc.value.key == "ElementType"


def test_truncated_raw(tmp_path):
    p = tmp_path / "short.mhd"
    _write_header(p)
    p.with_suffix(".raw").write_bytes(b"\0" * 6)
    with pytest.raises(MetaImageError):
        load_volume(p)


def test_local_data_file(tmp_path):
    p = tmp_path / "one.mha"
    data = np.arange(8, dtype="<i2")
    header = "NDims = 3\nDimSize = 2 2 2\nElementType = MET_SHORT\nElementSpacing = 1 1 2\nElementDataFile = LOCAL\n"
    p.write_bytes(header.encode() + data.tobytes())
    v = load_volume(p)
    np.testing.assert_array_equal(v.voxels.ravel(), data)
    assert v.slice_thickness_mm == 2.0


def test_volume_invariants():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1), (0, 0, 0), "x")
    with pytest.raises(ValueError):
        Volume(np.zeros((0, 2, 2)), (1, 1, 1), (0, 0, 0), "x")
    v = make_volume()
    with pytest.raises(ValueError):
        v.voxels[0, 0, 0] = 1  # immutable after construction


def test_filter_by_thickness_boundary_kept():
    vols = [make_volume(spacing=(1, 1, t), sid=str(t)) for t in (1.0, 2.5, 2.6)]
    assert [v.slice_thickness_mm for v in filter_by_thickness(vols)] == [1.0, 2.5]


def test_filter_by_thickness_trivial():
    assert filter_by_thickness([]) == []
    vols = [make_volume(spacing=(1, 1, t), sid=str(t)) for t in (0.6, 1.25, 2.5)]
    assert filter_by_thickness(vols) == vols
    with pytest.raises(ValueError):
        filter_by_thickness(vols, 0)


@given(st.lists(st.floats(0.1, 5.0), min_size=0, max_size=12))
def test_filter_is_subsequence(thicknesses):
    vols = [make_volume(spacing=(1, 1, t), sid=str(i)) for i, t in enumerate(thicknesses)]
    kept = filter_by_thickness(vols)
    it = iter(vols)
    assert all(any(k is v for v in it) for k in kept)


def test_world_to_voxel_examples():
    ident = make_volume(spacing=(1, 1, 1), origin=(0, 0, 0))
    np.testing.assert_allclose(world_to_voxel(ident, (5, 6, 7)), (5, 6, 7))
    v = make_volume()
    np.testing.assert_allclose(world_to_voxel(v, (-93, -93, -45)), (10, 10, 2), rtol=1e-12)
    np.testing.assert_array_equal(world_to_voxel(v, v.origin_mm), (0, 0, 0))


def test_voxel_to_world_examples():
    v = make_volume()
    np.testing.assert_array_equal(voxel_to_world(v, (0, 0, 0)), (-100, -100, -50))
    np.testing.assert_allclose(voxel_to_world(v, (10, 10, 2)), (-93, -93, -45), rtol=1e-12)


def test_round_trip_1000_points(rng):
    v = make_volume()
    pts = rng.uniform(-500, 500, size=(1000, 3))
    back = np.array([voxel_to_world(v, world_to_voxel(v, p)) for p in pts])
    rel = np.abs(back - pts) / np.maximum(np.abs(pts), 1.0)
    assert rel.max() < 1e-9


@settings(max_examples=200)
@given(
    st.tuples(*[st.floats(0.05, 5.0)] * 3),
    st.tuples(*[st.floats(-1000, 1000)] * 3),
    st.tuples(*[st.floats(-2000, 2000)] * 3),
)
def test_world_voxel_inverse_property(spacing, origin, world):
    v = make_volume(spacing=spacing, origin=origin)
    back = voxel_to_world(v, world_to_voxel(v, world))
    scale = np.maximum(np.abs(world), np.abs(origin)).max() + 1.0
    assert np.max(np.abs(back - np.asarray(world))) <= 1e-9 * scale


def test_axis_mapping_matches_array_layout():
    # a bright voxel at array index [z=1, y=2, x=3] sits at voxel (x, y, z) = (3, 2, 1)
    vox = np.full((4, 5, 6), -1000, np.int16)
    vox[1, 2, 3] = 100
    v = Volume(vox, (0.5, 0.7, 2.0), (10.0, 20.0, 30.0), "m")
    world = voxel_to_world(v, (3, 2, 1))
    np.testing.assert_allclose(world, (11.5, 21.4, 32.0))
    x, y, z = np.rint(world_to_voxel(v, world)).astype(int)
    assert v.voxels[z, y, x] == 100


def test_candidate_invariants():
    with pytest.raises(ValueError):
        Candidate("s", (0, 0, 0), probability=1.5)
    with pytest.raises(ValueError):
        Candidate("s", (0, 0, 0), label=2)
    c = Candidate("s", (1, 2, 3), 1, 0.3)
    assert c.is_nodule and c.world_mm == (1.0, 2.0, 3.0)


def test_candidate_csv_round_trip(tmp_path):
    cands = [Candidate("a", (1.5, -2.25, 3.0), 1), Candidate("b", (0.1, 0.2, 0.30000000000000004), 0)]
    write_candidates(cands, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "seriesuid,coordX,coordY,coordZ,class"
    assert read_candidates(tmp_path / "c.csv") == cands
