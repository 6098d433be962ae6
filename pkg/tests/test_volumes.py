import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchtraj.errors import DataError, InvalidInputError
from patchtraj.volumes import (Landmark, Patch, Volume, auto_threshold,
                               edge_density_map, extract_patch, read_volume,
                               select_landmarks, sobel_edge_map, write_volume)

SMOOTH = np.array([1.0, 2.0, 1.0])
DERIV = np.array([-1.0, 0.0, 1.0])


def label_volume(data):
    data = np.asarray(data, dtype=np.float64)
    nz, ny, nx = data.shape
    return Volume((nx, ny, nz), (1, 1, 1), data, kind="label")


def brute_force_sobel(mask):
    """Direct 3x3x3 stencil evaluation, no separability tricks."""
    nz, ny, nx = mask.shape
    out = np.zeros_like(mask)
    kernels = []
    for deriv_axis in range(3):
        k = np.empty((3, 3, 3))
        for dz in range(3):
            for dy in range(3):
                for dx in range(3):
                    parts = []
                    for ax, d in zip(range(3), (dz, dy, dx)):
                        parts.append(DERIV[d] if ax == deriv_axis else SMOOTH[d])
                    k[dz, dy, dx] = parts[0] * parts[1] * parts[2]
        kernels.append(k)
    for z in range(1, nz - 1):
        for y in range(1, ny - 1):
            for x in range(1, nx - 1):
                sq = 0.0
                for k in kernels:
                    acc = 0.0
                    for dz in range(3):
                        for dy in range(3):
                            for dx in range(3):
                                acc += k[dz, dy, dx] * mask[z + dz - 1, y + dy - 1, x + dx - 1]
                    sq += acc * acc
                out[z, y, x] = np.sqrt(sq)
    return (out > 0).astype(np.float64)


class TestSobel:
    def test_all_zeros(self):
        vol = label_volume(np.zeros((5, 5, 5)))
        edge = sobel_edge_map(vol)
        assert edge.kind == "edge"
        assert not edge.data.any()

    def test_all_ones(self):
        vol = label_volume(np.ones((5, 5, 5)))
        assert not sobel_edge_map(vol).data.any()

    def test_cube_matches_brute_force(self):
        data = np.zeros((9, 9, 9))
        data[3:6, 3:6, 3:6] = 1.0
        edge = sobel_edge_map(label_volume(data))
        expected = brute_force_sobel(data)
        assert np.array_equal(edge.data, expected)
        # the cube's own surface voxels are marked, the center is not
        assert edge.data[3, 4, 4] == 1.0
        assert edge.data[4, 4, 4] == 0.0
        assert edge.data[0, 0, 0] == 0.0

    def test_random_mask_matches_brute_force(self, rng):
        data = (rng.random((6, 7, 8)) > 0.6).astype(np.float64)
        edge = sobel_edge_map(label_volume(data))
        assert np.array_equal(edge.data, brute_force_sobel(data))

    def test_relabel_invariance(self):
        data = np.zeros((7, 7, 7))
        data[2:5, 2:5, 2:5] = 3.0
        e3 = sobel_edge_map(label_volume(data), label_id=3)
        data7 = np.where(data == 3.0, 7.0, 0.0)
        e7 = sobel_edge_map(label_volume(data7), label_id=7)
        assert np.array_equal(e3.data, e7.data)

    def test_2d_mode(self):
        data = np.zeros((5, 7, 7))
        data[:, 2:5, 2:5] = 1.0  # column through all slices
        edge = sobel_edge_map(label_volume(data), mode="2d")
        # every slice sees the same in-plane boundary, including z borders
        assert edge.data[0].any() and edge.data[-1].any()
        for z in range(1, 5):
            assert np.array_equal(edge.data[z], edge.data[0])

    def test_too_small_volume(self):
        with pytest.raises(InvalidInputError):
            sobel_edge_map(label_volume(np.zeros((2, 5, 5))))

    def test_wrong_kind(self):
        vol = Volume((5, 5, 5), (1, 1, 1), np.zeros((5, 5, 5)), kind="intensity")
        with pytest.raises(InvalidInputError):
            sobel_edge_map(vol)


def edge_volume(data):
    data = np.asarray(data, dtype=np.float64)
    nz, ny, nx = data.shape
    return Volume((nx, ny, nz), (1, 1, 1), data, kind="edge")


class TestEdgeDensity:
    def test_single_volume_identity(self, rng):
        e = edge_volume((rng.random((4, 4, 4)) > 0.5).astype(float))
        out = edge_density_map([e])
        assert np.array_equal(out.data, e.data)
        assert out.kind == "density"

    def test_mean_of_identical(self, rng):
        e = edge_volume((rng.random((4, 4, 4)) > 0.5).astype(float))
        out = edge_density_map([e, e])
        assert np.array_equal(out.data, e.data)

    def test_two_of_three(self):
        a = np.zeros((3, 3, 3))
        b = np.zeros((3, 3, 3))
        c = np.zeros((3, 3, 3))
        a[1, 1, 1] = b[1, 1, 1] = 1.0
        out = edge_density_map([edge_volume(a), edge_volume(b), edge_volume(c)])
        assert out.data[1, 1, 1] == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_matches_brute_force_mean(self, rng):
        vols = [(rng.random((5, 5, 5)) > 0.5).astype(float) for _ in range(7)]
        out = edge_density_map([edge_volume(v) for v in vols])
        brute = np.zeros((5, 5, 5))
        for z in range(5):
            for y in range(5):
                for x in range(5):
                    brute[z, y, x] = sum(v[z, y, x] for v in vols) / 7
        assert np.abs(out.data - brute).max() < 1e-12

    def test_empty_list(self):
        with pytest.raises(InvalidInputError):
            edge_density_map([])

    def test_mismatched_dims(self, rng):
        a = edge_volume(np.zeros((3, 3, 3)))
        b = edge_volume(np.zeros((4, 4, 4)))
        with pytest.raises(InvalidInputError):
            edge_density_map([a, b])


def density_volume(data):
    data = np.asarray(data, dtype=np.float64)
    nz, ny, nx = data.shape
    return Volume((nx, ny, nz), (1, 1, 1), data, kind="density")


class TestSelectLandmarks:
    def test_nothing_exceeds_threshold(self):
        data = np.full((5, 5, 5), 0.15)
        assert select_landmarks(density_volume(data), threshold=0.19) == []

    def test_auto_threshold_value(self):
        data = np.zeros((5, 5, 5))
        data[1, 1, 1] = 0.2
        data[2, 2, 2] = 0.4
        data[3, 3, 3] = 0.6
        vol = density_volume(data)
        vals = np.array([0.2, 0.4, 0.6])
        expected = vals.mean() - vals.std()
        assert auto_threshold(vol) == pytest.approx(expected, abs=1e-12)
        assert auto_threshold(vol) == pytest.approx(0.23670068, abs=1e-6)
        lms = select_landmarks(vol)
        assert {lm.coord for lm in lms} == {(2, 2, 2), (3, 3, 3)}

    def test_ordering_is_zyx_lexicographic(self):
        data = np.zeros((4, 4, 4))
        data[3, 0, 2] = data[0, 3, 1] = data[0, 3, 3] = 0.9
        lms = select_landmarks(density_volume(data), threshold=0.5)
        assert [lm.coord for lm in lms] == [(1, 3, 0), (3, 3, 0), (2, 0, 3)]
        assert [lm.index for lm in lms] == [0, 1, 2]

    def test_margin_excludes_border(self):
        data = np.full((5, 5, 5), 0.9)
        lms = select_landmarks(density_volume(data), threshold=0.5, margin=2)
        assert [lm.coord for lm in lms] == [(2, 2, 2)]

    def test_strictly_exceeds(self):
        data = np.zeros((3, 3, 3))
        data[1, 1, 1] = 0.5
        assert select_landmarks(density_volume(data), threshold=0.5) == []
        assert len(select_landmarks(density_volume(data), threshold=0.49)) == 1

    def test_every_selected_landmark_supports_extraction(self, rng):
        data = rng.random((7, 7, 7))
        vol = density_volume(data)
        intensity = Volume((7, 7, 7), (1, 1, 1), rng.random((7, 7, 7)), kind="intensity")
        for lm in select_landmarks(vol, threshold=0.6, margin=2):
            assert lm.density > 0.6
            patch = extract_patch(intensity, lm, 5)
            assert patch.values.size == 125


class TestExtractPatch:
    def test_patch_side_11_length(self):
        data = np.zeros((11, 11, 11))
        vol = Volume((11, 11, 11), (1, 1, 1), data, kind="intensity")
        lm = Landmark(0, (5, 5, 5), "roi", 1.0)
        assert len(extract_patch(vol, lm, 11)) == 1331

    def test_degenerate_single_voxel(self, rng):
        data = rng.random((5, 5, 5))
        vol = Volume((5, 5, 5), (1, 1, 1), data, kind="intensity")
        lm = Landmark(0, (3, 1, 2), "roi", 1.0)
        assert extract_patch(vol, lm, 1).values[0] == data[2, 1, 3]

    def test_constant_volume(self):
        vol = Volume((5, 5, 5), (1, 1, 1), np.full((5, 5, 5), 0.7), kind="intensity")
        patch = extract_patch(vol, Landmark(0, (2, 2, 2), "roi", 1.0), 3)
        assert np.all(patch.values == 0.7)

    def test_row_major_zyx_order(self, rng):
        data = rng.random((5, 5, 5))
        vol = Volume((5, 5, 5), (1, 1, 1), data, kind="intensity")
        patch = extract_patch(vol, Landmark(0, (2, 2, 2), "roi", 1.0), 3)
        manual = [data[z, y, x]
                  for z in (1, 2, 3) for y in (1, 2, 3) for x in (1, 2, 3)]
        assert np.array_equal(patch.values, manual)

    def test_pure_function(self, rng):
        data = rng.random((5, 5, 5))
        vol = Volume((5, 5, 5), (1, 1, 1), data, kind="intensity")
        lm = Landmark(0, (2, 2, 2), "roi", 1.0)
        a = extract_patch(vol, lm, 3)
        b = extract_patch(vol, lm, 3)
        assert np.array_equal(a.values, b.values)

    def test_out_of_bounds(self):
        vol = Volume((5, 5, 5), (1, 1, 1), np.zeros((5, 5, 5)), kind="intensity")
        with pytest.raises(InvalidInputError):
            extract_patch(vol, Landmark(0, (1, 2, 2), "roi", 1.0), 5)

    def test_even_side_rejected(self):
        vol = Volume((5, 5, 5), (1, 1, 1), np.zeros((5, 5, 5)), kind="intensity")
        with pytest.raises(InvalidInputError):
            extract_patch(vol, Landmark(0, (2, 2, 2), "roi", 1.0), 4)


class TestVolumeIO:
    def test_round_trip(self, tmp_path, rng):
        data = rng.random((4, 5, 6)).astype("<f4").astype(np.float64)
        vol = Volume((6, 5, 4), (1.0, 1.5, 2.0), data, kind="intensity")
        write_volume(vol, tmp_path / "vol")
        back = read_volume(tmp_path / "vol.json")
        assert back.dims == vol.dims
        assert back.spacing == vol.spacing
        assert back.kind == "intensity"
        assert np.array_equal(back.data, vol.data)

    def test_write_is_deterministic(self, tmp_path, rng):
        data = rng.random((3, 3, 3)).astype("<f4").astype(np.float64)
        vol = Volume((3, 3, 3), (1, 1, 1), data, kind="intensity")
        write_volume(vol, tmp_path / "a")
        write_volume(vol, tmp_path / "b")
        assert (tmp_path / "a.raw").read_bytes() == (tmp_path / "b.raw").read_bytes()
        assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_volume(tmp_path / "nope.json")

    def test_truncated_raw(self, tmp_path):
        vol = Volume((3, 3, 3), (1, 1, 1), np.zeros((3, 3, 3)), kind="intensity")
        write_volume(vol, tmp_path / "vol")
        raw = tmp_path / "vol.raw"
        raw.write_bytes(raw.read_bytes()[:-8])
        with pytest.raises(DataError):
            read_volume(tmp_path / "vol.json")


class TestVolumeInvariants:
    def test_flat_data_reshaped(self):
        vol = Volume((2, 3, 4), (1, 1, 1), np.zeros(24), kind="intensity")
        assert vol.data.shape == (4, 3, 2)

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            Volume((2, 3, 4), (1, 1, 1), np.zeros(23), kind="intensity")

    def test_non_finite_intensity(self):
        data = np.zeros(8)
        data[3] = np.nan
        with pytest.raises(InvalidInputError):
            Volume((2, 2, 2), (1, 1, 1), data, kind="intensity")

    def test_density_range(self):
        with pytest.raises(InvalidInputError):
            Volume((2, 2, 2), (1, 1, 1), np.full(8, 1.5), kind="density")

    def test_undeclared_labels(self):
        vol = Volume((2, 2, 2), (1, 1, 1), np.ones(8), kind="label")
        vol.check_labels([0, 1])
        with pytest.raises(InvalidInputError):
            vol.check_labels([0, 2])

    @given(st.integers(0, 10000))
    @settings(max_examples=25, deadline=None)
    def test_patch_values_must_be_flat(self, seed):
        r = np.random.default_rng(seed)
        with pytest.raises(InvalidInputError):
            Patch(0, 0, "t1", r.random((3, 3)))
