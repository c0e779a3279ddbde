import numpy as np
import pytest

from efumi.core import (
    Bag,
    BagSet,
    EndmemberSet,
    HsiCube,
    ProportionMatrix,
    global_mean,
    validate_cube,
)
from efumi.rng import Rng


def make_cube(rows=2, cols=2, bands=3, wavelengths=None, mutate=None):
    data = np.arange(rows * cols * bands, dtype=np.float64).reshape(-1, bands)
    data = data / data.max()
    if mutate is not None:
        data = data.copy()
        mutate(data)
    return HsiCube(rows=rows, cols=cols, bands=bands, data=data, wavelengths=wavelengths)


class TestHsiCube:
    def test_well_formed_cube_has_empty_report(self):
        cube = make_cube(wavelengths=(500.0, 510.0, 520.0))
        assert validate_cube(cube) == []

    def test_nan_is_reported_with_field_and_index(self):
        def poison(d):
            d[1, 2] = np.nan

        cube = make_cube(mutate=poison)
        report = validate_cube(cube)
        assert len(report) == 1
        v = report[0]
        assert v.field == "data"
        assert v.index == (1, 2)

    def test_inf_is_reported(self):
        def poison(d):
            d[3, 0] = np.inf

        report = validate_cube(make_cube(mutate=poison))
        assert [v.index for v in report] == [(3, 0)]

    def test_non_increasing_wavelengths_reported(self):
        cube = make_cube(wavelengths=(500.0, 500.0, 510.0))
        report = validate_cube(cube)
        assert len(report) == 1
        assert report[0].field == "wavelengths"
        assert "not strictly increasing" in report[0].message

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            HsiCube(rows=2, cols=2, bands=3, data=np.zeros((3, 3)))

    def test_wavelength_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            make_cube(wavelengths=(500.0, 510.0))

    def test_data_is_immutable(self):
        cube = make_cube()
        with pytest.raises(ValueError):
            cube.data[0, 0] = 5.0

    def test_image_view_round_trips(self):
        cube = make_cube(rows=3, cols=4, bands=2)
        img = cube.image()
        assert img.shape == (3, 4, 2)
        np.testing.assert_array_equal(img.reshape(-1, 2), cube.data)


class TestGlobalMean:
    def test_two_pixel_mean(self):
        cube = HsiCube(rows=1, cols=2, bands=3, data=np.array([[1.0, 2.0, 3.0], [3.0, 4.0, 5.0]]))
        np.testing.assert_allclose(global_mean(cube), [2.0, 3.0, 4.0])

    def test_singleton_subset_returns_that_pixel(self):
        cube = make_cube(rows=2, cols=3, bands=4)
        np.testing.assert_array_equal(global_mean(cube, subset=[3]), cube.pixel(3))

    def test_empty_subset_rejected(self):
        with pytest.raises(ValueError):
            global_mean(make_cube(), subset=[])

    def test_out_of_range_subset_rejected(self):
        with pytest.raises(ValueError):
            global_mean(make_cube(), subset=[99])

    def test_matches_two_pass_summation_oracle(self):
        # Oracle: accumulate in extended precision per band, then divide.
        rng = np.random.default_rng(42)
        data = rng.uniform(0.0, 1.0, size=(100, 16))
        cube = HsiCube(rows=10, cols=10, bands=16, data=data)
        oracle = np.array(
            [float(np.sum(np.asarray(data[:, b], dtype=np.longdouble)) / 100) for b in range(16)]
        )
        np.testing.assert_allclose(global_mean(cube), oracle, atol=1e-12, rtol=0.0)


class TestBags:
    def test_bag_rejects_duplicates_and_empty(self):
        with pytest.raises(ValueError):
            Bag("b", 1, [1, 1, 2])
        with pytest.raises(ValueError):
            Bag("b", 1, [])
        with pytest.raises(ValueError):
            Bag("b", 2, [1])

    def test_bagset_rejects_overlap(self):
        with pytest.raises(ValueError):
            BagSet((Bag("a", 1, [0, 1]), Bag("b", 0, [1, 2])))

    def test_bagset_rejects_duplicate_ids(self):
        with pytest.raises(ValueError):
            BagSet((Bag("a", 1, [0]), Bag("a", 0, [1])))

    def test_label_partition(self):
        bags = BagSet((Bag("p", 1, [0, 3]), Bag("n", 0, [1, 2])))
        np.testing.assert_array_equal(bags.positive_pixels(), [0, 3])
        np.testing.assert_array_equal(bags.negative_pixels(), [1, 2])
        np.testing.assert_array_equal(bags.labels_for(np.array([3, 1])), [1, 0])
        assert bags.has_both_labels()

    def test_unlabeled_pixels_stay_out(self):
        bags = BagSet((Bag("p", 1, [0]), Bag("n", 0, [5])))
        np.testing.assert_array_equal(bags.pixel_ids, [0, 5])
        with pytest.raises(ValueError):
            bags.labels_for(np.array([2]))

    def test_bounds_check(self):
        bags = BagSet((Bag("p", 1, [0, 9]),))
        bags.check_bounds(10)
        with pytest.raises(ValueError):
            bags.check_bounds(9)


class TestEndmemberSet:
    def test_unit_norm_enforced(self):
        t = np.array([1.0, 0.0, 0.0])
        good = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        ems = EndmemberSet(target=t, background=good)
        assert ems.m == 2
        assert ems.bands == 3
        np.testing.assert_array_equal(ems.matrix[:, 0], t)

        with pytest.raises(ValueError):
            EndmemberSet(target=2.0 * t, background=good)
        with pytest.raises(ValueError):
            EndmemberSet(target=t, background=2.0 * good)

    def test_tiny_norm_slack_accepted(self):
        t = np.array([1.0, 0.0])
        t = t * np.sqrt(1.0 + 1e-10)
        EndmemberSet(target=t, background=np.array([[0.0], [1.0]]))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            EndmemberSet(target=np.array([np.nan, 0.0]), background=np.zeros((2, 0)))

    def test_from_matrix_round_trip(self):
        rng = np.random.default_rng(0)
        cols = rng.uniform(0.1, 1.0, size=(8, 4))
        cols /= np.linalg.norm(cols, axis=0, keepdims=True)
        ems = EndmemberSet.from_matrix(cols)
        np.testing.assert_array_equal(ems.matrix, cols)


class TestProportionMatrix:
    def test_numerical_dust_is_repaired(self):
        vals = np.array([[0.5 + 4e-9, 0.5], [1.0, -5e-11]])
        pm = ProportionMatrix(vals)
        np.testing.assert_allclose(pm.values.sum(axis=1), 1.0, atol=0, rtol=0)
        assert pm.values.min() >= 0.0

    def test_large_row_sum_violation_raises(self):
        with pytest.raises(ValueError):
            ProportionMatrix(np.array([[0.6, 0.6]]))

    def test_large_negative_entry_raises(self):
        with pytest.raises(ValueError):
            ProportionMatrix(np.array([[1.2, -0.2]]))

    def test_target_column(self):
        pm = ProportionMatrix(np.array([[0.25, 0.75], [1.0, 0.0]]))
        np.testing.assert_allclose(pm.target_column, [0.25, 1.0])


class TestRng:
    def test_equal_seeds_give_identical_streams(self):
        a = Rng(123).child("scene").generator.uniform(size=1_000_000)
        b = Rng(123).child("scene").generator.uniform(size=1_000_000)
        np.testing.assert_array_equal(a, b)

    def test_distinct_children_differ(self):
        root = Rng(7)
        x = root.child("a").generator.uniform(size=100)
        y = root.child("b").generator.uniform(size=100)
        assert not np.array_equal(x, y)

    def test_child_order_is_irrelevant(self):
        r1 = Rng(5)
        _ = r1.child("x").generator.uniform(size=10)
        got = r1.child("y").generator.uniform(size=10)
        want = Rng(5).child("y").generator.uniform(size=10)
        np.testing.assert_array_equal(got, want)

    def test_int_and_str_tags_supported(self):
        r = Rng(1)
        a = r.child(3).generator.integers(0, 100, size=5)
        b = Rng(1).child(3).generator.integers(0, 100, size=5)
        np.testing.assert_array_equal(a, b)
