import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from connectoscope.connectome import (
    AtlasLabels,
    Connectome,
    RoiTimeSeries,
    edge_list,
    export_connectivity,
    extract_roi_timeseries,
    flatten,
    group_average,
    pearson_matrix,
    read_connectome_csv,
    render_heatmap_svg,
    resample_labels,
    roi_mean_series,
    threshold_probabilistic_atlas,
    write_connectome_csv,
)
from connectoscope.errors import EmptyGroup, EmptyRoi, EmptyRoiWarning, HeaderError, ShapeMismatch
from connectoscope.nifti_io import Volume4D
from oracles import two_pass_pearson


def assert_valid(c: Connectome):
    m = c.matrix
    assert np.abs(m - m.T).max() <= 1e-12
    assert np.all(np.diag(m) == 1.0)
    assert m.min() >= -1.0 and m.max() <= 1.0


def corr_of(*cols):
    return pearson_matrix(RoiTimeSeries.from_raw(np.column_stack(cols))).matrix


def test_fixture_values():
    assert corr_of([1, 2, 3], [1, 3, 2])[0, 1] == 0.5
    assert corr_of([1, 2, 3], [3, 2, 1])[0, 1] == -1.0
    assert corr_of([1, 2, 3], [1, 2, 3])[0, 0] == 1.0


def test_matches_two_pass_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=(20, 5)) * rng.uniform(0.1, 10, size=5) + rng.uniform(-50, 50, size=5)
        c = pearson_matrix(RoiTimeSeries.from_raw(x))
        np.testing.assert_allclose(c.matrix, two_pass_pearson(x), rtol=0, atol=1e-12)
        assert c.matrix[0, 1] == pytest.approx(stats.pearsonr(x[:, 0], x[:, 1])[0], abs=1e-12)
        assert_valid(c)


@settings(max_examples=50, deadline=None)
@given(
    x=arrays(np.float64, (12, 4), elements=st.floats(-1e3, 1e3)),
    scale=st.floats(1e-2, 1e2),
    shift=st.floats(-1e3, 1e3),
)
def test_positive_affine_invariance(x, scale, shift):
    a = pearson_matrix(RoiTimeSeries.from_raw(x)).matrix
    b = pearson_matrix(RoiTimeSeries.from_raw(x * scale + shift)).matrix
    assert_valid(Connectome(a, ("a",) * 4))
    ok = ~RoiTimeSeries.from_raw(x).constant & ~RoiTimeSeries.from_raw(x * scale + shift).constant
    np.testing.assert_allclose(a[np.ix_(ok, ok)], b[np.ix_(ok, ok)], atol=1e-9)


def test_standardised_columns():
    z = RoiTimeSeries.from_raw(np.column_stack([[1.0, 2, 3], [4.0, 4, 4]]))
    np.testing.assert_allclose(z.values[:, 0], [-1.224744871391589, 0, 1.224744871391589], atol=1e-12)
    assert list(z.constant) == [False, True]
    assert np.all(z.values[:, 1] == 0)
    c = pearson_matrix(z)
    assert c.matrix[0, 1] == 0.0 and c.matrix[1, 1] == 1.0


def test_single_roi_series_and_naive_means():
    data = np.zeros((2, 2, 1, 3))
    data[...] = [1.0, 2.0, 3.0]
    atlas = AtlasLabels(np.ones((2, 2, 1), int), np.eye(4), ("all",))
    ts = extract_roi_timeseries(Volume4D(data), atlas)
    np.testing.assert_allclose(ts.values[:, 0], [-1.2247448713915890, 0, 1.2247448713915890], atol=1e-12)

    rng = np.random.default_rng(1)
    data = rng.normal(size=(3, 3, 2, 4))
    labels = rng.integers(1, 3, size=(3, 3, 2))
    labels[0, 0, 0], labels[0, 0, 1] = 1, 2
    atlas = AtlasLabels(labels, np.eye(4), ("a", "b"))
    means = roi_mean_series(Volume4D(data), atlas)
    for k in (1, 2):
        for t in range(4):
            acc, n = 0.0, 0
            for x in range(3):
                for y in range(3):
                    for z in range(2):
                        if labels[x, y, z] == k:
                            acc += data[x, y, z, t]
                            n += 1
            assert means[t, k - 1] == pytest.approx(acc / n, abs=1e-12)


def test_empty_roi_and_grid_mismatch():
    atlas = AtlasLabels(np.ones((2, 2, 2), int), np.eye(4), ("a", "b"))
    with pytest.raises(EmptyRoi):
        roi_mean_series(Volume4D(np.zeros((2, 2, 2, 3))), atlas)
    with pytest.raises(ShapeMismatch):
        roi_mean_series(Volume4D(np.zeros((3, 2, 2, 3))), atlas)


def test_resample_identity_and_downsample():
    labels = np.zeros((8, 8, 8), int)
    labels[:4], labels[4:] = 1, 2
    labels[:, 4:] += 2
    atlas = AtlasLabels(labels, np.eye(4), ("a", "b", "c", "d"))
    assert np.array_equal(resample_labels(atlas, (8, 8, 8), np.eye(4)).labels, labels)
    coarse_affine = np.diag([2.0, 2.0, 2.0, 1.0])
    coarse = resample_labels(atlas, (4, 4, 4), coarse_affine)
    expected = np.empty((4, 4, 4), int)
    for i in range(4):
        for j in range(4):
            for k in range(4):
                expected[i, j, k] = labels[2 * i, 2 * j, 2 * k]
    assert np.array_equal(coarse.labels, expected)


def test_resample_flags_roi_outside_field_of_view():
    labels = np.ones((8, 8, 8), int)
    labels[7, 7, 7] = 2
    atlas = AtlasLabels(labels, np.eye(4), ("a", "b"))
    with pytest.warns(EmptyRoiWarning):
        out = resample_labels(atlas, (4, 4, 4), np.eye(4))
    assert out.empty_rois == [2]


def test_probabilistic_threshold():
    prob = np.zeros((2, 1, 1, 2))
    prob[0, 0, 0] = [0.2, 0.6]
    prob[1, 0, 0] = [0.1, 0.2]
    atlas = threshold_probabilistic_atlas(Volume4D(prob), ("a", "b"))
    assert atlas.labels[:, 0, 0].tolist() == [2, 0]


def test_group_average():
    def two(off):
        return Connectome(np.array([[1.0, off], [off, 1.0]]), ("a", "b"))

    single = two(0.3)
    assert np.array_equal(group_average([single]).matrix, single.matrix)
    assert group_average([two(0.2), two(0.6)]).matrix[0, 1] == pytest.approx(0.4, abs=1e-15)
    with pytest.raises(EmptyGroup):
        group_average([])
    with pytest.raises(ShapeMismatch):
        group_average([Connectome(np.eye(96), tuple(map(str, range(96)))), Connectome(np.eye(39), tuple(map(str, range(39))))])
    fz = group_average([two(0.2), two(0.6)], fisher_z=True).matrix[0, 1]
    assert fz == pytest.approx(np.tanh((np.arctanh(0.2) + np.arctanh(0.6)) / 2))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 5))
def test_average_commutes_with_flatten(seed, n):
    rng = np.random.default_rng(seed)
    cs = [pearson_matrix(RoiTimeSeries.from_raw(rng.normal(size=(10, 4)))) for _ in range(n)]
    lhs = flatten(group_average(cs))
    rhs = np.mean([flatten(c) for c in cs], axis=0)
    np.testing.assert_allclose(lhs, rhs, atol=1e-15)
    assert_valid(group_average(cs))


def test_flatten_lengths_and_order():
    assert flatten(Connectome(np.eye(96), ("x",) * 96)).size == 9216
    assert flatten(Connectome(np.eye(39), ("x",) * 39)).size == 1521
    a = 0.25
    assert flatten(Connectome(np.array([[1, a], [a, 1]]), ("p", "q"))).tolist() == [1, a, a, 1]


def test_edge_export(tmp_path):
    names = ("a", "b", "c")
    assert edge_list(Connectome(np.eye(3), names), 0.5) == []
    m = np.eye(3)
    m[0, 2] = m[2, 0] = 0.8
    m[0, 1] = m[1, 0] = 0.1
    out = tmp_path / "edges.csv"
    export_connectivity(Connectome(m, names), 0.5, out)
    rows = list(csv.reader(out.open()))
    assert rows == [["roi_i", "roi_j", "name_i", "name_j", "r"], ["1", "3", "a", "c", "0.800000"]]


def test_edges_sorted_by_strength():
    m = np.eye(4)
    for (i, j), v in {(0, 1): 0.3, (0, 2): -0.9, (1, 3): 0.6}.items():
        m[i, j] = m[j, i] = v
    edges = edge_list(Connectome(m, tuple("abcd")), 0.0)
    assert [e[2] for e in edges[:3]] == [-0.9, 0.6, 0.3]
    assert all(i < j for i, j, _ in edges)


def test_heatmap_cell_count(tmp_path):
    c = Connectome(np.eye(39), tuple(f"r{k}" for k in range(39)))
    svg = render_heatmap_svg(c)
    assert svg.count('class="cell"') == 39 * 39
    assert ">1<" in svg and ">0<" in svg and ">-1<" in svg
    export_connectivity(c, 0.0, tmp_path / "h.svg", "svg-heatmap")
    assert (tmp_path / "h.svg").read_text() == svg


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    c = pearson_matrix(RoiTimeSeries.from_raw(rng.normal(size=(15, 6))), "sub-1")
    write_connectome_csv(c, tmp_path / "sub-1.csv")
    back = read_connectome_csv(tmp_path / "sub-1.csv")
    assert np.array_equal(back.matrix, c.matrix)
    assert back.roi_names == c.roi_names and back.subject_id == "sub-1"


def test_atlas_validation():
    with pytest.raises(HeaderError):
        AtlasLabels(np.full((2, 2, 2), 3), np.eye(4), ("a", "b"))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        AtlasLabels(np.ones((2, 2, 2)), np.eye(4), ("a",))
