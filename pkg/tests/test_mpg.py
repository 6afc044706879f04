import numpy as np
import pytest
from hypothesis import given, strategies as st

from gsmeta.errors import BadSplitSize, DataError, EmptyDataset
from gsmeta.mpg import Dataset, EdgeType, build_mpg, mask_labels, split_properties

from conftest import random_dataset


def dataset(n_mol, n_prop, seed=0, missing=0.0):
    return random_dataset(n_mol, n_prop, seed=seed, missing=missing)


def test_tox21_shape_node_count():
    mpg = build_mpg(dataset(7831, 12, missing=0.17), 8, rng=np.random.default_rng(0))
    assert mpg.n_nodes == 7843
    assert mpg.n_edges == 7831 * 12


def test_tox21_and_sider_splits():
    assert [len(x) for x in (split_properties(dataset(20, 12), 3).train,
                             split_properties(dataset(20, 12), 3).test)] == [9, 3]
    s = split_properties(dataset(20, 27), 6)
    assert (len(s.train), len(s.test)) == (21, 6)
    assert s.test == tuple(range(21, 27))


def test_explicit_split_by_name_or_id():
    ds = dataset(10, 5)
    s = split_properties(ds, test_properties=["p0", 3])
    assert s.test == (0, 3) and s.train == (1, 2, 4)


@pytest.mark.parametrize("n_test", [0, 5, 6, -1, None])
def test_bad_split_size(n_test):
    with pytest.raises(BadSplitSize):
        split_properties(dataset(10, 5), n_test)


def test_unk_completion_two_by_two():
    ds = Dataset(("CC", "CO"), ("a", "b"), [[1, 0], [np.nan, 1]])
    counts = build_mpg(ds, 4, rng=np.random.default_rng(0)).edge_counts()
    assert counts[EdgeType.ACTIVE] + counts[EdgeType.INACTIVE] == 3
    assert counts[EdgeType.UNK] == 1


def test_complete_labels_have_no_unk():
    assert build_mpg(dataset(100, 27), 4, rng=np.random.default_rng(0)).edge_counts()[EdgeType.UNK] == 0


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        build_mpg(Dataset((), ("a",), np.zeros((0, 1))), 4)


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(("C",), ("a", "b"), [[1]])
    with pytest.raises(DataError):
        Dataset(("C",), ("a",), [[2]])


@given(st.integers(1, 30), st.integers(1, 8), st.integers(0, 2**31), st.floats(0, 0.9))
def test_edge_types_match_label_scan(n_mol, n_prop, seed, missing):
    ds = dataset(n_mol, n_prop, seed=seed, missing=missing)
    mpg = build_mpg(ds, 4, rng=np.random.default_rng(seed))
    assert mpg.n_edges == n_mol * n_prop
    for p in range(n_prop):
        for label in (0, 1):
            scan = [i for i in range(n_mol) if ds.labels[i, p] == label]
            assert mpg.molecules_with_label(p, label).tolist() == scan
        for i in range(n_mol):
            y = ds.labels[i, p]
            expected = EdgeType.UNK if np.isnan(y) else EdgeType.ACTIVE if y == 1 else EdgeType.INACTIVE
            assert mpg.edge_type(i, p) == expected


def test_property_embedding_scale_and_determinism():
    ds = dataset(10, 400)
    a = build_mpg(ds, 64, rng=np.random.default_rng(7)).property_embeddings
    b = build_mpg(ds, 64, rng=np.random.default_rng(7)).property_embeddings
    assert np.array_equal(a, b)
    assert abs(a.std() - 1 / 8) < 0.005


def test_mask_zero_is_identity():
    ds = dataset(20, 4, missing=0.2)
    assert mask_labels(ds, 0.0, np.random.default_rng(0)) is ds


def test_mask_floor_rule():
    ds = dataset(25, 4)  # 100 present labels
    out = mask_labels(ds, 0.5, np.random.default_rng(0))
    assert (~np.isnan(out.labels)).sum() == 50
    out = mask_labels(ds, 0.33, np.random.default_rng(0))
    assert np.isnan(out.labels).sum() == 33


def test_mask_spares_test_properties():
    ds = dataset(30, 5, missing=0.1)
    out = mask_labels(ds, 0.6, np.random.default_rng(1), train_properties=[0, 1, 2])
    np.testing.assert_array_equal(out.labels[:, 3:], ds.labels[:, 3:])
    present = (~np.isnan(ds.labels[:, :3])).sum()
    assert np.isnan(out.labels[:, :3]).sum() - np.isnan(ds.labels[:, :3]).sum() == int(0.6 * present)


def test_masked_cells_become_unk():
    ds = dataset(30, 5)
    out = mask_labels(ds, 0.4, np.random.default_rng(3))
    mpg = build_mpg(out, 4, rng=np.random.default_rng(0))
    assert mpg.edge_counts()[EdgeType.UNK] == int(np.isnan(out.labels).sum()) == int(0.4 * 150)


def test_mask_ratio_bounds():
    with pytest.raises(ValueError):
        mask_labels(dataset(5, 2), 1.0, np.random.default_rng(0))
