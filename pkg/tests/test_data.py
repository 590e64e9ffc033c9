import numpy as np
import pytest

from flpoison.data import (
    DataError, Dataset, PartitionSpec, client_groups, load_csv, make_blobs, partition_noniid,
    save_csv,
)
from flpoison.learner import ModelSpec, TrainConfig, evaluate, init_params, local_train
from flpoison.rng import stream


def test_blobs_shape_and_balance():
    ds = make_blobs(2, 10, 3, 1.0, seed=0)
    assert len(ds) == 20
    assert np.bincount(ds.labels).tolist() == [10, 10]


def test_blobs_are_deterministic():
    a = make_blobs(4, 7, 5, 0.8, seed=42)
    b = make_blobs(4, 7, 5, 0.8, seed=42)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_tight_blobs_are_linearly_separable():
    ds = make_blobs(4, 30, 6, 1e-3, seed=1)
    spec = ModelSpec((6, 4))
    w = init_params(spec, stream(0, "init"))
    for epoch in range(200):
        w = w + local_train(w, ds, TrainConfig(0.5, 1, len(ds)), stream(0, "t", epoch), spec=spec)
    assert evaluate(spec, w, ds) == 0.0


def test_client_groups_spread_remainder_first():
    sizes = [len(g) for g in client_groups(23, 10)]
    assert sizes == [3, 3, 3] + [2] * 7
    assert np.concatenate(client_groups(23, 10)).tolist() == list(range(23))


def _partition(q, n=20, C=4, per_class=100, seed=3):
    ds = make_blobs(C, per_class, 2, 1.0, seed=0)
    return ds, partition_noniid(ds, PartitionSpec(n, q, seed))


@pytest.mark.parametrize("q", [0.25, 0.5, 1.0])
def test_partition_covers_every_example_once(q):
    ds, clients = _partition(q)
    allidx = np.concatenate([c.indices for c in clients])
    assert sorted(allidx.tolist()) == list(range(len(ds)))
    assert all(len(c) > 0 for c in clients)


def test_partition_is_deterministic():
    _, a = _partition(0.5)
    _, b = _partition(0.5)
    assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))


def test_fully_skewed_partition_keeps_classes_home():
    ds, clients = _partition(1.0)
    groups = client_groups(20, 4)
    for g, members in enumerate(groups):
        for cid in members:
            assert set(clients[cid].labels.tolist()) <= {g}


def test_iid_partition_spreads_classes_evenly():
    # q = 1/C: every group is equally likely for every class
    ds = make_blobs(4, 5000, 2, 1.0, seed=0)
    clients = partition_noniid(ds, PartitionSpec(8, 0.25, 5))
    groups = client_groups(8, 4)
    for g, members in enumerate(groups):
        labels = np.concatenate([clients[c].labels for c in members])
        frac = np.bincount(labels, minlength=4) / 5000
        np.testing.assert_allclose(frac, 0.25, atol=0.02)


def test_home_group_fraction_matches_q():
    ds = make_blobs(10, 2000, 2, 1.0, seed=0)
    clients = partition_noniid(ds, PartitionSpec(100, 0.5, 11))
    groups = client_groups(100, 10)
    home = 0
    for g, members in enumerate(groups):
        labels = np.concatenate([clients[c].labels for c in members])
        home += np.count_nonzero(labels == g)
    assert home / len(ds) == pytest.approx(0.5, abs=0.02)


def test_partition_rejects_bad_q():
    ds = make_blobs(4, 10, 2, 1.0, seed=0)
    with pytest.raises(DataError):
        partition_noniid(ds, PartitionSpec(8, 0.1, 0))


def test_partition_fails_when_clients_cannot_all_get_data():
    ds = make_blobs(2, 1, 2, 1.0, seed=0)
    with pytest.raises(DataError):
        partition_noniid(ds, PartitionSpec(4, 1.0, 0))


def test_csv_round_trip(tmp_path):
    ds = make_blobs(3, 4, 3, 1.3, seed=9)
    path = tmp_path / "d.csv"
    save_csv(ds, path)
    back = load_csv(path, 3)
    np.testing.assert_allclose(back.features, ds.features, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_csv_small_file(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f0,f1,label\n1,2,0\n3,4,1\n5,6,0\n", encoding="utf-8")
    ds = load_csv(path)
    assert len(ds) == 3 and ds.feature_dim == 2


def test_csv_bad_cell_names_row(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f0,f1,label\n1,x,0\n", encoding="utf-8")
    with pytest.raises(DataError, match="row 2"):
        load_csv(path)


def test_csv_label_out_of_range(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f0,label\n1,0\n2,5\n", encoding="utf-8")
    with pytest.raises(DataError, match="row 3"):
        load_csv(path, n_classes=3)


def test_csv_missing_file(tmp_path):
    with pytest.raises(DataError, match="no such file"):
        load_csv(tmp_path / "nope.csv")


def test_dataset_validates_labels():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1)), np.array([0, 3]), 2)
