import numpy as np
import pytest

from dtrec.data import (PAD, DatasetError, ParseError, SyntheticTaxonomy, build_dataset, generate_synthetic,
                        leave_one_out_split, load_interactions, make_batches, pad_histories, read_tsv,
                        training_instances, write_tsv)


def rows_for(user, items, start=0):
    return [(user, str(i), float(start + n)) for n, i in enumerate(items)]


def test_k_core_cascades_to_fixpoint():
    # "x" has four interactions and goes first; that leaves user "f" with four
    rows = []
    for u in "abcde":
        rows += rows_for(u, [1, 2, 3, 4, 5])
    rows += rows_for("f", [1, 2, 3, 4, "x"], start=10)
    for u in "abc":
        rows += rows_for(u, ["x"], start=30)
    ds = build_dataset(rows)
    assert ds.user_ids == list("abcde")
    assert ds.item_ids == ["1", "2", "3", "4", "5"]
    assert all(len(s) == 5 for s in ds.sequences)


def test_k_core_can_empty_the_dataset():
    with pytest.raises(DatasetError):
        build_dataset(rows_for("a", [1, 2, 3]))


def test_dense_ids_and_ordering():
    rows = [("u", "b", 2.0), ("u", "a", 1.0), ("u", "c", 1.0)] + rows_for("u", ["a", "b", "c"], start=5)
    rows += rows_for("v", ["a", "b", "c", "a", "b", "c"])
    ds = build_dataset(rows, core=1)
    assert ds.item_ids == ["a", "b", "c"]
    # equal timestamps keep file order: "a" then "c"
    np.testing.assert_array_equal(ds.sequences[0][:3], [1, 3, 2])
    assert all(s.min() >= 1 for s in ds.sequences)


def test_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("u\ti\t1\nu\ti\n")
    with pytest.raises(ParseError) as err:
        read_tsv(path)
    assert err.value.line_no == 2
    assert ":2:" in str(err.value)
    path.write_text("u\ti\t1\n\nu\ti\tnoon\n")
    with pytest.raises(ParseError) as err:
        read_tsv(path)
    assert err.value.line_no == 3


def test_leave_one_out_split():
    ds = build_dataset(rows_for("u", range(1, 8)) + rows_for("v", range(1, 8)), core=1)
    train, valid, test = leave_one_out_split(ds)
    seq = ds.sequences[0]
    np.testing.assert_array_equal(train.histories[0], seq[:-3])
    assert train.targets[0] == seq[-3]
    np.testing.assert_array_equal(valid.histories[0], seq[:-2])
    assert valid.targets[0] == seq[-2]
    np.testing.assert_array_equal(test.histories[0], seq[:-1])
    assert test.targets[0] == seq[-1]


def test_split_rejects_short_users():
    ds = build_dataset(rows_for("u", [1, 2, 3]), core=1)
    with pytest.raises(DatasetError):
        leave_one_out_split(ds)


def test_training_instances():
    ds = build_dataset(rows_for("u", range(1, 9)), core=1)
    train, _, _ = leave_one_out_split(ds)
    every = training_instances(train)
    assert len(every) == 5  # train part has 6 items -> cuts 1..5
    np.testing.assert_array_equal(every.histories[-1], ds.sequences[0][:5])
    assert every.targets[-1] == ds.sequences[0][5]
    last = training_instances(train, per_user=1)
    assert len(last) == 1 and last.targets[0] == train.targets[0]


def test_pad_histories_left_pads_and_truncates():
    items, lengths = pad_histories([np.array([1, 2, 3, 4]), np.array([7])], max_len=3)
    np.testing.assert_array_equal(items, [[2, 3, 4], [PAD, PAD, 7]])
    np.testing.assert_array_equal(lengths, [3, 1])


def test_batches_cover_view_and_shuffle_deterministically():
    ds = generate_synthetic(SyntheticTaxonomy(branching=(2, 2)), 50, seed=3)
    _, _, test = leave_one_out_split(ds)
    a = np.concatenate([b.users for b in make_batches(test, 16, seed=1, epoch=2)])
    b = np.concatenate([b.users for b in make_batches(test, 16, seed=1, epoch=2)])
    c = np.concatenate([b.users for b in make_batches(test, 16, seed=1, epoch=3)])
    plain = np.concatenate([b.users for b in make_batches(test, 16)])
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    np.testing.assert_array_equal(np.sort(a), plain)


def test_synthetic_size_and_labels():
    tax = SyntheticTaxonomy()
    assert tax.n_items == 640 and tax.n_leaves == 64
    ds = generate_synthetic(tax, 200, seed=0)
    assert ds.n_items == 640 and ds.n_users == 200
    items = np.arange(1, 641)
    np.testing.assert_array_equal(ds.item_leaf[1:], (items - 1) // 10)
    np.testing.assert_array_equal(ds.item_category[1:], (items - 1) // 160)
    lengths = np.array([len(s) for s in ds.sequences])
    assert lengths.min() >= 8 and lengths.max() <= 40


@pytest.mark.parametrize("pi", [0.05, 0.2, 0.6])
def test_leaf_change_rate_matches_binomial(pi):
    # a re-draw lands on the same leaf with probability 1/64
    tax = SyntheticTaxonomy(shift_prob=pi)
    ds = generate_synthetic(tax, 1500, seed=11)
    changes = trials = 0
    for s in ds.sequences:
        leaves = tax.leaf_of(s)
        changes += int((leaves[1:] != leaves[:-1]).sum())
        trials += len(s) - 1
    p = pi * (1 - 1 / tax.n_leaves)
    sd = np.sqrt(trials * p * (1 - p))
    assert abs(changes - trials * p) < 4 * sd


def test_sibling_scope_stays_under_parent():
    tax = SyntheticTaxonomy(shift_prob=0.5, shift_scope="sibling")
    ds = generate_synthetic(tax, 100, seed=2)
    for s in ds.sequences:
        parents = tax.parent_of_leaf(tax.leaf_of(s))
        assert (parents == parents[0]).all()


def test_within_leaf_popularity_is_skewed():
    ds = generate_synthetic(SyntheticTaxonomy(item_skew=1.0), 500, seed=4)
    offsets = np.concatenate([(s - 1) % 10 for s in ds.sequences])
    counts = np.bincount(offsets, minlength=10)
    assert counts[0] > counts[4] > counts[9]


def test_shift_mixture_assigns_user_fractions():
    tax = SyntheticTaxonomy(shift_mixture=((0.5, 0.05), (0.5, 0.6)))
    ds = generate_synthetic(tax, 101, seed=0)
    values, counts = np.unique(ds.user_shift_prob, return_counts=True)
    np.testing.assert_array_equal(values, [0.05, 0.6])
    assert counts.tolist() == [50, 51]


def test_synthetic_is_seed_deterministic():
    a = generate_synthetic(SyntheticTaxonomy(), 30, seed=5)
    b = generate_synthetic(SyntheticTaxonomy(), 30, seed=5)
    c = generate_synthetic(SyntheticTaxonomy(), 30, seed=6)
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()


def test_bad_taxonomy_rejected():
    with pytest.raises(ValueError):
        SyntheticTaxonomy(shift_prob=1.5)
    with pytest.raises(ValueError):
        SyntheticTaxonomy(shift_scope="global")
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticTaxonomy(), 5, len_range=(3, 10))


def test_tsv_round_trip_keeps_labels_and_shift(tmp_path):
    tax = SyntheticTaxonomy(branching=(2, 3), shift_mixture=((0.5, 0.1), (0.5, 0.7)))
    ds = generate_synthetic(tax, 40, seed=1)
    path = tmp_path / "d.tsv"
    write_tsv(ds, path)
    back = load_interactions(path, core=1)
    by_user = dict(zip(back.user_ids, back.sequences))
    for uid, seq in zip(ds.user_ids, ds.sequences):
        raw = [ds.item_ids[i - 1] for i in seq]
        assert [back.item_ids[i - 1] for i in by_user[uid]] == raw
    dense = {raw: n + 1 for n, raw in enumerate(back.item_ids)}
    for n, raw in enumerate(ds.item_ids, start=1):
        if raw in dense:
            assert back.item_category[dense[raw]] == ds.item_category[n]
    shift = dict(zip(back.user_ids, back.user_shift_prob))
    assert all(shift[u] == p for u, p in zip(ds.user_ids, ds.user_shift_prob))


def test_five_item_user_is_the_minimum_split():
    ds = build_dataset(rows_for("u", [1, 2, 3, 4, 5]), core=1)
    train, valid, test = leave_one_out_split(ds)
    np.testing.assert_array_equal(train.histories[0], ds.sequences[0][:2])
    assert train.targets[0] == ds.sequences[0][2]
    assert valid.targets[0] == ds.sequences[0][3] and test.targets[0] == ds.sequences[0][4]
    assert len(train) == len(valid) == len(test) == ds.n_users
