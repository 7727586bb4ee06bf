import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metamf.dataset import (
    RatingFormat,
    RatingRecord,
    Ratings,
    group_size,
    identify_user_groups,
    load_ratings,
    read_split_manifest,
    rescale_ratings,
    sample_privacy_budget,
    split_dataset,
    synthetic_ratings,
    write_split_manifest,
)
from metamf.errors import ContractError, IngestionError


def write(tmp_path, text, name="r.txt"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_densifies_ids(tmp_path):
    p = write(tmp_path, "7\t1\t4\n9\t1\t3\n7\t2\t5\n")
    records, maps = load_ratings(p)
    assert maps.n_users == 2
    assert sorted(set(records.users.tolist())) == [0, 1]
    assert maps.raw_user(1) == "9"
    assert maps.users["7"] == 0


def test_load_multichar_delimiter(tmp_path):
    p = write(tmp_path, "1::2::5\n")
    records, _ = load_ratings(p, RatingFormat.parse("movielens"))
    assert records[0] == RatingRecord(0, 0, 5.0)


def test_load_keeps_duplicates_and_order(tmp_path):
    p = write(tmp_path, "a,x,1\na,x,2\nb,y,3\n")
    records, _ = load_ratings(p, RatingFormat.parse("csv"))
    assert list(records) == [(0, 0, 1.0), (0, 0, 2.0), (1, 1, 3.0)]


def test_load_errors_carry_line_number(tmp_path):
    p = write(tmp_path, "1\t2\t3\n1\t2\tfive\n")
    with pytest.raises(IngestionError, match="line 2"):
        load_ratings(p)
    p = write(tmp_path, "1\t2\t3\n\n1 2 3\n", "b.txt")
    with pytest.raises(IngestionError, match="line 3"):
        load_ratings(p)


def test_load_empty_file_is_contract_error(tmp_path):
    with pytest.raises(ContractError):
        load_ratings(write(tmp_path, ""))


def test_format_descriptor_columns_and_header(tmp_path):
    fmt = RatingFormat.parse("delimiter=;,columns=item:rating:user,header=1")
    p = write(tmp_path, "item;rating;user\n10;4;u1\n11;2;u2\n")
    records, maps = load_ratings(p, fmt)
    assert list(records) == [(0, 0, 4.0), (1, 1, 2.0)]
    assert maps.raw_item(1) == "11"
    assert RatingFormat.parse(fmt.describe().replace("'", "")) == fmt


def test_rescale_endpoints_and_midpoint():
    r = Ratings([0, 0, 0], [0, 1, 2], [-10.0, 10.0, 0.0])
    out = rescale_ratings(r, (-10, 10))
    assert out.ratings.tolist() == [1.0, 5.0, 3.0]


def test_rescale_identity_and_errors():
    r = Ratings([0, 0], [0, 1], [1.0, 4.5])
    assert rescale_ratings(r, (1, 5)).ratings.tolist() == [1.0, 4.5]
    with pytest.raises(ContractError, match="outside"):
        rescale_ratings(Ratings([0], [0], [11.0]), (-10, 10))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=30))
def test_rescale_is_order_preserving(values):
    out = rescale_ratings(Ratings(np.zeros(len(values)), np.arange(len(values)), values), (-10, 10))
    assert np.all((out.ratings >= 1) & (out.ratings <= 5))
    src = np.asarray(values)
    for a in range(len(values)):
        for b in range(len(values)):
            if src[a] < src[b]:
                assert out.ratings[a] <= out.ratings[b]


def _records(n):
    rng = np.random.default_rng(n)
    return Ratings(rng.integers(0, 20, n), rng.integers(0, 30, n), rng.integers(1, 6, n))


def test_split_sizes_ten():
    s = split_dataset(_records(10), seed=1)
    assert (len(s.train), len(s.validation), len(s.test)) == (8, 1, 1)


def test_split_movielens_1m_arithmetic():
    n = 1_000_209
    r = Ratings(np.zeros(n, dtype=int), np.zeros(n, dtype=int), np.ones(n))
    s = split_dataset(r, seed=0, n_users=1, n_items=1)
    assert abs(len(s.test) - 100_021) <= 1
    assert abs(len(s.train) - 0.8 * n) <= 1 and abs(len(s.validation) - 0.1 * n) <= 1


@pytest.mark.parametrize("n", [10, 11, 57, 1234])
def test_split_is_a_partition(n):
    s = split_dataset(_records(n), seed=3)
    idx = np.concatenate([s.train_index, s.val_index, s.test_index])
    assert sorted(idx.tolist()) == list(range(n))
    for size, frac in ((len(s.train), 0.8), (len(s.validation), 0.1), (len(s.test), 0.1)):
        assert abs(size - frac * n) <= 1


def test_split_deterministic_and_validated():
    a, b = split_dataset(_records(100), seed=5), split_dataset(_records(100), seed=5)
    assert a.train == b.train and a.test == b.test
    with pytest.raises(ContractError):
        split_dataset(_records(100), ratios=(0.8, 0.1, 0.2))
    with pytest.raises(ContractError):
        split_dataset(_records(9))


def test_manifest_roundtrip(tmp_path):
    s = split_dataset(_records(50), seed=2)
    write_split_manifest(s, tmp_path / "m", 50)
    m = read_split_manifest(tmp_path / "m")
    assert (tmp_path / "m").read_text().splitlines()[0] == "split-v1"
    np.testing.assert_array_equal(m["test"], s.test_index)
    assert m["seed"] == 2 and m["n_records"] == 50


def _counts_dataset(counts):
    users = np.repeat(np.arange(len(counts)), counts)
    return Ratings(users, np.zeros(len(users), dtype=int), np.ones(len(users)))


def test_groups_counts_one_to_hundred():
    low, med, high = identify_user_groups(_counts_dataset(np.arange(1, 101)), 100)
    assert low.user_ids == frozenset(range(5))  # counts 1..5
    assert high.user_ids == frozenset(range(95, 100))
    # median count 50.5: the five closest are counts 48..53 minus one tie (ascending id)
    assert med.user_ids == frozenset({47, 48, 49, 50, 51})


@pytest.mark.parametrize("n_users,expected", [(6040, 302), (73421, 3671), (2509, 125), (2113, 106), (7373, 369)])
def test_group_size_matches_published(n_users, expected):
    assert group_size(n_users) == expected


def test_groups_disjoint_with_ties():
    low, med, high = identify_user_groups(_counts_dataset(np.full(80, 3)), 80)
    assert len(low) == len(med) == len(high) == 4
    assert not (low.user_ids & high.user_ids or med.user_ids & low.user_ids or med.user_ids & high.user_ids)
    assert low.user_ids == frozenset(range(4))


def test_groups_require_sixty_users():
    with pytest.raises(ContractError):
        identify_user_groups(_counts_dataset(np.ones(59, dtype=int)), 59)


def test_groups_ignore_users_without_training_ratings():
    counts = np.arange(1, 101)
    counts[:3] = 0
    low, _, _ = identify_user_groups(_counts_dataset(counts), 100)
    assert low.user_ids == frozenset(range(3, 8))


def test_budget_full_is_identity():
    r = synthetic_ratings(30, 20, density=0.3, seed=1)
    s = sample_privacy_budget(r, 1.0, seed=4)
    assert s.records == r


def test_budget_counts():
    r = _counts_dataset(np.array([10, 5]))
    s = sample_privacy_budget(r, 0.3, seed=0)
    assert s.per_user_counts == {0: 3, 1: 2}  # 1.5 rounds half up
    s = sample_privacy_budget(r, 0.1, seed=0)
    assert s.per_user_counts == {0: 1, 1: 1}
    assert np.bincount(s.records.users).tolist() == [1, 1]


@pytest.mark.parametrize("beta", [0.0, -0.1, 1.01])
def test_budget_rejects_bad_beta(beta):
    with pytest.raises(ContractError):
        sample_privacy_budget(_counts_dataset(np.array([3])), beta, 0)


def test_budget_nested_and_subset():
    r = synthetic_ratings(40, 50, density=0.3, profile_skew=1.0, seed=2)
    prev = None
    for beta in (0.1, 0.3, 0.5, 0.7, 1.0):
        s = sample_privacy_budget(r, beta, seed=9)
        kept = set(s.index.tolist())
        if prev is not None:
            assert prev <= kept
        prev = kept
        assert set(zip(s.records.users.tolist(), s.records.items.tolist())) <= set(
            zip(r.users.tolist(), r.items.tolist())
        )


def test_synthetic_covers_every_user_and_item():
    r = synthetic_ratings(50, 30, density=0.1, profile_skew=1.0, seed=0)
    assert set(r.users.tolist()) == set(range(50))
    assert set(r.items.tolist()) == set(range(30))
    assert r.ratings.min() >= 1 and r.ratings.max() <= 5
