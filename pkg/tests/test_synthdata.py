import numpy as np
import pytest

from ulalab.exceptions import ConfigurationError, FormatError
from ulalab.rng import substream
from ulalab.synthdata import (Dataset, draw_biased_colors, empirical_group_table,
                              gen_colored_patterns, gen_colored_task, gen_systematic_split,
                              glyph_templates, read_dataset, systematic_pattern, write_dataset)


def test_beta_rule_frequencies():
    K, beta, n = 10, 0.1, 50000
    rng = np.random.default_rng(0)
    y = rng.integers(0, K, n)
    z = draw_biased_colors(y, K, beta, rng)
    conflict = z != y
    assert abs(conflict.mean() - beta) < 4 * np.sqrt(beta * (1 - beta) / n)
    # conflicting colours are uniform over the K - 1 others
    shift = ((z - y) % K)[conflict]
    counts = np.bincount(shift, minlength=K)[1:]
    assert counts.min() > 0.8 * counts.mean()


@pytest.mark.parametrize("beta", [0.0, 1.0])
def test_beta_extremes(beta):
    d = gen_colored_patterns(5, beta, 500, seed=1)
    assert np.all(d.z == d.y) if beta == 0 else np.all(d.z != d.y)


def test_colored_test_split_is_uniform_over_groups():
    _, _, test = gen_colored_task(4, 0.01, 100, 100, 8000, seed=0)
    table = empirical_group_table(test)
    np.testing.assert_allclose(table, 1 / 16, atol=0.015)


@pytest.mark.parametrize("C", [2, 3, 4, 6])
def test_systematic_pattern_row_and_column_sums(C):
    p = systematic_pattern(6, 6, C, np.random.default_rng(C))
    np.testing.assert_array_equal(p.allowed.sum(axis=1), C)
    np.testing.assert_array_equal(p.allowed.sum(axis=0), C)
    assert p.n_in_distribution == 6 * C
    assert p.n_out_of_distribution == 36 - 6 * C


def test_systematic_split_cells():
    train, valid, test, pattern = gen_systematic_split(6, 6, 4, 600, 200, 360, seed=2)
    assert pattern.n_in_distribution == 24 and pattern.n_out_of_distribution == 12
    assert pattern.in_distribution(train.y, train.z).all()
    assert pattern.in_distribution(valid.y, valid.z).all()
    np.testing.assert_array_equal(empirical_group_table(test), np.full((6, 6), 1 / 36))
    # train and valid are disjoint slices of one draw
    rows = {r.tobytes() for r in train.X}
    assert not any(r.tobytes() in rows for r in valid.X)


def test_empirical_group_table_crafted():
    d = Dataset(np.zeros((4, 3)), [0, 0, 1, 0], [0, 0, 1, 1], 2, 2)
    np.testing.assert_array_equal(empirical_group_table(d), [[0.5, 0.25], [0.0, 0.25]])


def test_dataset_roundtrip(tmp_path):
    d = gen_colored_patterns(3, 0.2, 50, seed=4, split="valid")
    write_dataset(d, tmp_path / "d.ulad")
    assert read_dataset(tmp_path / "d.ulad") == d


def test_dataset_bad_magic_and_truncation(tmp_path):
    d = gen_colored_patterns(3, 0.2, 20, seed=4)
    write_dataset(d, tmp_path / "d.ulad")
    raw = (tmp_path / "d.ulad").read_bytes()
    (tmp_path / "bad.ulad").write_bytes(b"NOPE" + raw[4:])
    (tmp_path / "short.ulad").write_bytes(raw[:-1])
    for name in ("bad.ulad", "short.ulad"):
        with pytest.raises(FormatError):
            read_dataset(tmp_path / name)


def test_generation_is_seeded():
    a = gen_colored_task(4, 0.05, 100, 50, 80, seed=3)
    b = gen_colored_task(4, 0.05, 100, 50, 80, seed=3)
    c = gen_colored_task(4, 0.05, 100, 50, 80, seed=4)
    assert all(x == y for x, y in zip(a, b))
    assert not np.array_equal(a[0].X, c[0].X)
    s1 = gen_systematic_split(6, 6, 3, 100, 20, 36, seed=0)
    s2 = gen_systematic_split(6, 6, 3, 100, 20, 36, seed=0)
    assert s1[0] == s2[0] and s1[2] == s2[2]


def test_features_are_in_unit_range():
    d = gen_colored_patterns(10, 0.01, 200, seed=0)
    assert d.X.shape == (200, 432) and d.X.dtype == np.float32
    assert d.X.min() >= 0 and d.X.max() <= 1


def test_templates_are_distinct():
    t = glyph_templates(14).reshape(14, -1)
    assert len({row.tobytes() for row in t}) == 14


def test_configuration_errors():
    rng = substream(0, "test")
    with pytest.raises(ConfigurationError):
        systematic_pattern(6, 6, 7, rng)
    with pytest.raises(ConfigurationError):
        systematic_pattern(6, 6, 1, rng)
    with pytest.raises(ConfigurationError):
        systematic_pattern(5, 6, 3, rng)
    with pytest.raises(ConfigurationError):
        gen_colored_patterns(4, 1.5, 100)
    with pytest.raises(ConfigurationError):
        Dataset(np.zeros((2, 3)), [0, 1, 1], [0, 1], 2, 2)


def test_visible_view_hides_bias():
    d = gen_colored_patterns(3, 0.1, 30, seed=0)
    view = d.visible()
    assert view._fields == ("X", "y")
