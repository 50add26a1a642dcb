import itertools

import pytest
from hypothesis import given, strategies as st

from onlinectc.labels import (
    Alphabet,
    InvalidLabelError,
    collapse_path,
    extend_labels,
    extend_tokens,
)

DOG = Alphabet(tuple("DGO"))


def ext_of(word, alphabet=DOG):
    return extend_labels(alphabet.encode(word), alphabet)


def test_alphabet_layout():
    assert DOG.size == 4
    assert DOG.blank_id == 0
    assert DOG.encode("DOG") == [1, 3, 2]
    assert DOG.decode([0, 1]) == ["<b>", "D"]


def test_extend_dog():
    ext = ext_of("DOG")
    assert DOG.decode(ext.ids) == ["<b>", "D", "<b>", "O", "<b>", "G", "<b>"]
    assert len(ext) == 7
    assert extend_tokens(list("DOG"), "b") == ["b", "D", "b", "O", "b", "G", "b"]


def test_extend_empty_and_repeat():
    assert list(extend_labels([]).ids) == [0]
    assert list(extend_labels([1, 1]).ids) == [0, 1, 0, 1, 0]


def test_extend_rejects_unknown_label():
    with pytest.raises(InvalidLabelError):
        DOG.encode("DZ")
    with pytest.raises(InvalidLabelError):
        extend_labels([4], DOG)
    with pytest.raises(InvalidLabelError):
        extend_labels([0])


@pytest.mark.parametrize(
    "path, expected",
    [(["a", "a", "b", "c"], ["a", "c"]), (["b", "b"], []), (["a", "b", "a"], ["a", "a"])],
)
def test_collapse(path, expected):
    assert collapse_path(path, blank="b") == expected


def test_transitions_examples():
    ext = ext_of("DOG")
    assert ext.transitions(4) == (2, 6)
    assert ext.transitions(1)[0] == 0
    aa = extend_labels([1, 1])
    assert aa.transitions(4)[0] == 3
    with pytest.raises(IndexError):
        ext.transitions(0)
    with pytest.raises(IndexError):
        ext.transitions(8)


def test_positions_of():
    ext = ext_of("DOG")
    assert ext.positions_of(0) == [1, 3, 5, 7]
    assert ext.positions_of(DOG.encode("O")[0]) == [4]
    assert ext.positions_of(99) == []


targets = st.lists(st.integers(1, 3), max_size=5)


@given(targets)
def test_f_g_consistent(z):
    ext = extend_labels(z)
    n = len(ext)
    for u in range(1, n + 1):
        for i in range(1, n + 1):
            f, _ = ext.transitions(u)
            _, g = ext.transitions(i)
            assert (f <= i <= u) == (i <= u <= g)


@given(targets)
def test_positions_partition(z):
    ext = extend_labels(z)
    seen = sorted(u for k in range(4) for u in ext.positions_of(k))
    assert seen == list(range(1, len(ext) + 1))


def lattice_paths(ext, T):
    """Every path through the alpha lattice ending in a terminal cell."""
    n = len(ext)
    starts = [0, 1] if n > 1 else [0]
    out = []

    def walk(u, path):
        if len(path) == T:
            if u >= n - 2:
                out.append([int(ext.ids[v]) for v in path])
            return
        for v in (u, u + 1, u + 2):
            if v >= n:
                continue
            if v == u + 2 and not ext.skip[v]:
                continue
            walk(v, path + [v])

    for s in starts:
        walk(s, [s])
    return out


@pytest.mark.parametrize("z", [[], [1], [1, 1], [1, 2], [2, 1, 2], [1, 1, 1]])
@pytest.mark.parametrize("T", range(1, 7))
def test_lattice_paths_collapse_to_target(z, T):
    ext = extend_labels(z)
    paths = lattice_paths(ext, T)
    for p in paths:
        assert collapse_path(p) == z
    # conversely every path collapsing to z is a lattice path
    expected = [list(p) for p in itertools.product(range(3), repeat=T) if collapse_path(p) == z]
    assert sorted(paths) == sorted(expected)
