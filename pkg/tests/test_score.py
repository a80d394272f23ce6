import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weaksep.score import (NoteEvent, NoteFormatError, build_assignment, build_label_matrix,
                           group_notes, load_notes, parse_notes, residual_labels,
                           restrict_labels, save_notes)


def fig2_notes():
    # three (instrument, pitch) classes, four notes
    return [
        NoteEvent(0, 60, 0.5, 1.5, "right"),
        NoteEvent(0, 48, 0.0, 2.0, "left"),
        NoteEvent(1, 60, 1.0, 1.8, "right"),
        NoteEvent(0, 60, 2.0, 3.0, "right"),
    ]


def test_load_empty(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    assert load_notes(p) == []


def test_load_single_line(tmp_path):
    p = tmp_path / "one.csv"
    p.write_text("# a comment\n0,60,1.0,2.0,right\n")
    assert load_notes(p) == [NoteEvent(0, 60, 1.0, 2.0, "right")]


def test_load_sorts_and_optional_tag():
    notes = parse_notes(["1,50,2.0,3.0", "0,60,1.0,2.0,left  # trailing"])
    assert notes == [NoteEvent(0, 60, 1.0, 2.0, "left"), NoteEvent(1, 50, 2.0, 3.0)]


@pytest.mark.parametrize("line, match", [
    ("0,60,2.0,1.0", "line 2"),
    ("0,60,1.0", "line 2: expected 4 or 5"),
    ("x,60,1.0,2.0", "line 2"),
    ("0,200,1.0,2.0", "line 2: MIDI pitch"),
])
def test_load_errors_name_line(tmp_path, line, match):
    p = tmp_path / "bad.csv"
    p.write_text("0,60,0.0,1.0\n" + line + "\n")
    with pytest.raises(NoteFormatError, match=match):
        load_notes(p)


def test_save_load_round_trip(tmp_path):
    p = tmp_path / "n.csv"
    save_notes(p, fig2_notes(), header="test piece")
    assert load_notes(p) == parse_notes(p.read_text().splitlines())
    assert sorted(load_notes(p), key=repr) == sorted(fig2_notes(), key=repr)


def test_assignment_fig2():
    a = build_assignment(fig2_notes(), units_per_class=3, free_units=0)
    assert a.n_units == 9
    assert a.classes == ((0, 48), (0, 60), (1, 60))
    assert a.block((0, 60)) == slice(3, 6)


def test_assignment_edge_cases():
    assert build_assignment([], 3, free_units=2).n_units == 2
    notes = [NoteEvent(0, 60, 0, 1), NoteEvent(0, 62, 0, 1), NoteEvent(0, 60, 2, 3)]
    a = build_assignment(notes, 2, free_units=4)
    assert a.n_units == 8 and a.free_slice == slice(4, 8)
    with pytest.raises(ValueError):
        build_assignment(notes, 1)


def test_label_matrix_hand_example():
    note = NoteEvent(0, 60, 1.0, 2.0)
    a = build_assignment([note], 2)
    L = build_label_matrix([note], a, 40, 0.1, onset_tolerance=0.2, sustain_tolerance=0.2).L
    onset = np.zeros(40)
    onset[8:13] = 1
    sustain = np.zeros(40)
    sustain[8:23] = 1
    np.testing.assert_array_equal(L[0], onset)
    np.testing.assert_array_equal(L[1], sustain)


def test_free_units_only():
    a = build_assignment([], 3, free_units=3)
    L = build_label_matrix([], a, 5, 0.1).L
    np.testing.assert_array_equal(L, np.ones((3, 5)))


def test_overlapping_notes_union():
    n1, n2 = NoteEvent(0, 60, 1.0, 2.0), NoteEvent(0, 60, 1.5, 3.0)
    a = build_assignment([n1, n2], 2)
    kw = dict(onset_tolerance=0.0, sustain_tolerance=0.0)
    both = build_label_matrix([n1, n2], a, 40, 0.1, **kw).L
    l1 = build_label_matrix([n1], a, 40, 0.1, **kw).L
    l2 = build_label_matrix([n2], a, 40, 0.1, **kw).L
    np.testing.assert_array_equal(both, np.maximum(l1, l2))
    assert both[1, 10:31].all() and not both[1, 31:].any()


def test_unknown_class():
    a = build_assignment([NoteEvent(0, 60, 0, 1)], 2)
    with pytest.raises(KeyError):
        build_label_matrix([NoteEvent(0, 61, 0, 1)], a, 10, 0.1)


def test_restrict_all_notes_zeroes_free_rows():
    notes = fig2_notes()
    a = build_assignment(notes, 3, free_units=2)
    labels = build_label_matrix(notes, a, 40, 0.1)
    r = restrict_labels(labels, notes, notes).L
    want = labels.L.copy()
    want[a.free_slice] = 0
    np.testing.assert_array_equal(r, want)
    assert not restrict_labels(labels, [], notes).L.any()
    np.testing.assert_array_equal(residual_labels(labels).L[a.free_slice], 1)
    assert not residual_labels(labels).L[:9].any()


def test_restrict_by_hand():
    notes = fig2_notes()
    a = build_assignment(notes, 3)
    labels = build_label_matrix(notes, a, 40, 0.1, onset_tolerance=0.1, sustain_tolerance=0.0)
    right = group_notes(notes)["right"]
    r = restrict_labels(labels, right, notes).L
    want = np.zeros_like(r)
    t = np.arange(40) * 0.1
    for n in right:
        rows = a.block(n.key)
        want[rows.start, np.abs(t - n.onset_time) <= 0.1 + 1e-9] = 1
        want[rows.start + 1:rows.stop,
             (t >= n.onset_time - 1e-9) & (t <= n.offset_time + 1e-9)] = 1
    np.testing.assert_array_equal(r, want)
    assert not r[a.block((0, 48))].any()


def test_restrict_rejects_foreign_note():
    notes = fig2_notes()
    labels = build_label_matrix(notes, build_assignment(notes, 2), 10, 0.1)
    with pytest.raises(ValueError):
        restrict_labels(labels, [NoteEvent(0, 60, 5.0, 6.0)], notes)


def test_group_notes():
    groups = group_notes(fig2_notes())
    assert list(groups) == ["left", "right"] and len(groups["right"]) == 3
    assert list(group_notes(fig2_notes(), "instrument")) == ["instrument0", "instrument1"]
    with pytest.raises(ValueError):
        group_notes(fig2_notes(), "velocity")


note_strategy = st.builds(
    lambda inst, pitch, on, dur, tag: NoteEvent(inst, pitch, on, on + dur, tag),
    st.integers(0, 2), st.integers(40, 44), st.floats(0, 5), st.floats(0.05, 2),
    st.sampled_from(["a", "b", "c"]),
)


@settings(max_examples=40, deadline=None)
@given(st.lists(note_strategy, max_size=8), st.randoms(use_true_random=False))
def test_label_properties(notes, rnd):
    a = build_assignment(notes, 2, free_units=1)
    labels = build_label_matrix(notes, a, 60, 0.1)
    L = labels.L
    assert set(np.unique(L)) <= {0.0, 1.0}
    shuffled = list(notes)
    rnd.shuffle(shuffled)
    np.testing.assert_array_equal(build_label_matrix(shuffled, a, 60, 0.1).L, L)

    union = np.zeros_like(L)
    for group in group_notes(notes).values():
        r = restrict_labels(labels, group, notes).L
        assert (r <= L).all()
        union = np.maximum(union, r)
    classes = slice(0, a.free_slice.start)
    np.testing.assert_array_equal(union[classes], L[classes])
