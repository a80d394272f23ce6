"""Note events (the weak labels) and the binary unit-activity label matrix.

Every (instrument, pitch) class owns a block of ``P`` representation units:
the first unit is allowed to fire around note onsets, the remaining ``P - 1``
units over the sustained part of each note. Free units, appended after all
class blocks, are permitted everywhere.
"""
import csv
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

DEFAULT_ONSET_TOLERANCE = 0.5
DEFAULT_SUSTAIN_TOLERANCE = 0.25
# absorbs rounding in n * hop_seconds when comparing frame times to note times
_TIME_SLACK = 1e-9


@dataclass(frozen=True)
class NoteEvent:
    instrument_id: int
    midi_pitch: int
    onset_time: float
    offset_time: float
    group_tag: Optional[str] = None

    def __post_init__(self):
        if not 0 <= self.midi_pitch <= 127:
            raise ValueError(f"MIDI pitch {self.midi_pitch} outside 0..127")
        if self.onset_time < 0:
            raise ValueError("onset_time must be >= 0")
        if self.offset_time <= self.onset_time:
            raise ValueError(
                f"offset_time {self.offset_time} must exceed onset_time {self.onset_time}"
            )

    @property
    def key(self):
        return (self.instrument_id, self.midi_pitch)


def sort_notes(notes):
    """Sort by onset time, with deterministic tie-breaking."""
    return sorted(notes, key=lambda n: (n.onset_time, n.offset_time, n.instrument_id,
                                        n.midi_pitch, n.group_tag or ""))


class NoteFormatError(ValueError):
    pass


def _parse_line(fields, lineno):
    if len(fields) not in (4, 5):
        raise NoteFormatError(f"line {lineno}: expected 4 or 5 fields, got {len(fields)}")
    try:
        inst, pitch = int(fields[0]), int(fields[1])
        onset, offset = float(fields[2]), float(fields[3])
    except ValueError as exc:
        raise NoteFormatError(f"line {lineno}: {exc}") from None
    tag = fields[4].strip() if len(fields) == 5 and fields[4].strip() else None
    try:
        return NoteEvent(inst, pitch, onset, offset, tag)
    except ValueError as exc:
        raise NoteFormatError(f"line {lineno}: {exc}") from None


def parse_notes(lines):
    notes = []
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = [f.strip() for f in next(csv.reader([line]))]
        notes.append(_parse_line(fields, lineno))
    return sort_notes(notes)


def load_notes(path):
    """Read a note-list CSV: ``instrument_id,midi_pitch,onset,offset[,group_tag]``."""
    with open(path, encoding="utf-8") as fh:
        try:
            return parse_notes(fh)
        except NoteFormatError as exc:
            raise NoteFormatError(f"{path}: {exc}") from None


def save_notes(path, notes, header=None):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for n in sort_notes(notes):
            row = f"{n.instrument_id},{n.midi_pitch},{n.onset_time:.6g},{n.offset_time:.6g}"
            if n.group_tag:
                row += f",{n.group_tag}"
            fh.write(row + "\n")


def group_notes(notes, by="tag"):
    """Partition notes into named groups by ``tag``, ``instrument`` or ``pitch``."""
    keyfuncs = {
        "tag": lambda n: n.group_tag or "untagged",
        "instrument": lambda n: f"instrument{n.instrument_id}",
        "pitch": lambda n: f"pitch{n.midi_pitch}",
    }
    if by not in keyfuncs:
        raise ValueError(f"cannot group notes by {by!r}; choose from {sorted(keyfuncs)}")
    groups = {}
    for n in sort_notes(notes):
        groups.setdefault(keyfuncs[by](n), []).append(n)
    return dict(sorted(groups.items()))


@dataclass(frozen=True)
class UnitAssignment:
    classes: tuple
    units_per_class: int
    free_units: int = 0

    @property
    def n_units(self):
        return len(self.classes) * self.units_per_class + self.free_units

    K = n_units

    def block(self, key):
        """Row slice of the unit block owned by class ``key``."""
        try:
            c = self.classes.index(tuple(key))
        except ValueError:
            raise KeyError(f"class {tuple(key)} has no units in this assignment") from None
        P = self.units_per_class
        return slice(c * P, (c + 1) * P)

    @property
    def free_slice(self):
        start = len(self.classes) * self.units_per_class
        return slice(start, start + self.free_units)


def build_assignment(notes, units_per_class=3, free_units=0):
    if units_per_class < 2:
        raise ValueError("units_per_class must be at least 2 (one onset unit plus sustain)")
    if free_units < 0:
        raise ValueError("free_units must be >= 0")
    classes = tuple(sorted({n.key for n in notes}))
    return UnitAssignment(classes, units_per_class, free_units)


@dataclass
class LabelMatrix:
    L: np.ndarray
    assignment: UnitAssignment
    hop_seconds: float
    onset_tolerance: float = DEFAULT_ONSET_TOLERANCE
    sustain_tolerance: float = DEFAULT_SUSTAIN_TOLERANCE

    @property
    def shape(self):
        return self.L.shape

    @property
    def n_frames(self):
        return self.L.shape[1]


def _class_rows(notes, assignment, N, hop_seconds, onset_tol, sustain_tol):
    L = np.zeros((assignment.n_units, N))
    t = np.arange(N) * hop_seconds
    for note in notes:
        rows = assignment.block(note.key)
        onset = np.abs(t - note.onset_time) <= onset_tol + _TIME_SLACK
        sustain = ((t >= note.onset_time - sustain_tol - _TIME_SLACK)
                   & (t <= note.offset_time + sustain_tol + _TIME_SLACK))
        L[rows.start, onset] = 1.0
        L[rows.start + 1:rows.stop, sustain] = 1.0
    return L


def build_label_matrix(notes, assignment, n_frames, hop_seconds,
                       onset_tolerance=DEFAULT_ONSET_TOLERANCE,
                       sustain_tolerance=DEFAULT_SUSTAIN_TOLERANCE):
    if n_frames <= 0:
        raise ValueError("n_frames must be positive")
    if onset_tolerance < 0 or sustain_tolerance < 0:
        raise ValueError("tolerances must be non-negative")
    L = _class_rows(notes, assignment, n_frames, hop_seconds,
                    onset_tolerance, sustain_tolerance)
    L[assignment.free_slice] = 1.0
    return LabelMatrix(L, assignment, hop_seconds, onset_tolerance, sustain_tolerance)


def restrict_labels(labels, keep, notes):
    """Labels generated by ``keep`` only; free units are switched off.

    ``keep`` must be a sub-multiset of ``notes``.
    """
    need, have = Counter(keep), Counter(notes)
    extra = [n for n in need if need[n] > have[n]]
    if extra:
        raise ValueError(f"{len(extra)} kept note(s) are not in the note list, e.g. {extra[0]}")
    L = _class_rows(keep, labels.assignment, labels.n_frames, labels.hop_seconds,
                    labels.onset_tolerance, labels.sustain_tolerance)
    return LabelMatrix(L, labels.assignment, labels.hop_seconds,
                       labels.onset_tolerance, labels.sustain_tolerance)


def residual_labels(labels):
    """Labels of the background group: free units only."""
    L = np.zeros_like(labels.L)
    L[labels.assignment.free_slice] = 1.0
    return LabelMatrix(L, labels.assignment, labels.hop_seconds,
                       labels.onset_tolerance, labels.sustain_tolerance)
