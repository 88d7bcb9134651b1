"""Chord-label grammar, annotation files, and class vocabularies.

Labels follow the common ``ROOT[:QUALITY][(DEGREES)][/BASS]`` text syntax:
a natural root A..G with any number of ``#`` or ``b`` modifiers, an
optional shorthand quality, an optional parenthesised degree list whose
entries add degrees (or remove them when starred, e.g. ``*3``), and an
optional bass degree. ``N`` is the no-chord token and ``X`` marks a label
that could not be read.

Two class vocabularies are supported: a 25-class one (12 roots as major
or minor, plus no-chord) and a 170-class one (12 roots across 14
qualities, plus no-chord, plus unknown). Labels a vocabulary cannot
express map to SKIP, which downstream code excludes from losses and
score denominators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

SKIP = -1

NO_CHORD = "N"
UNKNOWN = "X"

_NATURALS = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}

# Canonical output spelling uses sharps.
PITCH_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")

# Quality order is load-bearing: it fixes class ids in the large
# vocabulary and breaks ties in the largest-template reduction.
QUALITIES = (
    "maj", "min", "dim", "aug", "sus2", "sus4", "maj6", "min6",
    "7", "maj7", "min7", "minmaj7", "dim7", "hdim7",
)

TEMPLATES = {
    "maj": frozenset({0, 4, 7}),
    "min": frozenset({0, 3, 7}),
    "dim": frozenset({0, 3, 6}),
    "aug": frozenset({0, 4, 8}),
    "sus2": frozenset({0, 2, 7}),
    "sus4": frozenset({0, 5, 7}),
    "maj6": frozenset({0, 4, 7, 9}),
    "min6": frozenset({0, 3, 7, 9}),
    "7": frozenset({0, 4, 7, 10}),
    "maj7": frozenset({0, 4, 7, 11}),
    "min7": frozenset({0, 3, 7, 10}),
    "minmaj7": frozenset({0, 3, 7, 11}),
    "dim7": frozenset({0, 3, 6, 9}),
    "hdim7": frozenset({0, 3, 6, 10}),
}

_QUALITY_INDEX = {name: i for i, name in enumerate(QUALITIES)}

# Extended shorthands parse to their full pitch-class sets; they reduce
# to a canonical quality only when mapped into a vocabulary.
_EXTENDED = {
    "9": frozenset({0, 2, 4, 7, 10}),
    "maj9": frozenset({0, 2, 4, 7, 11}),
    "min9": frozenset({0, 2, 3, 7, 10}),
    "11": frozenset({0, 2, 4, 5, 7, 10}),
    "13": frozenset({0, 2, 4, 5, 7, 9, 10}),
}

# Scale-degree numbers to semitones above the root (major scale, with
# compound degrees an octave up).
_DEGREE_SEMITONES = {
    1: 0, 2: 2, 3: 4, 4: 5, 5: 7, 6: 9, 7: 11,
    8: 12, 9: 14, 10: 16, 11: 17, 12: 19, 13: 21,
}


class ParseError(ValueError):
    """Malformed chord token or annotation line.

    For single-token errors ``column`` carries the 0-based offset of the
    offending character; line-level errors embed the line number in the
    message instead.
    """

    def __init__(self, message, column=None):
        if column is not None:
            message = f"{message} (column {column})"
        super().__init__(message)
        self.column = column


@dataclass(frozen=True)
class Vocab:
    """A fixed class inventory, identified by name."""

    name: str
    n_classes: int


MAJMIN_25 = Vocab("majmin", 25)
LARGE_170 = Vocab("large", 170)
VOCABS = {v.name: v for v in (MAJMIN_25, LARGE_170)}


@dataclass(frozen=True)
class ChordLabel:
    """A parsed chord symbol.

    ``root`` is a pitch class 0..11 and ``intervals`` the set of
    semitone offsets sounding above it. ``quality`` names the canonical
    template when the interval set matches one exactly, else None.
    ``bass`` is the bass degree as semitones above the root and plays no
    part in classification. The two tokens without pitch content set
    ``special`` to NO_CHORD or UNKNOWN and leave the rest empty.
    """

    root: int | None
    quality: str | None
    intervals: frozenset
    bass: int = 0
    special: str | None = None

    def __post_init__(self):
        if self.special is not None:
            if self.special not in (NO_CHORD, UNKNOWN):
                raise ValueError(f"bad special token {self.special!r}")
            if self.root is not None or self.quality is not None or self.intervals:
                raise ValueError("special labels carry no pitch content")
            return
        if not isinstance(self.root, int) or not 0 <= self.root <= 11:
            raise ValueError(f"root must be a pitch class 0..11, got {self.root!r}")
        if not all(isinstance(i, int) and 0 <= i <= 11 for i in self.intervals):
            raise ValueError("intervals must be pitch classes 0..11")
        if not 0 <= self.bass <= 11:
            raise ValueError(f"bass must be a pitch class 0..11, got {self.bass!r}")
        if self.quality is not None and TEMPLATES.get(self.quality) != self.intervals:
            raise ValueError(f"quality {self.quality!r} does not match the interval set")

    @classmethod
    def no_chord(cls):
        return cls(None, None, frozenset(), 0, NO_CHORD)

    @classmethod
    def unknown(cls):
        return cls(None, None, frozenset(), 0, UNKNOWN)

    @property
    def is_no_chord(self):
        return self.special == NO_CHORD

    @property
    def is_unknown(self):
        return self.special == UNKNOWN

    def pitch_classes(self):
        """Absolute pitch classes sounding in this chord (empty for N/X)."""
        if self.special is not None:
            return frozenset()
        return frozenset((self.root + i) % 12 for i in self.intervals)


def _parse_degree(text, pos):
    """Read one degree (modifiers then number) from ``text`` at ``pos``."""
    start = pos
    shift = 0
    while pos < len(text) and text[pos] in "#b":
        shift += 1 if text[pos] == "#" else -1
        pos += 1
    digits = pos
    while pos < len(text) and text[pos].isdigit():
        pos += 1
    if pos == digits:
        raise ParseError("expected a degree number", pos)
    number = int(text[digits:pos])
    if number not in _DEGREE_SEMITONES:
        raise ParseError(f"degree {number} out of range 1..13", start)
    return (_DEGREE_SEMITONES[number] + shift) % 12, pos


def parse_chord(text):
    """Parse one chord token into a ChordLabel.

    Raises ParseError with the offending column for malformed input.
    """
    if not text:
        raise ParseError("empty chord token", 0)
    if text == NO_CHORD:
        return ChordLabel.no_chord()
    if text == UNKNOWN:
        return ChordLabel.unknown()
    c = text[0]
    if c in (NO_CHORD, UNKNOWN):
        raise ParseError(f"unexpected text after {c!r}", 1)
    if c not in _NATURALS:
        raise ParseError(f"expected a root letter A..G, got {c!r}", 0)
    root = _NATURALS[c]
    pos = 1
    while pos < len(text) and text[pos] in "#b":
        root += 1 if text[pos] == "#" else -1
        pos += 1
    root %= 12

    shorthand = None
    adds = []
    omits = []
    have_list = False
    if pos < len(text) and text[pos] == ":":
        pos += 1
        if pos >= len(text):
            raise ParseError("missing quality after ':'", pos)
        if text[pos] != "(":
            start = pos
            while pos < len(text) and text[pos].isalnum():
                pos += 1
            shorthand = text[start:pos]
            if not shorthand:
                raise ParseError("missing quality after ':'", start)
            if shorthand not in TEMPLATES and shorthand not in _EXTENDED:
                raise ParseError(f"unknown quality {shorthand!r}", start)
        if pos < len(text) and text[pos] == "(":
            have_list = True
            pos += 1
            while True:
                if pos >= len(text):
                    raise ParseError("unterminated degree list", len(text))
                omit = False
                if text[pos] == "*":
                    omit = True
                    pos += 1
                degree, pos = _parse_degree(text, pos)
                (omits if omit else adds).append(degree)
                if pos >= len(text):
                    raise ParseError("unterminated degree list", len(text))
                if text[pos] == ",":
                    pos += 1
                    continue
                if text[pos] == ")":
                    pos += 1
                    break
                raise ParseError("expected ',' or ')' in degree list", pos)

    bass = 0
    if pos < len(text) and text[pos] == "/":
        pos += 1
        bass, pos = _parse_degree(text, pos)
    if pos != len(text):
        raise ParseError(f"unexpected trailing text {text[pos:]!r}", pos)

    if shorthand is not None:
        base = set(TEMPLATES.get(shorthand) or _EXTENDED[shorthand])
    elif have_list:
        base = set()
    else:
        base = set(TEMPLATES["maj"])
    for degree in adds:
        base.add(degree)
    for degree in omits:
        base.discard(degree)
    intervals = frozenset(base)
    quality = next((q for q in QUALITIES if TEMPLATES[q] == intervals), None)
    return ChordLabel(root=root, quality=quality, intervals=intervals, bass=bass)


@dataclass(frozen=True)
class Annotation:
    """Sorted, non-overlapping labeled time intervals.

    Gaps are legal; consumers treat uncovered time as no-chord.
    """

    intervals: tuple

    def __post_init__(self):
        prev_end = 0.0
        for entry in self.intervals:
            start, end, label = entry
            if start < 0:
                raise ValueError(f"negative start time {start}")
            if not start < end:
                raise ValueError(f"empty interval [{start}, {end})")
            if start < prev_end:
                raise ValueError("overlapping intervals")
            if not isinstance(label, ChordLabel):
                raise TypeError("interval labels must be ChordLabel")
            prev_end = end

    @property
    def duration(self):
        return self.intervals[-1][1] if self.intervals else 0.0

    def label_at(self, t):
        """Label active at time ``t``; no-chord outside every interval."""
        for start, end, label in self.intervals:
            if start <= t < end:
                return label
        return ChordLabel.no_chord()


def parse_lab(text):
    """Parse annotation text: one ``start end label`` line per interval.

    Lines whose first non-blank character is ``#`` are comments. Input
    lines may arrive in any order; the result is sorted, any overlap is
    an error naming both lines, and gaps (leading or internal) are
    filled with no-chord intervals.
    """
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ParseError(f"line {lineno}: expected 'start end label', got {raw!r}")
        try:
            start = float(fields[0])
            end = float(fields[1])
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric time in {raw!r}") from None
        if not (math.isfinite(start) and math.isfinite(end)):
            raise ParseError(f"line {lineno}: non-finite time in {raw!r}")
        if start < 0 or end <= start:
            raise ParseError(f"line {lineno}: invalid interval [{start}, {end})")
        try:
            label = parse_chord(fields[2])
        except ParseError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        entries.append((start, end, label, lineno))

    entries.sort(key=lambda e: (e[0], e[1]))
    filled = []
    prev_end = 0.0
    prev_line = None
    for start, end, label, lineno in entries:
        if start < prev_end:
            raise ParseError(f"lines {prev_line} and {lineno} overlap")
        if start > prev_end:
            filled.append((prev_end, start, ChordLabel.no_chord()))
        filled.append((start, end, label))
        prev_end = end
        prev_line = lineno
    return Annotation(tuple(filled))


def reduce_quality(intervals):
    """Largest canonical template contained in the set, or None.

    Equal-size candidates resolve to the earliest in QUALITIES order.
    """
    best = None
    for name in QUALITIES:
        template = TEMPLATES[name]
        if template <= intervals and (best is None or len(template) > len(TEMPLATES[best])):
            best = name
    return best


def to_class(label, vocab):
    """Map a label to a class id in ``vocab``, or SKIP."""
    if vocab.name == "large":
        if label.is_no_chord:
            return 168
        if label.is_unknown:
            return 169
        quality = label.quality or reduce_quality(label.intervals)
        if quality is None:
            return 169
        return label.root * 14 + _QUALITY_INDEX[quality]
    if vocab.name == "majmin":
        if label.is_no_chord:
            return 24
        if label.is_unknown:
            return SKIP
        # Third rule: any chord sounding a major third is major, else a
        # minor third makes it minor; thirdless chords have no class.
        if 4 in label.intervals:
            return label.root * 2
        if 3 in label.intervals:
            return label.root * 2 + 1
        return SKIP
    raise ValueError(f"unknown vocabulary {vocab.name!r}")


def class_to_label(class_id, vocab):
    """Canonical text for a class id (sharps for black keys)."""
    if vocab.name == "majmin":
        if class_id == 24:
            return NO_CHORD
        if not 0 <= class_id < 24:
            raise ValueError(f"class {class_id} outside the 25-class vocabulary")
        quality = "maj" if class_id % 2 == 0 else "min"
        return f"{PITCH_NAMES[class_id // 2]}:{quality}"
    if vocab.name == "large":
        if class_id == 168:
            return NO_CHORD
        if class_id == 169:
            return UNKNOWN
        if not 0 <= class_id < 168:
            raise ValueError(f"class {class_id} outside the 170-class vocabulary")
        return f"{PITCH_NAMES[class_id // 14]}:{QUALITIES[class_id % 14]}"
    raise ValueError(f"unknown vocabulary {vocab.name!r}")


def framewise_targets(annotation, n_frames, vocab, hop=2048, sr=22050):
    """Class id per frame, taking the label active at each frame center.

    Frame t is centered at t*hop/sr. Intervals are half-open, so a
    boundary landing exactly on a center belongs to the later interval.
    Time beyond the annotation is no-chord.
    """
    no_chord = to_class(ChordLabel.no_chord(), vocab)
    intervals = annotation.intervals
    out = []
    idx = 0
    for t in range(n_frames):
        time = t * hop / sr
        while idx < len(intervals) and intervals[idx][1] <= time:
            idx += 1
        if idx < len(intervals) and intervals[idx][0] <= time < intervals[idx][1]:
            out.append(to_class(intervals[idx][2], vocab))
        else:
            out.append(no_chord)
    return out
