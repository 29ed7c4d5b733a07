"""Score model, Note-Table reader/writer, beat map and cadence labels.

Times are exact rationals (:class:`fractions.Fraction`) in quarter-note
units measured from the start of the piece.
"""

from __future__ import annotations

import bisect
import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

CADENCE_CLASSES = ("PAC", "rIAC", "HC")
NOTE_TABLE_HEADER = ("onset", "duration", "midi_pitch", "voice", "is_rest")


class ScoreError(ValueError):
    """Raised for malformed or unsupported score input."""


def parse_rational(text) -> Fraction:
    """Parse ``"a/b"``, an integer, or a Fraction into a Fraction."""
    if isinstance(text, Fraction):
        return text
    if isinstance(text, int):
        return Fraction(text)
    s = str(text).strip()
    if not s:
        raise ValueError("empty rational")
    if "." in s or "e" in s.lower():
        raise ValueError(f"not an exact rational: {s!r}")
    return Fraction(s)


def format_rational(q: Fraction) -> str:
    q = Fraction(q)
    if q.denominator == 1:
        return str(q.numerator)
    return f"{q.numerator}/{q.denominator}"


@dataclass(frozen=True)
class NoteEvent:
    id: int
    onset: Fraction
    duration: Fraction
    midi_pitch: int | None
    voice: int
    is_rest: bool

    def __post_init__(self):
        if self.duration <= 0:
            raise ScoreError(f"note {self.id}: duration must be > 0, got {self.duration}")
        if self.onset < 0:
            raise ScoreError(f"note {self.id}: negative onset {self.onset}")
        if self.is_rest != (self.midi_pitch is None):
            raise ScoreError(f"note {self.id}: midi_pitch must be present iff not a rest")
        if self.midi_pitch is not None and not 0 <= self.midi_pitch <= 127:
            raise ScoreError(f"note {self.id}: midi pitch {self.midi_pitch} out of range")
        if self.voice < 0:
            raise ScoreError(f"note {self.id}: negative voice")

    @property
    def offset(self) -> Fraction:
        return self.onset + self.duration


@dataclass(frozen=True)
class TimeSignature:
    onset: Fraction
    num: int
    den: int

    @property
    def measure_len(self) -> Fraction:
        return Fraction(4 * self.num, self.den)

    @property
    def beat_len(self) -> Fraction:
        return Fraction(4, self.den)


@dataclass(frozen=True)
class KeySignature:
    onset: Fraction
    fifths: int


@dataclass(frozen=True)
class CadenceAnnotation:
    beat_onset: Fraction
    cadence_class: str

    def __post_init__(self):
        if self.beat_onset < 0:
            raise ScoreError("cadence annotation before onset 0")
        if self.cadence_class not in CADENCE_CLASSES:
            raise ScoreError(f"unknown cadence class {self.cadence_class!r}")


def _note_sort_key(n: NoteEvent):
    return (n.onset, n.is_rest, -1 if n.midi_pitch is None else n.midi_pitch, n.voice)


@dataclass(frozen=True)
class Score:
    piece_id: str
    notes: tuple[NoteEvent, ...]
    time_signatures: tuple[TimeSignature, ...]
    key_signatures: tuple[KeySignature, ...] = ()
    annotations: tuple[CadenceAnnotation, ...] = ()
    _beat_map: "BeatMap" = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.time_signatures or self.time_signatures[0].onset != 0:
            raise ScoreError(f"{self.piece_id}: no time signature at onset 0")
        ts_on = [t.onset for t in self.time_signatures]
        if ts_on != sorted(ts_on) or len(set(ts_on)) != len(ts_on):
            raise ScoreError(f"{self.piece_id}: time signatures not strictly sorted by onset")
        ks_on = [k.onset for k in self.key_signatures]
        if ks_on != sorted(ks_on):
            raise ScoreError(f"{self.piece_id}: key signatures not sorted by onset")
        for i, n in enumerate(self.notes):
            if n.id != i:
                raise ScoreError(f"{self.piece_id}: note ids must be 0..n-1 in order")
        keys = [_note_sort_key(n) for n in self.notes]
        if keys != sorted(keys):
            raise ScoreError(f"{self.piece_id}: notes not sorted by onset, then pitch")
        object.__setattr__(self, "_beat_map", BeatMap(self.time_signatures))

    @classmethod
    def from_events(cls, piece_id, events: Iterable[dict], time_signatures, key_signatures=(),
                    annotations=()) -> "Score":
        """Build a Score from unsorted event dicts (onset, duration, midi_pitch, voice)."""
        raw = []
        for ev in events:
            pitch = ev.get("midi_pitch")
            raw.append(NoteEvent(0, Fraction(ev["onset"]), Fraction(ev["duration"]),
                                 None if pitch is None else int(pitch), int(ev.get("voice", 0)),
                                 pitch is None))
        raw.sort(key=_note_sort_key)
        notes = tuple(NoteEvent(i, n.onset, n.duration, n.midi_pitch, n.voice, n.is_rest)
                      for i, n in enumerate(raw))
        return cls(piece_id, notes, tuple(time_signatures), tuple(key_signatures),
                   tuple(annotations))

    def __len__(self):
        return len(self.notes)

    def beat_of(self, onset) -> tuple[int, int, Fraction, Fraction]:
        return self._beat_map.beat_of(onset)

    def key_at(self, onset: Fraction) -> int:
        fifths = 0
        for k in self.key_signatures:
            if k.onset <= onset:
                fifths = k.fifths
            else:
                break
        return fifths

    def time_signature_at(self, onset: Fraction) -> TimeSignature:
        return self._beat_map.signature_at(onset)

    @property
    def end(self) -> Fraction:
        return max((n.offset for n in self.notes), default=Fraction(0))


class BeatMap:
    """Maps onsets to (measure, beat, beat_start, beat_len) across meter changes.

    Measure 1 starts at onset 0.  A signature change that falls inside a
    measure starts a new measure at the change.
    """

    def __init__(self, time_signatures: Sequence[TimeSignature]):
        self.sigs = list(time_signatures)
        # first measure number of each signature span
        self.first_measure = []
        measure = 1
        for i, ts in enumerate(self.sigs):
            self.first_measure.append(measure)
            if i + 1 < len(self.sigs):
                span = self.sigs[i + 1].onset - ts.onset
                measure += math.ceil(span / ts.measure_len)

    def _index(self, onset: Fraction) -> int:
        idx = 0
        for i, ts in enumerate(self.sigs):
            if ts.onset <= onset:
                idx = i
            else:
                break
        return idx

    def signature_at(self, onset: Fraction) -> TimeSignature:
        return self.sigs[self._index(Fraction(onset))]

    def beat_of(self, onset) -> tuple[int, int, Fraction, Fraction]:
        onset = Fraction(onset)
        if onset < 0:
            raise ValueError(f"onset before 0: {onset}")
        i = self._index(onset)
        ts = self.sigs[i]
        rel = onset - ts.onset
        k = math.floor(rel / ts.measure_len)
        measure_start = ts.onset + k * ts.measure_len
        beat = math.floor((onset - measure_start) / ts.beat_len)
        beat_start = measure_start + beat * ts.beat_len
        return self.first_measure[i] + k, beat, beat_start, ts.beat_len


def beat_of(score: Score, onset) -> tuple[int, int, Fraction, Fraction]:
    return score.beat_of(onset)


def label_classes(scheme: str) -> tuple[str, ...]:
    """Class names for a labeling scheme.

    ``"multiclass"`` gives no-cadence plus all cadence types; ``"binary:PAC"``
    (or any single cadence type) gives no-cadence vs that type.
    """
    if scheme == "multiclass":
        return ("none",) + CADENCE_CLASSES
    if scheme.startswith("multiclass:"):
        chosen = tuple(c for c in scheme.split(":", 1)[1].split(",") if c)
        for c in chosen:
            if c not in CADENCE_CLASSES:
                raise ValueError(f"unknown cadence class {c!r}")
        return ("none",) + chosen
    if scheme.startswith("binary:"):
        c = scheme.split(":", 1)[1]
        if c not in CADENCE_CLASSES:
            raise ValueError(f"unknown cadence class {c!r}")
        return ("none", c)
    raise ValueError(f"unknown label scheme {scheme!r}")


def assign_labels(score: Score, scheme: str = "binary:PAC") -> np.ndarray:
    """One integer label per node: 0 = no cadence, else the class index.

    A node (note or rest) carries a cadence label iff its onset lies inside
    the annotated arrival beat.  Off-beat annotations are snapped to the
    enclosing beat with a warning.
    """
    classes = label_classes(scheme)
    cls_id = {c: i for i, c in enumerate(classes)}
    labels = np.zeros(len(score.notes), dtype=np.int64)
    if not score.annotations or not score.notes:
        return labels
    onsets = [n.onset for n in score.notes]
    for ann in score.annotations:
        if ann.cadence_class not in cls_id:
            continue
        _, _, start, blen = score.beat_of(ann.beat_onset)
        if start != ann.beat_onset:
            warnings.warn(f"{score.piece_id}: cadence at {ann.beat_onset} is not on a beat "
                          f"start; snapped to {start}", stacklevel=2)
        lo = bisect.bisect_left(onsets, start)
        c = cls_id[ann.cadence_class]
        for i in range(lo, len(onsets)):
            if onsets[i] >= start + blen:
                break
            # lower class id wins if two annotations share a beat
            if labels[i] == 0 or c < labels[i]:
                labels[i] = c
    return labels


# -- Note-Table format ---------------------------------------------------------

def _parse_bool(s: str, line: int) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no", ""):
        return False
    raise ScoreError(f"line {line}: bad is_rest value {s!r}")


def _meta_signatures(meta: dict, piece_id: str):
    try:
        ts = tuple(TimeSignature(parse_rational(t["onset"]), int(t["num"]), int(t["den"]))
                   for t in meta.get("time_signatures", []))
        ks = tuple(KeySignature(parse_rational(k["onset"]), int(k["fifths"]))
                   for k in meta.get("key_signatures", []))
        cad = tuple(CadenceAnnotation(parse_rational(c["onset"]), str(c["type"]))
                    for c in meta.get("cadences", []))
    except (KeyError, TypeError, ValueError, ZeroDivisionError) as exc:
        if isinstance(exc, ScoreError):
            raise
        raise ScoreError(f"{piece_id}: malformed metadata: {exc}") from exc
    if not ts or ts[0].onset != 0:
        raise ScoreError(f"{piece_id}: missing time signature at onset 0")
    for k in ks:
        if not -7 <= k.fifths <= 7:
            raise ScoreError(f"{piece_id}: key signature fifths {k.fifths} out of range")
    return ts, tuple(sorted(ks, key=lambda k: k.onset)), cad


def _rows_to_events(rows: Iterable[tuple[int, dict]]):
    events = []
    for line, row in rows:
        try:
            onset = parse_rational(row["onset"])
            dur = parse_rational(row["duration"])
            is_rest = _parse_bool(str(row.get("is_rest", "0")), line)
            pitch_s = str(row.get("midi_pitch", "") if row.get("midi_pitch") is not None else "")
            voice = int(str(row.get("voice", "0")).strip() or 0)
        except ScoreError:
            raise
        except (KeyError, ValueError, ZeroDivisionError) as exc:
            raise ScoreError(f"line {line}: malformed row: {exc}") from exc
        if dur <= 0:
            raise ScoreError(f"line {line}: duration must be > 0, got {format_rational(dur)}")
        if onset < 0:
            raise ScoreError(f"line {line}: negative onset")
        pitch_s = pitch_s.strip()
        if is_rest:
            if pitch_s not in ("", "-", "None", "null"):
                raise ScoreError(f"line {line}: rest with a pitch")
            pitch = None
        else:
            try:
                pitch = int(pitch_s)
            except ValueError as exc:
                raise ScoreError(f"line {line}: bad midi_pitch {pitch_s!r}") from exc
            if not 0 <= pitch <= 127:
                raise ScoreError(f"line {line}: midi pitch {pitch} out of range")
        events.append({"onset": onset, "duration": dur, "midi_pitch": pitch, "voice": voice})
    return events


def parse_note_table(text: str, meta: dict | None = None, piece_id: str = "piece") -> Score:
    """Parse a Note-Table document.

    ``text`` is either the TSV table (signatures and cadences then come from
    ``meta``, the parsed ``<piece>.meta.json`` sidecar) or a single JSON
    document holding ``notes`` plus the sidecar keys.
    """
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScoreError(f"line {exc.lineno}: invalid JSON: {exc.msg}") from exc
        piece_id = doc.get("piece_id", piece_id)
        rows = [(i + 1, r) for i, r in enumerate(doc.get("notes", []))]
        meta = {**doc, **(meta or {})}
    else:
        reader = csv.reader(io.StringIO(text), delimiter="\t")
        lines = [(i + 1, r) for i, r in enumerate(reader) if r and any(c.strip() for c in r)]
        if not lines:
            raise ScoreError("line 1: missing header")
        hline, header = lines[0]
        header = [h.strip() for h in header]
        missing = [h for h in ("onset", "duration") if h not in header]
        if missing:
            raise ScoreError(f"line {hline}: header lacks {missing}")
        rows = []
        for line, r in lines[1:]:
            if len(r) != len(header):
                raise ScoreError(f"line {line}: expected {len(header)} fields, got {len(r)}")
            rows.append((line, dict(zip(header, r))))
        if meta is None:
            raise ScoreError(f"{piece_id}: TSV note table requires a metadata sidecar")
        piece_id = meta.get("piece_id", piece_id)
    ts, ks, cad = _meta_signatures(meta, piece_id)
    return Score.from_events(piece_id, _rows_to_events(rows), ts, ks, cad)


def serialize_note_table(score: Score) -> tuple[str, dict]:
    """Return (TSV text, sidecar metadata dict) for ``score``."""
    out = io.StringIO()
    out.write("\t".join(NOTE_TABLE_HEADER) + "\n")
    for n in score.notes:
        pitch = "" if n.midi_pitch is None else str(n.midi_pitch)
        out.write(f"{format_rational(n.onset)}\t{format_rational(n.duration)}\t{pitch}\t"
                  f"{n.voice}\t{int(n.is_rest)}\n")
    return out.getvalue(), score_meta(score)


def score_meta(score: Score) -> dict:
    return {
        "piece_id": score.piece_id,
        "time_signatures": [{"onset": format_rational(t.onset), "num": t.num, "den": t.den}
                            for t in score.time_signatures],
        "key_signatures": [{"onset": format_rational(k.onset), "fifths": k.fifths}
                           for k in score.key_signatures],
        "cadences": [{"onset": format_rational(c.beat_onset), "type": c.cadence_class}
                     for c in score.annotations],
    }
