"""Reader for a subset of Humdrum **kern.

Supported: ``**kern`` spines (other exclusive interpretations are skipped),
``*M`` meters, ``*k[...]`` key signatures, barlines, ``!`` comments, null
tokens, notes with recip durations and dots, chords, rests and ties.  Spine
splits and merges are rejected.
"""

from __future__ import annotations

import re
from fractions import Fraction

from .score import KeySignature, Score, ScoreError, TimeSignature

_NOTE_RE = re.compile(r"^(?P<recip>\d+)(?P<dots>\.*)(?P<pitch>[a-gA-G]+|r+)(?P<acc>[#\-n]*)$")
# beaming, stems, articulations, slurs and phrase marks carry no timing
_IGNORED = set("LJKk/\\'\"`~^;:,<>(){}&?xXyvMmWwTtSsOoPpzuU|$")
_PC = {"c": 0, "d": 2, "e": 4, "f": 5, "g": 7, "a": 9, "b": 11}
_SHARP_ORDER = "fcgdaeb"


class KernError(ScoreError):
    pass


def kern_pitch(letters: str, accidentals: str = "") -> int:
    """MIDI number of a kern pitch spelling (``c`` = C4 = 60, ``C`` = C3)."""
    base = letters[0]
    if any(ch.lower() != base.lower() for ch in letters):
        raise ValueError(f"mixed pitch letters {letters!r}")
    if base.islower():
        octave = 4 + len(letters) - 1
    else:
        octave = 3 - (len(letters) - 1)
    alter = accidentals.count("#") - accidentals.count("-")
    return 12 * (octave + 1) + _PC[base.lower()] + alter


def kern_duration(recip: str, dots: str) -> Fraction:
    d = int(recip)
    if d == 0:
        dur = Fraction(8)  # breve
    else:
        dur = Fraction(4, d)
    add = dur
    for _ in dots:
        add /= 2
        dur += add
    return dur


def parse_token(token: str, line: int = 0, col: int = 0):
    """Parse one note/rest subtoken -> (duration, midi or None, tie) where tie
    is one of ``None``, ``"start"``, ``"middle"``, ``"end"``."""
    tie = None
    if "[" in token:
        tie = "start"
    elif "_" in token:
        tie = "middle"
    elif "]" in token:
        tie = "end"
    core = "".join(ch for ch in token if ch not in "[]_" and ch not in _IGNORED)
    m = _NOTE_RE.match(core)
    if m is None:
        if "q" in core or "Q" in core:
            raise KernError(f"line {line}, column {col}: grace notes are not supported: {token!r}")
        raise KernError(f"line {line}, column {col}: cannot parse token {token!r}")
    dur = kern_duration(m["recip"], m["dots"])
    if m["pitch"].startswith("r"):
        return dur, None, tie
    try:
        midi = kern_pitch(m["pitch"], m["acc"])
    except ValueError as exc:
        raise KernError(f"line {line}, column {col}: {exc}") from exc
    if not 0 <= midi <= 127:
        raise KernError(f"line {line}, column {col}: pitch out of MIDI range in {token!r}")
    return dur, midi, tie


def key_fifths(token: str) -> int:
    inner = token[token.index("[") + 1: token.index("]")]
    sharps = inner.count("#")
    flats = inner.count("-")
    if sharps and flats:
        raise ValueError(f"mixed key signature {token!r}")
    return sharps if sharps else -flats


def parse_kern(text: str, piece_id: str = "piece", annotations=()) -> Score:
    spines: list[bool] | None = None  # True where the spine is **kern
    t = Fraction(0)
    spine_end: list[Fraction] = []
    events: list[dict] = []
    open_ties: dict[tuple[int, int], dict] = {}
    meters: dict[Fraction, TimeSignature] = {}
    keys: dict[Fraction, KeySignature] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("!"):
            continue
        fields = line.split("\t")
        if spines is None:
            if not line.startswith("**"):
                raise KernError(f"line {lineno}: expected exclusive interpretation")
            spines = [f == "**kern" for f in fields]
            if not any(spines):
                raise KernError(f"line {lineno}: no **kern spine")
            spine_end = [Fraction(0)] * len(fields)
            continue
        if len(fields) != len(spines):
            raise KernError(f"line {lineno}: expected {len(spines)} spines, got {len(fields)}")
        voices = [i for i, k in enumerate(spines) if k]
        voice_of = {s: v for v, s in enumerate(voices)}

        if fields[0].startswith("*"):
            for col, tok in enumerate(fields):
                if tok in ("*^", "*v", "*x", "*+"):
                    raise KernError(f"line {lineno}: spine split/merge ({tok}) is not supported")
                if not spines[col]:
                    continue
                if tok.startswith("*M") and "/" in tok[2:]:
                    num, den = tok[2:].split("/", 1)
                    try:
                        meters[t] = TimeSignature(t, int(num), int(den))
                    except ValueError as exc:
                        raise KernError(f"line {lineno}, column {col + 1}: bad meter {tok!r}") from exc
                elif tok.startswith("*k["):
                    try:
                        keys[t] = KeySignature(t, key_fifths(tok))
                    except ValueError as exc:
                        raise KernError(f"line {lineno}, column {col + 1}: {exc}") from exc
            continue
        if fields[0].startswith("="):
            continue

        started = False
        for col, tok in enumerate(fields):
            if not spines[col] or tok == ".":
                continue
            voice = voice_of[col]
            durs = []
            for sub in tok.split(" "):
                if not sub:
                    continue
                dur, midi, tie = parse_token(sub, lineno, col + 1)
                durs.append(dur)
                key = (voice, midi)
                if midi is not None and tie in ("middle", "end"):
                    ev = open_ties.get(key)
                    if ev is None:
                        raise KernError(f"line {lineno}, column {col + 1}: tie end without start")
                    ev["duration"] += dur
                    if tie == "end":
                        del open_ties[key]
                    continue
                ev = {"onset": t, "duration": dur, "midi_pitch": midi, "voice": voice}
                events.append(ev)
                if tie == "start" and midi is not None:
                    open_ties[key] = ev
            if durs:
                spine_end[col] = t + min(durs)
                started = True
        if started:
            nxt = [spine_end[i] for i in voices if spine_end[i] > t]
            if nxt:
                t = min(nxt)

    if spines is None:
        raise KernError("line 1: empty document")
    if Fraction(0) not in meters:
        raise KernError(f"{piece_id}: no time signature at onset 0")
    return Score.from_events(piece_id, events, sorted(meters.values(), key=lambda m: m.onset),
                             sorted(keys.values(), key=lambda k: k.onset), annotations)
