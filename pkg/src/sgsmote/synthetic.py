"""Generated four-voice chorale-like pieces with planted cadences.

Two corpora are available:

``local``
    The cadence (dominant to tonic on a downbeat, bass up a fourth or down
    a fifth, soprano stepping down 2->1, complete tonic triad) is visible in
    the arrival chord's own onset and the one before it.  Distractors each
    break one ingredient: no soprano step, weak-beat arrival, plagal bass.

``context``
    Cadences and distractors share identical dominant and tonic voicings;
    only the chord before the dominant (supertonic vs tonic) differs, so a
    node can only tell them apart through its neighbors.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .score import CadenceAnnotation, KeySignature, Score, TimeSignature

CHORDS = {
    "I": (0, (0, 4, 7)),
    "ii": (2, (2, 5, 9)),
    "iii": (4, (4, 7, 11)),
    "IV": (5, (5, 9, 0)),
    "V": (7, (7, 11, 2)),
    "vi": (9, (9, 0, 4)),
}
FILLER_NEXT = {
    "I": ["IV", "vi", "ii", "V", "iii", "I"],
    "ii": ["V", "IV", "vi", "ii"],
    "iii": ["vi", "IV", "ii"],
    "IV": ["I", "ii", "V", "IV"],
    "V": ["vi", "V"],  # never V -> I outside planted events
    "vi": ["ii", "IV", "iii", "vi"],
}
RANGES = {0: (40, 52), 1: (50, 62), 2: (57, 69), 3: (64, 77)}  # bass, tenor, alto, soprano

# fixed voicings in C (bass, tenor, alto, soprano)
V_STEP = (43, 59, 62, 74)
V_NOSTEP = (43, 59, 62, 67)
I_ARRIVAL = (48, 55, 64, 72)
I_NOSTEP = (48, 55, 64, 67)
IV_PLAGAL = (41, 57, 65, 72)
II_PRE = (50, 57, 65, 69)
I_PRE = (48, 55, 64, 67)


def _nearest(pcs, prev, lo, hi, below=None):
    cands = [p for p in range(lo, hi + 1) if p % 12 in pcs and (below is None or p < below)]
    if not cands:
        cands = [p for p in range(lo - 12, hi + 1) if p % 12 in pcs and (below is None or p < below)]
    return min(cands, key=lambda p: (abs(p - prev), p))


def _voice_chord(name, prev):
    root, pcs = CHORDS[name]
    bass = _nearest({root}, prev[0], *RANGES[0])
    sop = _nearest(pcs, prev[3], *RANGES[3])
    alto = _nearest(pcs, prev[2], *RANGES[2], below=sop)
    tenor = _nearest(pcs, prev[1], *RANGES[1], below=alto)
    return (bass, tenor, alto, sop)


def _place(rng, measures, count, taken, lo=4):
    free = [m for m in range(lo, measures - 1) if all(abs(m - t) > 2 for t in taken)]
    chosen = []
    for _ in range(count):
        if not free:
            break
        m = int(rng.choice(free))
        chosen.append(m)
        taken.append(m)
        free = [f for f in free if abs(f - m) > 2]
    return chosen


def generate_piece(piece_id: str, rng, measures: int = 48, corpus: str = "local",
                   n_cadences: int = 4) -> Score:
    """One 4/4 piece.  Measures are numbered from 0 here; the final measure
    always carries a cadence."""
    total = 4 * measures
    forced: dict[int, tuple] = {}  # beat -> (voicing, duration in beats, ornament-free)
    names: dict[int, str] = {}
    cad_beats = []
    taken = [measures - 1]
    pos = _place(rng, measures, n_cadences - 1, taken)

    def plant(beat, pre, dom, arr, pre_name):
        if pre is not None:
            forced[beat - 2] = pre
            names[beat - 2] = pre_name
        forced[beat - 1] = dom
        names[beat - 1] = "V"
        forced[beat] = arr
        forced[beat + 1] = None  # held by the half-note arrival
        names[beat] = names[beat + 1] = "I"

    if corpus == "local":
        for m in pos + [measures - 1]:
            plant(4 * m, None, V_STEP, I_ARRIVAL, None)
            cad_beats.append(4 * m)
        for m in _place(rng, measures, 2, taken):
            plant(4 * m, None, V_NOSTEP, I_NOSTEP, None)
        for m in _place(rng, measures, 2, taken):
            plant(4 * m + 2, None, V_STEP, I_ARRIVAL, None)
        for m in _place(rng, measures, 1, taken):
            forced[4 * m - 1] = IV_PLAGAL
            names[4 * m - 1] = "IV"
            forced[4 * m] = I_ARRIVAL
            forced[4 * m + 1] = None
            names[4 * m] = names[4 * m + 1] = "I"
    elif corpus == "context":
        for m in pos + [measures - 1]:
            plant(4 * m, II_PRE, V_STEP, I_ARRIVAL, "ii")
            cad_beats.append(4 * m)
        for m in _place(rng, measures, n_cadences, taken):
            plant(4 * m, I_PRE, V_STEP, I_ARRIVAL, "I")
    else:
        raise ValueError(f"unknown corpus {corpus!r}")

    fifths = int(rng.integers(-3, 4))
    shift = (7 * fifths) % 12
    if shift > 6:
        shift -= 12

    events = []
    prev = (48, 55, 64, 72)
    chord = "I"
    beat = 0
    protected = set()
    for b in forced:
        protected.update({b - 1, b, b + 1, b + 2})
    while beat < total:
        if beat in forced and forced[beat] is not None:
            voicing = forced[beat]
            chord = names[beat]
            dur = 2 if (beat + 1) in forced and forced[beat + 1] is None else 1
            for v, p in enumerate(voicing):
                events.append({"onset": Fraction(beat), "duration": Fraction(dur),
                               "midi_pitch": p + shift, "voice": v})
            prev = voicing
            beat += dur
            continue
        # filler chord; no fifth-related bass motion into a downbeat
        choices = FILLER_NEXT[chord]
        if (beat + 1) in forced and forced[beat + 1] is not None:
            choices = [c for c in choices if c != "V"] or ["ii"]
        if beat % 4 == 0:
            choices = [c for c in choices if (CHORDS[c][0] - CHORDS[chord][0]) % 12 != 5] or ["vi"]
        nxt = str(rng.choice(choices))
        voicing = _voice_chord(nxt, prev)
        hold_bass = (beat % 2 == 0 and nxt == chord and beat + 1 < total
                     and beat + 1 not in forced and beat + 1 not in protected)
        for v, p in enumerate(voicing):
            if v == 0 and hold_bass:
                events.append({"onset": Fraction(beat), "duration": Fraction(2),
                               "midi_pitch": p + shift, "voice": 0})
                continue
            if v == 0 and events and beat > 0 and _bass_held(events, beat):
                continue
            free = beat not in protected
            r = rng.random()
            if v == 3 and free and r < 0.05:
                events.append({"onset": Fraction(beat), "duration": Fraction(1),
                               "midi_pitch": None, "voice": v})
            elif v in (2, 3) and free and r < 0.2:
                step = int(rng.choice([-2, -1, 1, 2]))
                events.append({"onset": Fraction(beat), "duration": Fraction(1, 2),
                               "midi_pitch": p + shift, "voice": v})
                events.append({"onset": Fraction(beat) + Fraction(1, 2), "duration": Fraction(1, 2),
                               "midi_pitch": p + step + shift, "voice": v})
            else:
                events.append({"onset": Fraction(beat), "duration": Fraction(1),
                               "midi_pitch": p + shift, "voice": v})
        prev = voicing
        chord = nxt
        beat += 1
    anns = [CadenceAnnotation(Fraction(b), "PAC") for b in sorted(cad_beats)]
    return Score.from_events(piece_id, events, [TimeSignature(Fraction(0), 4, 4)],
                             [KeySignature(Fraction(0), fifths)], anns)


def _bass_held(events, beat) -> bool:
    return any(e["voice"] == 0 and e["onset"] < beat < e["onset"] + e["duration"] for e in events[-8:])


def planted_corpus(n_pieces: int = 20, seed: int = 0, corpus: str = "local", measures: int = 48,
                   n_cadences: int = 4) -> list[Score]:
    rng = np.random.default_rng(seed)
    return [generate_piece(f"{corpus}{i + 1:02d}", rng, measures, corpus, n_cadences)
            for i in range(n_pieces)]
