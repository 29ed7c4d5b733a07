"""Node features: general note-wise, spectral (Laplacian eigenvectors) and
local cadence features, plus the manifest describing every column."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from . import graph as graph_mod
from .score import Score, assign_labels, label_classes

GENERAL, SPECTRAL, CADENCE_LOCAL = "GENERAL", "SPECTRAL", "CADENCE_LOCAL"

CHORD_TEMPLATES = {
    "major": (0, 4, 7),
    "minor": (0, 3, 7),
    "diminished": (0, 3, 6),
    "augmented": (0, 4, 8),
    "dominant7": (0, 4, 7, 10),
    "major7": (0, 4, 7, 11),
    "minor7": (0, 3, 7, 10),
    "half_diminished7": (0, 3, 6, 10),
    "diminished7": (0, 3, 6, 9),
}
TS_NUMERATORS = (2, 3, 4, 6, 9, 12)
TS_DENOMINATORS = (2, 4, 8)
NUM_EIGVECS = 20
DENSE_EIGEN_LIMIT = 2000


class FeatureError(ValueError):
    pass


def interval_vector(pcset) -> list[int]:
    """Counts of unordered pitch-class pairs per interval class 1..6."""
    pcs = sorted({int(p) % 12 for p in pcset})
    vec = [0] * 6
    for a, b in combinations(pcs, 2):
        d = (b - a) % 12
        vec[min(d, 12 - d) - 1] += 1
    return vec


def _normal_forms(pcs) -> set[frozenset]:
    return {frozenset((p - t) % 12 for p in pcs) for t in range(12)}


_TEMPLATE_FORMS = {name: _normal_forms(t) for name, t in CHORD_TEMPLATES.items()}


def chord_template_flags(pcset) -> list[bool]:
    """Whether ``pcset`` is a transposition of each chord template, in
    ``CHORD_TEMPLATES`` order."""
    pcs = frozenset(int(p) % 12 for p in pcset)
    return [pcs in forms for forms in _TEMPLATE_FORMS.values()]


# -- onset slices ------------------------------------------------------------

@dataclass
class _Timeline:
    """Integer-tick view of a score, shared by the feature families."""

    ticks_per_quarter: int
    onset: np.ndarray  # per node
    offset: np.ndarray
    pitch: np.ndarray  # -1 for rests
    voice: np.ndarray
    slice_times: np.ndarray  # sorted distinct onsets
    slice_of: np.ndarray  # node -> index into slice_times
    sounding: list[np.ndarray]  # per slice: pitched node ids sounding
    sounding_all: list[np.ndarray]  # per slice: all node ids sounding (incl. rests)

    def pcset(self, s: int) -> set[int]:
        return {int(self.pitch[i]) % 12 for i in self.sounding[s]}


def _timeline(score: Score) -> _Timeline:
    dens = [n.onset.denominator for n in score.notes] + [n.duration.denominator for n in score.notes]
    tpq = math.lcm(*dens) if dens else 1
    onset = np.array([int(n.onset * tpq) for n in score.notes], dtype=np.int64)
    offset = np.array([int(n.offset * tpq) for n in score.notes], dtype=np.int64)
    pitch = np.array([-1 if n.is_rest else n.midi_pitch for n in score.notes], dtype=np.int64)
    voice = np.array([n.voice for n in score.notes], dtype=np.int64)
    times = np.unique(onset)
    slice_of = np.searchsorted(times, onset)
    sounding, sounding_all = [], []
    for t in times:
        alive = np.nonzero((onset <= t) & (offset > t))[0]
        sounding_all.append(alive)
        sounding.append(alive[pitch[alive] >= 0])
    return _Timeline(tpq, onset, offset, pitch, voice, times, slice_of, sounding, sounding_all)


def _manifest(names, category, ranges):
    return [{"name": n, "category": category, "range": list(r)} for n, r in zip(names, ranges)]


GENERAL_NAMES = (
    ["onset_position", "duration_beats", "midi_pitch"]
    + [f"pc_{k}" for k in range(12)]
    + ["beat_position", "is_downbeat", "is_beat_start"]
    + [f"ts_num_{k}" for k in TS_NUMERATORS] + ["ts_num_other"]
    + [f"ts_den_{k}" for k in TS_DENOMINATORS] + ["ts_den_other"]
    + ["is_rest", "voice", "polyphony", "key_fifths", "melodic_interval", "is_step", "is_leap"]
    + [f"iv_{k}" for k in range(1, 7)]
    + [f"chord_{name}" for name in CHORD_TEMPLATES]
)
_SIGNED_GENERAL = {"key_fifths", "melodic_interval"}

CADENCE_NAMES = [
    "is_lowest_at_onset", "is_highest_at_onset", "bass_fifth_motion", "bass_step_motion",
    "soprano_desc_step", "leading_tone_resolution", "dissonance_prev", "voice_count_delta",
    "rest_follows_in_voice", "metric_downbeat", "metric_on_beat", "metric_off_beat",
]


def general_features(score: Score, timeline: _Timeline | None = None):
    """51 general note-wise columns and their manifest entries."""
    tl = timeline or _timeline(score)
    n = len(score.notes)
    out = np.zeros((n, len(GENERAL_NAMES)))
    col = {name: k for k, name in enumerate(GENERAL_NAMES)}
    end = score.end
    slice_iv = {}
    slice_flags = {}
    for i, note in enumerate(score.notes):
        ts = score.time_signature_at(note.onset)
        measure, beat, beat_start, beat_len = score.beat_of(note.onset)
        measure_start = beat_start - beat * beat_len
        row = out[i]
        row[col["onset_position"]] = float(note.onset / end) if end > 0 else 0.0
        row[col["duration_beats"]] = min(float(note.duration / beat_len), 4.0) / 4.0
        if not note.is_rest:
            row[col["midi_pitch"]] = note.midi_pitch / 127.0
            row[col[f"pc_{note.midi_pitch % 12}"]] = 1.0
        row[col["beat_position"]] = float((note.onset - measure_start) / ts.measure_len)
        row[col["is_downbeat"]] = float(note.onset == measure_start)
        row[col["is_beat_start"]] = float(note.onset == beat_start)
        num_name = f"ts_num_{ts.num}" if ts.num in TS_NUMERATORS else "ts_num_other"
        den_name = f"ts_den_{ts.den}" if ts.den in TS_DENOMINATORS else "ts_den_other"
        row[col[num_name]] = 1.0
        row[col[den_name]] = 1.0
        row[col["is_rest"]] = float(note.is_rest)
        row[col["voice"]] = min(note.voice / 16.0, 1.0)
        s = tl.slice_of[i]
        row[col["polyphony"]] = min(len(tl.sounding[s]) / 8.0, 1.0)
        row[col["key_fifths"]] = score.key_at(note.onset) / 7.0
        if not note.is_rest:
            prev = _previous_pitch_in_voice(tl, i)
            if prev is not None:
                delta = note.midi_pitch - prev
                row[col["melodic_interval"]] = max(-12, min(12, delta)) / 12.0
                row[col["is_step"]] = float(abs(delta) in (1, 2))
                row[col["is_leap"]] = float(abs(delta) > 2)
        if s not in slice_iv:
            pcs = tl.pcset(s)
            slice_iv[s] = np.minimum(np.array(interval_vector(pcs)) / 4.0, 1.0)
            slice_flags[s] = np.array(chord_template_flags(pcs), dtype=float)
        row[col["iv_1"]:col["iv_6"] + 1] = slice_iv[s]
        row[col["chord_major"]:] = slice_flags[s]
    ranges = [(-1, 1) if name in _SIGNED_GENERAL else (0, 1) for name in GENERAL_NAMES]
    return out, _manifest(GENERAL_NAMES, GENERAL, ranges)


def _previous_pitch_in_voice(tl: _Timeline, i: int):
    """Pitch of the closest earlier-onset note in the same voice (nearest
    pitch when that onset holds a chord)."""
    mask = (tl.voice == tl.voice[i]) & (tl.onset < tl.onset[i]) & (tl.pitch >= 0)
    cand = np.nonzero(mask)[0]
    if len(cand) == 0:
        return None
    last = tl.onset[cand].max()
    cand = cand[tl.onset[cand] == last]
    k = cand[np.argmin(np.abs(tl.pitch[cand] - tl.pitch[i]))]
    return int(tl.pitch[k])


def cadence_local_features(score: Score, timeline: _Timeline | None = None):
    """12 columns computed from a node's onset slice and the slice at the
    immediately preceding distinct onset."""
    tl = timeline or _timeline(score)
    n = len(score.notes)
    out = np.zeros((n, len(CADENCE_NAMES)))
    nslices = len(tl.slice_times)
    lo = [int(tl.pitch[s].min()) if len(s) else None for s in tl.sounding]
    hi = [int(tl.pitch[s].max()) if len(s) else None for s in tl.sounding]
    # next event per voice, for rest_follows_in_voice
    order = np.lexsort((tl.onset, tl.voice))
    next_is_rest = np.zeros(n, dtype=bool)
    for a in range(len(order) - 1):
        i, j = order[a], order[a + 1]
        if tl.voice[i] != tl.voice[j]:
            continue
        # first later-onset event in the voice
        k = a + 1
        while k < len(order) and tl.voice[order[k]] == tl.voice[i] and tl.onset[order[k]] == tl.onset[i]:
            k += 1
        if k < len(order) and tl.voice[order[k]] == tl.voice[i]:
            next_is_rest[i] = tl.pitch[order[k]] < 0

    for s in range(nslices):
        nodes = np.nonzero(tl.slice_of == s)[0]
        onset = Fraction(int(tl.slice_times[s]), tl.ticks_per_quarter)
        _, beat, beat_start, _ = score.beat_of(onset)
        on_beat = onset == beat_start
        metric = (1.0, 0.0, 0.0) if (on_beat and beat == 0) else (0.0, 1.0, 0.0) if on_beat else (0.0, 0.0, 1.0)
        slice_row = np.zeros(len(CADENCE_NAMES))
        slice_row[9:12] = metric
        tonic = (7 * score.key_at(onset)) % 12
        leading = (tonic + 11) % 12
        lt_prev = False
        if s > 0:
            p = s - 1
            if lo[s] is not None and lo[p] is not None:
                d = lo[s] - lo[p]
                slice_row[2] = float(d % 12 == 5)
                slice_row[3] = float(abs(d) in (1, 2))
            if hi[s] is not None and hi[p] is not None:
                slice_row[4] = float(hi[s] - hi[p] in (-1, -2))
            iv = interval_vector(tl.pcset(p))
            slice_row[6] = float(iv[0] + iv[1] > 0)
            delta = (len(tl.sounding[s]) - len(tl.sounding[p])) / 4.0
            slice_row[7] = max(-1.0, min(1.0, delta))
            lt_prev = leading in tl.pcset(p)
        for i in nodes:
            row = out[i]
            row[:] = slice_row
            pitch = tl.pitch[i]
            if pitch >= 0:
                row[0] = float(pitch == lo[s])
                row[1] = float(pitch == hi[s])
                row[5] = float(lt_prev and pitch % 12 == tonic)
            row[8] = float(next_is_rest[i])
    ranges = [(-1, 1) if name == "voice_count_delta" else (0, 1) for name in CADENCE_NAMES]
    return out, _manifest(CADENCE_NAMES, CADENCE_LOCAL, ranges)


# -- spectral ----------------------------------------------------------------

def normalized_laplacian(offsets, neighbors, n: int) -> sp.csr_matrix:
    """I - D^-1/2 A D^-1/2, with isolated nodes contributing a zero degree term."""
    rows = np.repeat(np.arange(n), np.diff(offsets))
    a = sp.csr_matrix((np.ones(len(neighbors)), (rows, neighbors)), shape=(n, n))
    deg = np.asarray(a.sum(axis=1)).ravel()
    dinv = np.zeros(n)
    dinv[deg > 0] = deg[deg > 0] ** -0.5
    dm = sp.diags(dinv)
    return (sp.identity(n, format="csr") - dm @ a @ dm).tocsr()


def fix_signs(vecs: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    vecs = vecs.copy()
    for k in range(vecs.shape[1]):
        nz = np.nonzero(np.abs(vecs[:, k]) > tol)[0]
        if len(nz) and vecs[nz[0], k] < 0:
            vecs[:, k] = -vecs[:, k]
    return vecs


def _component_eigenpairs(sub: sp.csr_matrix, m: int, dense_limit: int, name: str):
    size = sub.shape[0]
    if size <= dense_limit or m >= size - 1:
        vals, vecs = np.linalg.eigh(sub.toarray())
        return vals[:m], vecs[:, :m]
    v0 = np.random.default_rng(0).uniform(0.5, 1.5, size)
    try:
        # shift-invert just below the spectrum; sub + 1e-3 I is positive definite
        vals, vecs = spla.eigsh(sub, k=m, sigma=-1e-3, which="LM", v0=v0, tol=1e-12)
    except (spla.ArpackNoConvergence, RuntimeError) as exc:
        raise FeatureError(f"{name}: eigensolver did not converge") from exc
    order = np.argsort(vals, kind="stable")
    vecs, _ = np.linalg.qr(vecs[:, order])  # re-orthonormalize inside near-degenerate eigenspaces
    return np.einsum("ij,ij->j", vecs, sub @ vecs), vecs


def laplacian_eigenpairs(offsets, neighbors, n: int, k: int = NUM_EIGVECS,
                         dense_limit: int = DENSE_EIGEN_LIMIT, name: str = "graph"):
    """Smallest ``min(k, n)`` eigenpairs of the normalized Laplacian, ascending,
    unit-norm columns with the first clearly nonzero entry positive.

    The Laplacian is block diagonal over connected components, so each
    component is solved on its own and the spectra are merged.  This keeps
    the repeated zero eigenvalue of a disconnected graph out of the
    iterative solver, which cannot resolve repeated eigenvalues reliably.
    """
    m = min(k, n)
    if m == 0:
        return np.zeros(0), np.zeros((n, 0))
    lap = normalized_laplacian(offsets, neighbors, n)
    adj = sp.csr_matrix((np.ones(len(neighbors)), neighbors, offsets), shape=(n, n))
    n_comp, comp = csgraph.connected_components(adj, directed=False)
    perm = np.argsort(comp, kind="stable")
    bounds = np.searchsorted(comp[perm], np.arange(n_comp + 1))
    lap_p = lap[perm][:, perm].tocsr()  # components become contiguous diagonal blocks
    vals_all, cols = [], []
    for c in range(n_comp):
        lo, hi = bounds[c], bounds[c + 1]
        idx = perm[lo:hi]
        sub = lap_p[lo:hi, lo:hi]
        vals, vecs = _component_eigenpairs(sub, min(m, len(idx)), dense_limit, name)
        vals_all.append(vals)
        cols += [(idx, vecs[:, j]) for j in range(vecs.shape[1])]
    vals = np.concatenate(vals_all)
    # round before sorting so ties across components order by component
    order = np.argsort(np.round(vals, 10), kind="stable")[:m]
    out = np.zeros((n, m))
    for j, src in enumerate(order):
        idx, v = cols[src]
        out[idx, j] = v
    out /= np.linalg.norm(out, axis=0, keepdims=True)
    return vals[order], fix_signs(out)


def spectral_features(offsets, neighbors, n: int, k: int = NUM_EIGVECS,
                      name: str = "graph", dense_limit: int = DENSE_EIGEN_LIMIT):
    _, vecs = laplacian_eigenpairs(offsets, neighbors, n, k, dense_limit=dense_limit, name=name)
    out = np.zeros((n, k))
    out[:, :vecs.shape[1]] = vecs
    names = [f"lap_eig_{j}" for j in range(k)]
    return out, _manifest(names, SPECTRAL, [(-1, 1)] * k)


# -- assembly ----------------------------------------------------------------

def assemble(general, spectral, cadence_local=None):
    """Concatenate (matrix, manifest) pairs in GENERAL, SPECTRAL, CADENCE_LOCAL
    order.  ``cadence_local=None`` gives the general-only feature set."""
    parts = [general, spectral] + ([cadence_local] if cadence_local is not None else [])
    rows = {p[0].shape[0] for p in parts}
    if len(rows) != 1:
        raise FeatureError(f"feature blocks disagree on row count: {sorted(rows)}")
    x = np.concatenate([p[0] for p in parts], axis=1)
    manifest = [entry for p in parts for entry in p[1]]
    names = [m["name"] for m in manifest]
    if len(set(names)) != len(names):
        raise FeatureError("duplicate feature names")
    bad = np.argwhere(~np.isfinite(x))
    if len(bad):
        node, c = bad[0]
        raise FeatureError(f"non-finite value in feature {names[c]!r} at node {node}")
    return x, manifest


def manifest_hash(manifest) -> str:
    blob = json.dumps([[m["name"], m["category"]] for m in manifest], separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def extract_features(score: Score, offsets, neighbors, feature_set: str = "all"):
    if feature_set not in ("all", "general"):
        raise ValueError(f"unknown feature set {feature_set!r}")
    tl = _timeline(score)
    gen = general_features(score, tl)
    spectral = spectral_features(offsets, neighbors, len(score.notes), name=score.piece_id)
    cad = cadence_local_features(score, tl) if feature_set == "all" else None
    return assemble(gen, spectral, cad)


def build_score_graph(score: Score, scheme: str = "binary:PAC", feature_set: str = "all"):
    """Score -> ScoreGraph with edges, features and labels."""
    edges = graph_mod.build_edges(score)
    offsets, nbrs, _ = graph_mod.csr_from_edges(len(score.notes), edges)
    x, manifest = extract_features(score, offsets, nbrs, feature_set)
    labels = assign_labels(score, scheme)
    return graph_mod.to_graph(score, edges, x, labels, manifest, label_classes(scheme))
