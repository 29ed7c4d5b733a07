from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_normalized_laplacian, jacobi_eigh, random_score_events
from sgsmote.features import (CADENCE_NAMES, GENERAL_NAMES, FeatureError, assemble,
                              build_score_graph, cadence_local_features, chord_template_flags,
                              general_features, interval_vector, laplacian_eigenpairs,
                              manifest_hash, spectral_features)
from sgsmote.graph import csr_from_edges, save_graph
from sgsmote.score import KeySignature, Score, TimeSignature
from sgsmote.synthetic import generate_piece

TS = [TimeSignature(Fraction(0), 4, 4)]
COL = {name: k for k, name in enumerate(GENERAL_NAMES)}
CAD = {name: k for k, name in enumerate(CADENCE_NAMES)}


def score(rows, key=0, sigs=TS):
    """rows: (onset, duration, pitch or None, voice)"""
    events = [{"onset": Fraction(o), "duration": Fraction(d), "midi_pitch": p, "voice": v}
              for o, d, p, v in rows]
    return Score.from_events("f", events, sigs, [KeySignature(Fraction(0), key)], ())


def csr(n, pairs):
    return csr_from_edges(n, [(i, j, 0) for i, j in pairs])[:2]


# -- pitch-class helpers -------------------------------------------------------

def test_interval_vector_major_triad():
    assert interval_vector({0, 4, 7}) == [0, 0, 1, 1, 1, 0]


def test_interval_vector_chromatic_cluster():
    assert interval_vector({0, 1, 2}) == [2, 1, 0, 0, 0, 0]


def test_interval_vector_empty_and_single():
    assert interval_vector(set()) == [0] * 6
    assert interval_vector({5}) == [0] * 6


@given(st.sets(st.integers(0, 11)))
def test_interval_vector_counts_all_pairs(pcs):
    assert sum(interval_vector(pcs)) == comb(len(pcs), 2)


@given(st.sets(st.integers(0, 11)), st.integers(0, 11))
def test_interval_vector_transposition_invariant(pcs, t):
    assert interval_vector(pcs) == interval_vector({(p + t) % 12 for p in pcs})


def test_chord_flags_d_major():
    flags = dict(zip(["major", "minor", "diminished", "augmented", "dominant7", "major7",
                      "minor7", "half_diminished7", "diminished7"], chord_template_flags({2, 6, 9})))
    assert flags["major"] and sum(flags.values()) == 1


def test_chord_flags_g7():
    flags = chord_template_flags({7, 11, 2, 5})
    assert flags[4] and sum(flags) == 1


def test_chord_flags_incomplete_chord():
    assert not any(chord_template_flags({0, 4}))


@given(st.sets(st.integers(0, 11)), st.integers(0, 11))
def test_chord_flags_transposition_invariant(pcs, t):
    assert chord_template_flags(pcs) == chord_template_flags({(p + t) % 12 for p in pcs})


# -- spectral ------------------------------------------------------------------

def test_spectral_two_nodes():
    off, nb = csr(2, [(0, 1)])
    vals, vecs = laplacian_eigenpairs(off, nb, 2)
    np.testing.assert_allclose(vals, [0.0, 2.0], atol=1e-12)
    r = 2 ** -0.5
    np.testing.assert_allclose(vecs, [[r, r], [r, -r]], atol=1e-12)


def test_spectral_padding_small_graph():
    off, nb = csr(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    x, manifest = spectral_features(off, nb, 5)
    assert x.shape == (5, 20)
    assert np.all(x[:, 5:] == 0)
    assert np.any(x[:, 4] != 0)
    assert [m["category"] for m in manifest] == ["SPECTRAL"] * 20


def test_spectral_empty_graph():
    off, nb = csr(0, [])
    x, _ = spectral_features(off, nb, 0)
    assert x.shape == (0, 20)


def test_spectral_matches_jacobi_oracle():
    rng = np.random.default_rng(11)
    n = 10
    pairs = [(i, i + 1) for i in range(n - 1)]
    pairs += [(i, j) for i in range(n) for j in range(i + 2, n) if rng.random() < 0.3]
    off, nb = csr(n, pairs)
    adj = np.zeros((n, n))
    for i, j in pairs:
        adj[i, j] = adj[j, i] = 1
    ref_vals, ref_vecs = jacobi_eigh(dense_normalized_laplacian(adj))
    assert np.min(np.diff(ref_vals)) > 1e-6  # simple spectrum: vectors are defined up to sign
    vals, vecs = laplacian_eigenpairs(off, nb, n, k=n)
    np.testing.assert_allclose(vals, ref_vals, atol=1e-10)
    for k in range(n):
        ref = ref_vecs[:, k]
        first = np.nonzero(np.abs(ref) > 1e-10)[0][0]
        ref = ref if ref[first] > 0 else -ref
        np.testing.assert_allclose(vecs[:, k], ref, atol=1e-8)


def test_sparse_route_matches_dense_route():
    # a long path has a simple spectrum; the iterative solver must agree with eigh
    n = 300
    off, nb = csr(n, [(i, i + 1) for i in range(n - 1)])
    dvals, dvecs = laplacian_eigenpairs(off, nb, n, k=8, dense_limit=10**6)
    svals, svecs = laplacian_eigenpairs(off, nb, n, k=8, dense_limit=10)
    np.testing.assert_allclose(svals, dvals, atol=1e-9)
    np.testing.assert_allclose(svecs, dvecs, atol=1e-6)
    expected = 1 - np.cos(np.pi * np.arange(8) / (n - 1))
    np.testing.assert_allclose(dvals, expected, atol=1e-10)


def test_sparse_route_keeps_repeated_zero_eigenvalues():
    # three disjoint paths: the zero eigenvalue has multiplicity three
    n = 3 * 250
    pairs = [(i, i + 1) for i in range(n - 1) if (i + 1) % 250]
    off, nb = csr(n, pairs)
    svals, svecs = laplacian_eigenpairs(off, nb, n, k=6, dense_limit=10)
    dvals, _ = laplacian_eigenpairs(off, nb, n, k=6, dense_limit=10**6)
    np.testing.assert_allclose(svals, dvals, atol=1e-10)
    np.testing.assert_allclose(svals[:3], 0, atol=1e-10)
    np.testing.assert_allclose(svecs.T @ svecs, np.eye(6), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.floats(0.0, 0.5), st.integers(0, 2**32 - 1))
def test_spectral_invariants(n, p, seed):
    rng = np.random.default_rng(seed)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    off, nb = csr(n, pairs)
    vals, vecs = laplacian_eigenpairs(off, nb, n)
    adj = np.zeros((n, n))
    for i, j in pairs:
        adj[i, j] = adj[j, i] = 1
    lap = dense_normalized_laplacian(adj)
    m = min(20, n)
    assert vecs.shape == (n, m)
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(m), atol=1e-8)
    np.testing.assert_allclose(lap @ vecs, vecs * vals, atol=1e-8)
    assert np.all(vals > -1e-9) and np.all(vals < 2 + 1e-9)
    assert np.all(np.diff(vals) > -1e-12)
    for k in range(m):
        nz = np.nonzero(np.abs(vecs[:, k]) > 1e-10)[0]
        assert vecs[nz[0], k] > 0


# -- general features ----------------------------------------------------------

def test_rest_row():
    s = score([(0, 1, 60, 0), (1, 1, None, 0)])
    x, _ = general_features(s)
    rest = x[1]
    assert rest[COL["is_rest"]] == 1 and rest[COL["midi_pitch"]] == 0
    assert rest[COL["pc_0"]:COL["pc_11"] + 1].sum() == 0
    assert x[0, COL["pc_0"]] == 1 and x[0, COL["midi_pitch"]] == pytest.approx(60 / 127)


def test_metric_columns():
    s = score([(4, 1, 60, 0), (5, 1, 62, 0), (Fraction(11, 2), Fraction(1, 2), 64, 0)])
    x, _ = general_features(s)
    assert x[:, COL["is_downbeat"]].tolist() == [1, 0, 0]
    assert x[:, COL["is_beat_start"]].tolist() == [1, 1, 0]
    np.testing.assert_allclose(x[:, COL["beat_position"]], [0, 0.25, 0.375])
    assert np.all(x[:, COL["ts_num_4"]] == 1) and np.all(x[:, COL["ts_den_4"]] == 1)


def test_triad_slice():
    s = score([(0, 1, 48, 0), (0, 1, 64, 1), (0, 1, 67, 2)])
    x, _ = general_features(s)
    for row in x:
        assert row[COL["chord_major"]] == 1
        assert row[COL["chord_minor"]] == 0
        np.testing.assert_allclose(row[COL["iv_1"]:COL["iv_6"] + 1], [0, 0, 0.25, 0.25, 0.25, 0])
        assert row[COL["polyphony"]] == pytest.approx(3 / 8)


def test_melodic_interval():
    s = score([(0, 1, 60, 0), (1, 1, 62, 0), (2, 1, 69, 0)])
    x, _ = general_features(s)
    np.testing.assert_allclose(x[:, COL["melodic_interval"]], [0, 2 / 12, 7 / 12])
    assert x[:, COL["is_step"]].tolist() == [0, 1, 0]
    assert x[:, COL["is_leap"]].tolist() == [0, 0, 1]


# -- cadence-local features ----------------------------------------------------

def authentic_cadence():
    # V (G2 B3 D4 D5) -> I (C3 G3 E4 C5) in C major, arrival on a downbeat
    return score([(3, 1, 43, 0), (3, 1, 59, 1), (3, 1, 62, 2), (3, 1, 74, 3),
                  (4, 2, 48, 0), (4, 2, 55, 1), (4, 2, 64, 2), (4, 2, 72, 3)])


def test_cadence_bass_and_soprano_motion():
    x, _ = cadence_local_features(authentic_cadence())
    arrival = x[4:]
    assert np.all(arrival[:, CAD["bass_fifth_motion"]] == 1)
    assert np.all(arrival[:, CAD["soprano_desc_step"]] == 1)
    assert np.all(arrival[:, CAD["metric_downbeat"]] == 1)
    assert np.all(x[:4, CAD["metric_on_beat"]] == 1)
    assert arrival[:, CAD["is_lowest_at_onset"]].tolist() == [1, 0, 0, 0]
    assert arrival[:, CAD["is_highest_at_onset"]].tolist() == [0, 0, 0, 1]


def test_cadence_leading_tone():
    x, _ = cadence_local_features(authentic_cadence())
    # both tonic pitch-class notes (C3, C5) follow a slice holding B3
    assert x[4:, CAD["leading_tone_resolution"]].tolist() == [1, 0, 0, 1]
    assert np.all(x[:4, CAD["leading_tone_resolution"]] == 0)


def test_cadence_leading_tone_depends_on_key():
    x, _ = cadence_local_features(score([(0, 1, 71, 0), (1, 1, 72, 0)], key=1))
    assert x[1, CAD["leading_tone_resolution"]] == 0  # G major: F# -> G is the resolution


def test_rest_follows_in_voice():
    s = score([(0, 1, 60, 0), (1, 1, None, 0), (2, 1, 62, 0)])
    x, _ = cadence_local_features(s)
    assert x[:, CAD["rest_follows_in_voice"]].tolist() == [1, 0, 0]


# -- assembly ------------------------------------------------------------------

@pytest.fixture(scope="module")
def piece():
    return generate_piece("p", np.random.default_rng(3), measures=12)


def test_widths_and_categories(piece):
    g = build_score_graph(piece)
    cats = [m["category"] for m in g.feature_manifest]
    assert g.d == 83
    assert (cats.count("GENERAL"), cats.count("SPECTRAL"), cats.count("CADENCE_LOCAL")) == (51, 20, 12)
    h = build_score_graph(piece, feature_set="general")
    assert h.d == 71
    assert manifest_hash(g.feature_manifest) != manifest_hash(h.feature_manifest)


def test_features_within_declared_ranges(piece):
    g = build_score_graph(piece)
    for k, m in enumerate(g.feature_manifest):
        lo, hi = m["range"]
        col = g.features[:, k]
        assert col.min() >= lo - 1e-6 and col.max() <= hi + 1e-6, m["name"]


def test_build_is_deterministic(piece, tmp_path):
    save_graph(build_score_graph(piece), tmp_path / "a.sggr")
    save_graph(build_score_graph(piece), tmp_path / "b.sggr")
    assert (tmp_path / "a.sggr").read_bytes() == (tmp_path / "b.sggr").read_bytes()


def test_assemble_rejects_nan():
    gen = (np.array([[np.nan]]), [{"name": "a", "category": "GENERAL", "range": [0, 1]}])
    spectral = (np.zeros((1, 1)), [{"name": "b", "category": "SPECTRAL", "range": [-1, 1]}])
    with pytest.raises(FeatureError, match="'a' at node 0"):
        assemble(gen, spectral)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_scores_produce_finite_features(seed):
    rng = np.random.default_rng(seed)
    onsets, durs, pitches = random_score_events(rng, n_max=30)
    rows = [(o, d, p if rng.random() > 0.1 else None, int(rng.integers(0, 4)))
            for o, d, p in zip(onsets, durs, pitches)]
    g = build_score_graph(score(rows))
    assert g.features.shape == (len(rows), 83)
    assert np.all(np.isfinite(g.features))
