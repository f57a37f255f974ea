import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecgai import hmm, nnseg, synth
from ecgai.core import EcgRecord, LabelSequence, SegmentClass, runs

QRS, ST, P, PR, TP = (int(SegmentClass.QRS), int(SegmentClass.STSegment),
                      int(SegmentClass.PWave), int(SegmentClass.PRSegment),
                      int(SegmentClass.TPSegment))


def test_transition_counting():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pi, A = hmm.estimate_transitions([np.array([QRS, QRS, ST])], floor=0.0)
    assert A[QRS, QRS] == 0.5 and A[QRS, ST] == 0.5


def test_initial_from_occupancy():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pi, _ = hmm.estimate_transitions([np.array([P, P, PR, PR])], floor=0.0)
    np.testing.assert_allclose(pi, [0.5, 0.5, 0, 0, 0, 0])


def test_unvisited_state_falls_back_with_warning():
    with pytest.warns(UserWarning, match="no observed transitions"):
        _, A = hmm.estimate_transitions([np.array([P, P, PR])])
    assert A[QRS, QRS] == 0.5 and A[QRS, ST] == 0.5


def test_forbidden_transitions_stay_zero():
    rng = np.random.default_rng(0)
    seqs = [rng.integers(0, 6, 50) for _ in range(3)]        # includes illegal bigrams
    _, A = hmm.estimate_transitions(seqs, floor=1e-3)
    assert np.all(A[~hmm.cyclic_mask()] == 0)
    np.testing.assert_allclose(A.sum(axis=1), 1, atol=1e-12)


def test_self_transition_matches_mean_duration():
    rng = np.random.default_rng(3)
    seqs = [synth.generate_record(synth.random_params(rng), 10000, seed=i)[1].classes
            for i in range(20)]
    _, A = hmm.estimate_transitions(seqs)
    for s in range(6):
        lengths = [e - b for seq in seqs for c, b, e in runs(seq) if c == s]
        # boundary runs are censored, so compare on interior runs only
        interior = [e - b for seq in seqs for c, b, e in runs(seq)[1:-1] if c == s]
        expect = 1 - 1 / np.mean(interior)
        assert abs(A[s, s] - expect) <= 0.01, (s, A[s, s], expect, np.mean(lengths))


def test_emissions_identity_and_split():
    t = [np.repeat(np.arange(6), 4)]
    B = hmm.estimate_emissions(t, t, floor=0.0)
    np.testing.assert_array_equal(B, np.eye(6))
    truth = [np.full(10, TP)]
    pred = [np.array([TP] * 5 + [P] * 5)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        B = hmm.estimate_emissions(truth, pred, floor=0.0)
    assert B[TP, TP] == 0.5 and B[TP, P] == 0.5
    with pytest.raises(hmm.HmmError):
        hmm.estimate_emissions([], [])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_emission_rows_normalized(seed):
    rng = np.random.default_rng(seed)
    t = [rng.integers(0, 6, 40) for _ in range(2)]
    p = [rng.integers(0, 6, 40) for _ in range(2)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        B = hmm.estimate_emissions(t, p)
    assert np.max(np.abs(B.sum(axis=1) - 1)) <= 1e-9


def test_params_validation():
    A = np.eye(6)
    bad = A.copy()
    bad[0, 3] = 0.5
    bad[0, 0] = 0.5
    with pytest.raises(hmm.HmmError, match="cyclic"):
        hmm.HmmParams(np.full(6, 1 / 6), bad, np.eye(6))
    with pytest.raises(hmm.HmmError, match="sum"):
        hmm.HmmParams(np.full(6, 0.2), A, np.eye(6))


def _near_identity():
    A = np.eye(6) * 0.9
    A[np.arange(6), (np.arange(6) + 1) % 6] = 0.1
    B = np.full((6, 6), 0.01)
    np.fill_diagonal(B, 0.95)
    return hmm.HmmParams(np.full(6, 1 / 6), A, B)


def test_viterbi_identity_like_model_keeps_legal_observations():
    obs = np.array([TP, TP, P, P, PR, QRS, QRS, ST, 4, 4, TP])
    res = hmm.viterbi_decode(_near_identity(), obs)
    np.testing.assert_array_equal(res.states.classes, obs)
    assert res.log_prob <= 0


def test_viterbi_log_prob_self_consistent():
    rng = np.random.default_rng(1)
    params = _near_identity()
    for _ in range(20):
        obs = rng.integers(0, 6, 30)
        res = hmm.viterbi_decode(params, obs)
        assert abs(res.log_prob - hmm.path_log_prob(params, res.states, obs)) <= 1e-10


def test_viterbi_matches_enumeration_small():
    rng = np.random.default_rng(2)
    for _ in range(30):
        A = np.where(hmm.cyclic_mask(), rng.uniform(0.1, 1, (6, 6)), 0)
        A /= A.sum(1, keepdims=True)
        B = rng.uniform(0.1, 1, (6, 6))
        B /= B.sum(1, keepdims=True)
        params = hmm.HmmParams(np.full(6, 1 / 6), A, B)
        obs = rng.integers(0, 6, 5)
        best = max(hmm.path_log_prob(params, s, obs)
                   for s in itertools.product(range(6), repeat=5))
        assert abs(hmm.viterbi_decode(params, obs).log_prob - best) <= 1e-12


def test_viterbi_tie_goes_to_lower_state():
    A = np.eye(6) * 0.5
    A[np.arange(6), (np.arange(6) + 1) % 6] = 0.5
    params = hmm.HmmParams(np.full(6, 1 / 6), A, np.full((6, 6), 1 / 6))
    res = hmm.viterbi_decode(params, np.zeros(1, dtype=int))
    assert res.states.classes[0] == 0


def test_viterbi_dead_end_rejected():
    A = np.eye(6)
    B = np.eye(6)
    params = hmm.HmmParams(np.array([1.0, 0, 0, 0, 0, 0]), A, B, floor=0.0)
    with pytest.raises(hmm.HmmError, match="non-zero"):
        hmm.viterbi_decode(params, np.array([0, 3]))


def test_duration_filter_examples():
    seq = np.array([TP] * 30 + [P] * 4 + [TP] * 30)
    np.testing.assert_array_equal(hmm.duration_filter(seq).classes, np.full(64, TP))
    clean = np.array([TP] * 20 + [P] * 15)
    np.testing.assert_array_equal(hmm.duration_filter(clean).classes, clean)
    lead = np.array([P] * 3 + [PR] * 20)
    np.testing.assert_array_equal(hmm.duration_filter(lead).classes, np.full(23, PR))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(1, 25)), min_size=1, max_size=30))
def test_duration_filter_properties(spec):
    seq = np.concatenate([np.full(n, c) for c, n in spec])
    out = hmm.duration_filter(seq, min_ms=10).classes
    assert out.size == seq.size
    lengths = [e - s for _, s, e in runs(out)]
    assert len(lengths) == 1 or min(lengths) >= 10


def test_window_starts_tiling():
    assert hmm.window_starts(10000, 2000) == [0, 2000, 4000, 6000, 8000]
    assert hmm.window_starts(5000, 2000) == [0, 2000, 3000]
    assert hmm.window_starts(1500, 2000) == [0]


@pytest.fixture(scope="module")
def tiny_pair():
    model = nnseg.UNetModel.init(nnseg.UNetConfig.desk(input_len=128), seed=0)
    return model, _near_identity()


def test_segment_length_and_determinism(tiny_pair):
    model, params = tiny_pair
    rec, _ = synth.generate_record(synth.BeatParams(), 1000, seed=0)
    a = hmm.segment(model, params, rec)
    b = hmm.segment(model, params, rec)
    assert a.length == rec.n_samples and a == b


def test_segment_short_record_is_padded(tiny_pair):
    model, params = tiny_pair
    rec = EcgRecord.from_matrix(np.zeros((12, 100)))
    out = hmm.segment(model, params, rec)
    assert out.length == 100


def test_network_argmax_uses_right_aligned_tail(tiny_pair):
    model, _ = tiny_pair
    rec, _ = synth.generate_record(synth.BeatParams(), 300, seed=1)
    arg = hmm.network_argmax(model, rec)
    x = rec.matrix()
    tail = nnseg.predict_proba(model, x[None, :, 172:300])[0].argmax(axis=1)
    head = nnseg.predict_proba(model, x[None, :, 0:128])[0].argmax(axis=1)
    np.testing.assert_array_equal(arg[:128], head)
    np.testing.assert_array_equal(arg[256:], tail[84:])


def test_hmm_file_round_trip(tmp_path):
    params = _near_identity()
    hmm.save_hmm(params, tmp_path / "h.json")
    back = hmm.load_hmm(tmp_path / "h.json")
    np.testing.assert_array_equal(back.transition, params.transition)
    np.testing.assert_array_equal(back.emission, params.emission)
    text = (tmp_path / "h.json").read_text().replace('"PWave"', '"QRS"', 1)
    (tmp_path / "h.json").write_text(text)
    with pytest.raises(hmm.HmmError, match="class order"):
        hmm.load_hmm(tmp_path / "h.json")


def test_label_sequence_metadata_preserved():
    obs = LabelSequence(np.full(12, TP), "rid", 5)
    out = hmm.viterbi_decode(_near_identity(), obs).states
    assert out.record_id == "rid" and out.start_ms == 5
