import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cefusion.aggregation import (
    FramePredictions,
    aggregate,
    average_logits,
    average_probs,
    check_same_coverage,
    majority_vote,
    read_predictions,
    read_video_label_file,
    sliding_window_ensemble,
    write_frame_label_file,
    write_predictions,
    write_video_label_file,
)
from cefusion.errors import ContractError, CoverageError, FormatError

from oracles import mean_argmax_oracle, random_frame_predictions, vote_oracle, window_oracle

labels_st = st.lists(st.integers(0, 6), min_size=1, max_size=40)


def test_vote_examples():
    assert majority_vote([0, 0, 1, 2, 0]) == 0
    assert majority_vote([1, 2]) == 1
    assert majority_vote([2, 1]) == 1


def test_empty_inputs_rejected():
    with pytest.raises(ContractError):
        majority_vote([])
    with pytest.raises(ContractError):
        average_logits(np.zeros((0, 3)))
    with pytest.raises(ContractError):
        average_probs(np.zeros((0, 3)))


def test_vote_matches_counting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        labels = rng.integers(0, int(rng.integers(1, 8)), int(rng.integers(1, 30)))
        assert majority_vote(labels) == vote_oracle(labels)


def test_average_logits_examples():
    assert average_logits([[1, 0], [0, 2]]) == 1
    assert average_logits([[0.3, 2.0, -1.0]]) == 1
    assert average_logits([[1, 1], [2, 2]]) == 0


def test_average_probs_divergence_fixture():
    probs = np.array([[0.9, 0.1], [0.2, 0.8]])
    assert average_probs(probs) == 0  # means 0.55, 0.45
    assert average_probs(np.tile([0.1, 0.6, 0.3], (4, 1))) == 1
    # logits consistent with those probabilities but with a different per-frame offset
    logits = np.log(probs) + np.array([[0.0], [5.0]])
    logits[1] += [0.0, 1.0]
    assert average_logits(logits) == 1
    assert average_probs(probs) != average_logits(logits)


def test_average_probs_rejects_unnormalised():
    with pytest.raises(ContractError, match="row 1"):
        average_probs([[0.5, 0.5], [0.6, 0.5]])
    average_probs([[0.5, 0.5 + 5e-6]])


def test_mean_methods_match_oracle():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        fp = random_frame_predictions(rng)
        assert average_logits(fp.logits) == mean_argmax_oracle(fp.logits)
        assert average_probs(fp.probs) == mean_argmax_oracle(fp.probs)


def test_logit_shift_invariance():
    rng = np.random.default_rng(2)
    for _ in range(300):
        logits = rng.standard_normal((int(rng.integers(1, 20)), 5))
        shifted = logits + rng.uniform(-100, 100, (len(logits), 1))
        assert average_logits(logits) == average_logits(shifted)


@settings(max_examples=100, deadline=None)
@given(labels_st, st.randoms(use_true_random=False))
def test_video_ops_order_free(labels, rnd):
    perm = list(labels)
    rnd.shuffle(perm)
    assert majority_vote(labels) == majority_vote(perm)
    logits = np.eye(7)[labels] + 0.01 * np.arange(len(labels))[:, None]
    idx = list(range(len(labels)))
    rnd.shuffle(idx)
    assert average_logits(logits) == average_logits(logits[idx])


def test_ensemble_is_not_order_free():
    labels = [0, 0, 1, 1, 1]
    assert sliding_window_ensemble([labels], 2).tolist() != sliding_window_ensemble([labels[::-1]], 2).tolist()[::-1]
    assert sliding_window_ensemble([labels], 2).tolist() == [0, 0, 0, 1, 1]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 6), st.integers(1, 30))
def test_all_methods_agree_when_frames_agree(c, T):
    logits = np.full((T, 7), -1.0)
    logits[:, c] = 2.0
    e = np.exp(logits)
    fp = FramePredictions("v", np.full(T, c), logits, e / e.sum(axis=1, keepdims=True))
    assert {aggregate(fp, m) for m in ("vote", "logits", "probs")} == {c}


def test_aggregate_unknown_method():
    with pytest.raises(ContractError):
        aggregate(FramePredictions("v", np.array([0])), "median")


def test_aggregate_needs_outputs_for_mean_methods():
    with pytest.raises(ContractError):
        aggregate(FramePredictions("v", np.array([0])), "logits")


# -- ensemble ------------------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(labels_st)
def test_ensemble_identity_cases(labels):
    assert sliding_window_ensemble([labels], 1).tolist() == labels
    const = [labels[0]] * len(labels)
    assert sliding_window_ensemble([const], 10).tolist() == const


def test_ensemble_three_models_double_loop():
    rng = np.random.default_rng(3)
    for _ in range(50):
        models = [rng.integers(0, 7, 25) for _ in range(3)]
        window = int(rng.integers(1, 30))
        assert sliding_window_ensemble(models, window).tolist() == window_oracle(models, window)
    models = [rng.integers(0, 7, 25) for _ in range(3)]
    assert sliding_window_ensemble(models).tolist() == window_oracle(models, 10)


def test_ensemble_accepts_frame_predictions():
    rng = np.random.default_rng(4)
    fps = [random_frame_predictions(rng, T=12, K=4) for _ in range(2)]
    assert sliding_window_ensemble(fps, 3).tolist() == window_oracle([f.labels for f in fps], 3)


def test_ensemble_errors():
    with pytest.raises(ContractError):
        sliding_window_ensemble([[0, 1], [0]], 3)
    with pytest.raises(ContractError):
        sliding_window_ensemble([[0, 1]], 0)
    with pytest.raises(ContractError):
        sliding_window_ensemble([], 3)


# -- files -------------------------------------------------------------------------------------

def test_prediction_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    preds = [random_frame_predictions(rng, f"vid_{i}", K=7) for i in range(6)]
    p = tmp_path / "pred.tsv"
    write_predictions(preds, p)
    back = read_predictions(p)
    assert list(back) == [fp.video_id for fp in preds]
    for fp in preds:
        assert back[fp.video_id] == fp
    header = p.read_text().splitlines()[0].split("\t")
    assert header[:3] == ["video_id", "frame_idx", "logit_0"] and header[-1] == "label"
    assert len(header) == 2 + 7 + 7 + 1


def test_label_files_round_trip(tmp_path):
    frames = {"a": np.array([0, 2, 2]), "b": np.array([1])}
    write_frame_label_file(frames, tmp_path / "f.tsv")
    back = read_predictions(tmp_path / "f.tsv")
    assert back["a"].labels.tolist() == [0, 2, 2] and back["a"].logits is None
    write_video_label_file({"a": 2, "b": 1}, tmp_path / "v.tsv")
    assert read_video_label_file(tmp_path / "v.tsv") == {"a": 2, "b": 1}


def test_prediction_file_errors(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("video_id\tframe_idx\tlabel\nv\t1\t0\n")
    with pytest.raises(FormatError, match="out of sequence"):
        read_predictions(p)
    p.write_text("something else\n")
    with pytest.raises(FormatError):
        read_predictions(p)
    with pytest.raises(FormatError):
        read_predictions(tmp_path / "absent.tsv")


def test_coverage_check():
    a = {"x": FramePredictions("x", np.zeros(3)), "y": FramePredictions("y", np.zeros(2))}
    check_same_coverage([a, dict(a)])
    with pytest.raises(CoverageError):
        check_same_coverage([a, {"x": a["x"]}])
    with pytest.raises(CoverageError):
        check_same_coverage([a, {"x": a["x"], "y": FramePredictions("y", np.zeros(4))}])
