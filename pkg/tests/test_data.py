import json
import logging

import numpy as np
import pytest
import torch

from mfas.audio import SEGMENT_SAMPLES, read_wav
from mfas.data import (
    CvConfigError,
    IngestError,
    ManifestParseError,
    class_motif,
    generate_toy_dataset,
    load_manifest,
    make_cv_plan,
    write_manifest,
)
from mfas.features import RngStream, build_segment_table


def test_toy_corpus_layout(toy_records):
    assert len(toy_records) == 40
    counts = np.bincount([r.label_index for r in toy_records], minlength=4)
    assert counts.tolist() == [10, 10, 10, 10]
    assert len({r.speaker_id for r in toy_records}) == 10
    assert len({r.session_id for r in toy_records}) == 5
    for r in toy_records:
        assert sorted(r.transcript) == class_motif(r.label_index)
        assert 0.5 <= r.activation <= 5.5


def test_toy_generation_deterministic(tmp_path):
    a = generate_toy_dataset(tmp_path / "a", n_utterances=40, seed=5)
    b = generate_toy_dataset(tmp_path / "b", n_utterances=40, seed=5)
    assert [r.to_json().replace(str(tmp_path / "a"), "") for r in a] == [
        r.to_json().replace(str(tmp_path / "b"), "") for r in b
    ]
    assert np.array_equal(read_wav(a[3].audio_path), read_wav(b[3].audio_path))
    c = generate_toy_dataset(tmp_path / "c", n_utterances=40, seed=6)
    assert not np.array_equal(read_wav(a[3].audio_path), read_wav(c[3].audio_path))


def test_rigged_prosody_is_label_independent(tmp_path):
    recs = generate_toy_dataset(tmp_path, n_utterances=200, seed=0, rigged=True)
    pitch = np.array([r.extras["pitch"] for r in recs])
    labels = np.array([r.label_index for r in recs])
    means = [pitch[labels == k].mean() for k in range(4)]
    assert max(means) - min(means) < 0.2
    assert all(r.extras["rigged"] for r in recs)


def test_linear_probe_recovers_activation(tmp_path):
    recs = generate_toy_dataset(tmp_path, n_utterances=120, seed=1)
    pitch = np.array([r.extras["pitch"] for r in recs])
    act = np.array([r.activation for r in recs])
    X = np.stack([pitch, np.ones_like(pitch)], axis=1)
    coef, *_ = np.linalg.lstsq(X, act, rcond=None)
    mse = float(np.mean((X @ coef - act) ** 2))
    assert mse < 0.05


def test_manifest_roundtrip(tmp_path, toy_records):
    path = tmp_path / "m.jsonl"
    write_manifest(path, toy_records)
    again = load_manifest(path)
    assert [r.utterance_id for r in again] == [r.utterance_id for r in toy_records]
    assert again[0].vad == toy_records[0].vad


def _line(tmp_path, **kw):
    wav = tmp_path / "x.wav"
    wav.write_bytes(b"")
    d = dict(audio_path=str(wav), utterance_id="u1", speaker_id="s", session_id="ses1", label="angry")
    d.update(kw)
    return json.dumps(d)


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(_line(tmp_path) + "\n{broken\n")
    with pytest.raises(ManifestParseError, match="line 2"):
        load_manifest(p)
    p.write_text(_line(tmp_path, label="bored") + "\n")
    with pytest.raises(ManifestParseError, match="line 1"):
        load_manifest(p)
    p.write_text(_line(tmp_path) + "\n" + _line(tmp_path) + "\n")
    with pytest.raises(ManifestParseError):
        load_manifest(p)
    p.write_text(_line(tmp_path, audio_path=str(tmp_path / "missing.wav")) + "\n")
    with pytest.raises(IngestError, match="missing.wav"):
        load_manifest(p)


def test_excited_merges_into_happy(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(_line(tmp_path, label="excited") + "\n")
    assert load_manifest(p)[0].label == "happy"


def test_empty_manifest_warns(tmp_path, caplog):
    p = tmp_path / "m.jsonl"
    p.write_text("")
    with caplog.at_level(logging.WARNING):
        assert load_manifest(p) == []
    assert caplog.records


@pytest.mark.parametrize("strategy,n_folds,attr", [
    ("leave_one_session", 5, "session_id"), ("leave_one_speaker", 10, "speaker_id"),
])
def test_cv_partition(toy_records, strategy, n_folds, attr):
    plan = make_cv_plan(toy_records, strategy, seed=0)
    assert len(plan.folds) == n_folds
    n = len(toy_records)
    seen_test = []
    for f in plan.folds:
        held = {getattr(toy_records[i], attr) for i in f.test}
        rest = {getattr(toy_records[i], attr) for i in f.train + f.val}
        assert held == set(f.held_out) and not held & rest
        assert sorted(f.train + f.val + f.test) == list(range(n))
        assert not set(f.train) & set(f.val)
        for k in range(4):
            pool = [i for i in f.train_full if toy_records[i].label_index == k]
            in_val = [i for i in f.val if toy_records[i].label_index == k]
            assert abs(len(in_val) - 0.2 * len(pool)) <= 1
        seen_test += f.test
    assert sorted(seen_test) == list(range(n))


def test_cv_plan_deterministic_and_errors(toy_records):
    a = make_cv_plan(toy_records, seed=4)
    b = make_cv_plan(toy_records, seed=4)
    assert [f.val for f in a.folds] == [f.val for f in b.folds]
    with pytest.raises(CvConfigError):
        make_cv_plan(toy_records, "leave_one_room")
    with pytest.raises(CvConfigError):
        make_cv_plan(toy_records[:4], "leave_one_speaker")


def test_segment_table(toy_records):
    table = build_segment_table(toy_records)
    assert table.wav.shape[1] == SEGMENT_SAMPLES
    assert table.spec.shape[1:] == (300, 200)
    assert len(set(table.record.tolist())) == len(toy_records)
    multi = [i for i in range(len(toy_records)) if (table.record == i).sum() > 1]
    assert multi  # long_prob in the fixture yields some multi-segment utterances
    for i in multi:
        assert all(table.transcripts[r] is None for r in table.rows([i]))
    assert table.rows([0, 1]).tolist() == np.flatnonzero(np.isin(table.record, [0, 1])).tolist()


def test_rng_stream_isolated():
    torch.manual_seed(0)
    ref = torch.rand(3)
    torch.manual_seed(0)
    stream = RngStream(99)
    with stream.active():
        a = torch.rand(2)
    assert torch.equal(torch.rand(3), ref)
    with stream.active():
        b = torch.rand(2)
    assert not torch.equal(a, b)
