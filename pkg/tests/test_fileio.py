"""Round-trip and strict-parsing tests for track, phoneme, history, and
manifest files."""

import json
import os

import numpy as np
import pytest

from prosodyflow import fileio
from prosodyflow.conditioning import PhonemeSeq
from prosodyflow.errors import DataError
from prosodyflow.fileio import SequenceTrack


def _track(rng, t=20):
    v = (rng.random(t) < 0.7).astype(np.float64)
    if not v.any():
        v[0] = 1.0
    f0 = np.where(v > 0, rng.uniform(80.0, 700.0, t), 0.0)
    e = rng.uniform(0.01, 2.0, t)
    return SequenceTrack(f0_hz=f0, voiced=v, energy=e, frame_rate=200.0)


# -- SequenceTrack validation -----------------------------------------------------


def test_track_validation():
    with pytest.raises(DataError):
        SequenceTrack(f0_hz=[], voiced=[], energy=[])
    with pytest.raises(DataError):
        SequenceTrack(f0_hz=[100.0], voiced=[1.0, 0.0], energy=[0.5])
    with pytest.raises(DataError):
        SequenceTrack(f0_hz=[np.nan], voiced=[1.0], energy=[0.5])
    with pytest.raises(DataError):
        SequenceTrack(f0_hz=[100.0], voiced=[0.5], energy=[0.5])
    with pytest.raises(DataError):
        SequenceTrack(f0_hz=[100.0], voiced=[0.0], energy=[0.5])  # f0>0 but unvoiced
    with pytest.raises(DataError):
        SequenceTrack(f0_hz=[0.0], voiced=[1.0], energy=[0.5])  # voiced but f0=0
    with pytest.raises(DataError):
        SequenceTrack(f0_hz=[100.0], voiced=[1.0], energy=[0.5], frame_rate=0.0)


# -- track files --------------------------------------------------------------------


def test_track_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(5):
        track = _track(rng, t=int(rng.integers(2, 40)))
        path = tmp_path / f"u{i}.track.csv"
        fileio.write_track(path, track)
        back = fileio.read_track(path)
        np.testing.assert_array_equal(back.f0_hz, track.f0_hz)
        np.testing.assert_array_equal(back.voiced, track.voiced)
        np.testing.assert_array_equal(back.energy, track.energy)
        assert back.frame_rate == track.frame_rate


def test_read_track_strict_errors(tmp_path):
    cases = {
        "missing_header.csv": "0,100.0,1,0.5\n",
        "bad_rate.csv": "frame_rate=fast\n0,100.0,1,0.5\n",
        "short_row.csv": "frame_rate=200.0\n0,100.0,1\n",
        "bad_number.csv": "frame_rate=200.0\n0,abc,1,0.5\n",
        "bad_flag.csv": "frame_rate=200.0\n0,100.0,2,0.5\n",
        "out_of_order.csv": "frame_rate=200.0\n1,100.0,1,0.5\n",
        "empty.csv": "frame_rate=200.0\n",
        "inconsistent.csv": "frame_rate=200.0\n0,100.0,0,0.5\n",
    }
    for name, content in cases.items():
        p = tmp_path / name
        p.write_text(content)
        with pytest.raises(DataError) as err:
            fileio.read_track(p)
        assert name in str(err.value)  # errors carry the offending path


def test_read_track_reports_line_numbers(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("frame_rate=200.0\n0,100.0,1,0.5\n1,oops,1,0.5\n")
    with pytest.raises(DataError, match="line 3"):
        fileio.read_track(p)


def test_read_track_skips_blank_lines(tmp_path):
    p = tmp_path / "ok.csv"
    p.write_text("frame_rate=200.0\n0,100.0,1,0.5\n\n1,0.0,0,0.25\n")
    track = fileio.read_track(p)
    assert track.n_frames == 2


# -- phoneme files --------------------------------------------------------------------


def test_phonemes_round_trip(tmp_path):
    seq = PhonemeSeq(ids=[3, 1, 4, 1], durations=[5, 2, 7, 1])
    path = tmp_path / "u.phones.json"
    fileio.write_phonemes(path, seq)
    back = fileio.read_phonemes(path)
    np.testing.assert_array_equal(back.ids, seq.ids)
    np.testing.assert_array_equal(back.durations, seq.durations)


def test_read_phonemes_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"ids": [1, 2]}))
    with pytest.raises(DataError):
        fileio.read_phonemes(p)
    p2 = tmp_path / "bad2.json"
    p2.write_text(json.dumps({"ids": [1], "durations": [0]}))
    with pytest.raises(DataError, match="bad2"):
        fileio.read_phonemes(p2)


# -- corpus directories ------------------------------------------------------------------


def test_load_corpus_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    written = {}
    for i in range(3):
        track = _track(rng)
        seq = PhonemeSeq(ids=[int(rng.integers(0, 8))], durations=[track.n_frames])
        fileio.write_track(tmp_path / f"utt{i:04d}.track.csv", track)
        fileio.write_phonemes(tmp_path / f"utt{i:04d}.phones.json", seq)
        written[f"utt{i:04d}"] = track
    assert fileio.corpus_ids(tmp_path) == sorted(written)
    loaded = fileio.load_corpus(tmp_path)
    assert [u[0] for u in loaded] == sorted(written)
    for utt_id, track, _ in loaded:
        np.testing.assert_array_equal(track.f0_hz, written[utt_id].f0_hz)


def test_load_corpus_missing_phonemes(tmp_path):
    rng = np.random.default_rng(2)
    fileio.write_track(tmp_path / "utt0000.track.csv", _track(rng))
    with pytest.raises(DataError, match="utt0000"):
        fileio.load_corpus(tmp_path)


def test_load_corpus_duration_mismatch(tmp_path):
    rng = np.random.default_rng(3)
    track = _track(rng, t=10)
    fileio.write_track(tmp_path / "utt0000.track.csv", track)
    fileio.write_phonemes(tmp_path / "utt0000.phones.json",
                          PhonemeSeq(ids=[1], durations=[9]))
    with pytest.raises(DataError, match="utt0000"):
        fileio.load_corpus(tmp_path)


def test_load_corpus_empty_dir(tmp_path):
    with pytest.raises(DataError):
        fileio.load_corpus(tmp_path)


# -- history ---------------------------------------------------------------------------


def test_history_round_trip_preserves_floats(tmp_path):
    rows = [(0, 1.2345678901234567, 0.5000000000000001), (1, -2.5, 0.4999999999999999)]
    path = tmp_path / "history.csv"
    fileio.write_history(path, rows)
    back = fileio.read_history(path)
    assert back == rows  # repr round-trips float64 exactly


def test_read_history_errors(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("loss,monitor\n0,1.0,0.5\n")
    with pytest.raises(DataError):
        fileio.read_history(p)
    p.write_text("step,loss,monitor\n0,1.0\n")
    with pytest.raises(DataError, match="line 2"):
        fileio.read_history(p)


# -- manifests -------------------------------------------------------------------------


def test_manifest_artifacts_hashes_verify(tmp_path):
    (tmp_path / "a.csv").write_text("hello\n")
    (tmp_path / "b.png").write_bytes(b"\x89PNG fake")
    fileio.write_manifest(
        tmp_path, command="gen", config={"n": 3}, seed=7,
        inputs={"corpus": "abc123"}, artifacts=["a.csv", "b.png"], version="0.1.0",
    )
    payload = json.loads((tmp_path / "manifest.json").read_text())
    assert payload["tool"] == "prosodyflow"
    assert payload["command"] == "gen"
    assert payload["seed"] == 7
    assert payload["config"] == {"n": 3}
    assert sorted(payload["artifacts"]) == ["a.csv", "b.png"]
    for rel, digest in payload["artifacts"].items():
        assert digest == fileio.sha256_file(os.path.join(tmp_path, rel))
    # tampering breaks verification
    (tmp_path / "a.csv").write_text("tampered\n")
    assert payload["artifacts"]["a.csv"] != fileio.sha256_file(tmp_path / "a.csv")


def test_sha256_file_known_value(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"abc")
    assert fileio.sha256_file(p) == (
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    )


def test_violin_and_moments_csv_shapes(tmp_path):
    vpath = tmp_path / "violin.csv"
    fileio.write_violin_csv(vpath, [("utt0", "vde", 0.125), ("utt1", "vde", 0.25)])
    lines = vpath.read_text().splitlines()
    assert lines[0] == "utt_id,metric,value"
    assert lines[1] == "utt0,vde,0.125"
    mpath = tmp_path / "moments.csv"
    fileio.write_moments_csv(mpath, {"reference": (60.0, 5.0, 0.1, -0.2)})
    mlines = mpath.read_text().splitlines()
    assert mlines[0] == "source,mu1,mu2,mu3,mu4"
    assert mlines[1] == "reference,60.0,5.0,0.1,-0.2"
