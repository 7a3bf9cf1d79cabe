import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qfea.audio_io import (
    BONAFIDE,
    SPOOF,
    DuplicateTrialError,
    Protocol,
    ProtocolError,
    TrialRecord,
    UnsupportedFormatError,
    WavFormatError,
    Waveform,
    parse_protocol,
    read_wav,
    write_protocol,
    write_wav,
)


def _raw_wav(path, pcm, rate=16000, channels=1, width=2):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(pcm)


def test_read_scales_by_32768(tmp_path):
    p = tmp_path / "a.wav"
    _raw_wav(p, np.array([0, 16384, -32768], dtype="<i2").tobytes())
    w = read_wav(p)
    assert w.sample_rate_hz == 16000
    assert w.samples.tolist() == [0.0, 0.5, -1.0]


def test_empty_data_chunk_rejected(tmp_path):
    p = tmp_path / "empty.wav"
    _raw_wav(p, b"")
    with pytest.raises(WavFormatError):
        read_wav(p)


def test_malformed_header(tmp_path):
    p = tmp_path / "junk.wav"
    p.write_bytes(b"RIFX" + b"\0" * 40)
    with pytest.raises(WavFormatError):
        read_wav(p)


def test_stereo_and_8bit_are_unsupported(tmp_path):
    stereo = tmp_path / "stereo.wav"
    _raw_wav(stereo, np.zeros(8, dtype="<i2").tobytes(), channels=2)
    with pytest.raises(UnsupportedFormatError):
        read_wav(stereo)
    eight = tmp_path / "eight.wav"
    _raw_wav(eight, bytes(range(10)), width=1)
    with pytest.raises(UnsupportedFormatError):
        read_wav(eight)


def test_float_wav_is_unsupported(tmp_path):
    # minimal IEEE-float (format tag 3) header
    data = np.zeros(4, dtype="<f4").tobytes()
    fmt = struct.pack("<HHIIHH", 3, 1, 16000, 64000, 4, 32)
    blob = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    p = tmp_path / "float.wav"
    p.write_bytes(b"RIFF" + struct.pack("<I", len(blob)) + blob)
    with pytest.raises(UnsupportedFormatError):
        read_wav(p)


def test_write_saturates_and_hits_rails(tmp_path):
    p = tmp_path / "rail.wav"
    write_wav(Waveform([1.0, 0.0, -1.0, 3.0, -3.0], 8000), p)
    with wave.open(str(p), "rb") as wf:
        pcm = np.frombuffer(wf.readframes(5), dtype="<i2")
    assert pcm.tolist() == [32767, 0, -32768, 32767, -32768]


def test_pcm_roundtrip_bit_exact(tmp_path, rng):
    pcm = rng.integers(-32768, 32768, size=5000).astype("<i2")
    p = tmp_path / "r.wav"
    _raw_wav(p, pcm.tobytes(), rate=22050)
    w = read_wav(p)
    q = tmp_path / "r2.wav"
    write_wav(w, q)
    assert p.read_bytes() == q.read_bytes()
    assert np.array_equal(np.rint(read_wav(q).samples * 32768).astype(int), pcm.astype(int))


def test_float_write_quantisation_bound(tmp_path, rng):
    x = rng.uniform(-1.2, 1.2, size=4000)
    p = tmp_path / "q.wav"
    write_wav(Waveform(x, 16000), p)
    back = read_wav(p).samples
    clamped = np.clip(x, -1.0, 32767 / 32768)
    assert np.max(np.abs(back - clamped)) <= 1 / 32768


def test_waveform_rejects_bad_rate():
    with pytest.raises(ValueError):
        Waveform([0.0], 0)


LINE = "PA_0001 PA_D_0004063 aaa - bonafide"


def test_parse_single_line(tmp_path):
    p = tmp_path / "proto.txt"
    p.write_text(LINE + "\n")
    proto = parse_protocol(p, "dev")
    assert len(proto) == 1
    rec = proto.records[0]
    assert rec.trial_id == "PA_D_0004063"
    assert rec.label == BONAFIDE
    assert rec.speaker_id == "PA_0001" and rec.environment == "aaa" and rec.attack_id == "-"
    assert proto.partition == "dev"


def test_parse_empty_file(tmp_path):
    p = tmp_path / "empty.txt"
    p.write_text("")
    proto = parse_protocol(p)
    assert len(proto) == 0
    with pytest.raises(ValueError):
        proto.require_both_classes()


def test_four_columns_names_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text(LINE + "\nPA_0001 PA_D_1 aaa bonafide\n")
    with pytest.raises(ProtocolError, match=":2:"):
        parse_protocol(p)


def test_duplicate_and_unknown_key(tmp_path):
    p = tmp_path / "dup.txt"
    p.write_text(LINE + "\r\n" + LINE + "\r\n")
    with pytest.raises(DuplicateTrialError):
        parse_protocol(p)
    q = tmp_path / "key.txt"
    q.write_text("PA_0001 PA_D_1 aaa AA spoofed\n")
    with pytest.raises(ProtocolError, match="unknown key"):
        parse_protocol(q)


def test_unknown_tokens_kept_verbatim(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("S1 T1 zzz XY9 spoof\n")
    rec = parse_protocol(p).records[0]
    assert (rec.environment, rec.attack_id, rec.label) == ("zzz", "XY9", SPOOF)


token = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789_-", min_size=1, max_size=8)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(token, token, token, st.sampled_from([BONAFIDE, SPOOF])), max_size=30),
       st.integers(0, 3))
def test_record_count_equals_nonempty_lines(tmp_path_factory, rows, blanks):
    recs = [TrialRecord(s, f"T{i}", e, a, lab) for i, (s, e, a, lab) in enumerate(rows)]
    path = tmp_path_factory.mktemp("p") / "proto.txt"
    write_protocol(Protocol(recs), path)
    path.write_text(path.read_text() + "\n" * blanks)
    parsed = parse_protocol(path)
    assert parsed.records == recs
