import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qfea.audio_io import BONAFIDE, SPOOF, Waveform, parse_protocol
from qfea.dsp import FrameConfig, SpectroMatrix
from qfea.echo import (
    DEFAULT_BONA_CHAIN,
    DEFAULT_SPOOF_CHAIN,
    ChainSyntaxError,
    CorpusConfig,
    EchoSpec,
    ReplayChain,
    apply_chain,
    apply_echo,
    detect_rahmonic_peaks,
    format_chain,
    log_ripple,
    make_trial_pair,
    parse_chain,
    ripple_gain,
    split_protocol,
    synthesize_corpus,
)
from qfea.frontends import cepstrogram

FS = 16000


def test_alpha_zero_is_identity(rng):
    s = Waveform(rng.standard_normal(100), FS)
    lin = apply_echo(s, EchoSpec(0.0, 7))
    assert np.array_equal(lin.samples[:100], s.samples)
    assert np.all(lin.samples[100:] == 0) and len(lin) == 107
    assert np.array_equal(apply_echo(s, EchoSpec(0.0, 7), "circular").samples, s.samples)


def test_tau_zero_scales(rng):
    s = Waveform(rng.standard_normal(50), FS)
    for mode in ("linear", "circular"):
        np.testing.assert_allclose(apply_echo(s, EchoSpec(0.3, 0), mode).samples, 1.3 * s.samples, rtol=1e-15)


def test_linear_echo_definition(rng):
    s = rng.standard_normal(30)
    x = apply_echo(Waveform(s, FS), EchoSpec(0.5, 4)).samples
    for n in range(34):
        expected = (s[n] if n < 30 else 0.0) + 0.5 * (s[n - 4] if 0 <= n - 4 < 30 else 0.0)
        assert x[n] == pytest.approx(expected, abs=1e-15)


def test_circular_constructive_energy(rng):
    n = 64
    period = rng.standard_normal(n // 2)
    s = np.tile(period, 2)
    x = apply_echo(Waveform(s, FS), EchoSpec(1.0, n // 2), "circular").samples
    np.testing.assert_allclose(np.sum(x ** 2), 4 * np.sum(s ** 2), rtol=1e-12)


def test_circular_tau_too_large():
    with pytest.raises(ValueError):
        apply_echo(Waveform(np.ones(10), FS), EchoSpec(0.5, 10), "circular")


def test_echo_linear_in_source(rng):
    s = rng.standard_normal(200)
    a = 0.37
    spec = EchoSpec(0.6, 13)
    for mode in ("linear", "circular"):
        lhs = apply_echo(Waveform(a * s, FS), spec, mode).samples
        rhs = a * apply_echo(Waveform(s, FS), spec, mode).samples
        np.testing.assert_allclose(lhs, rhs, rtol=1e-15, atol=1e-15)


def test_ripple_gain_values():
    assert ripple_gain(np.pi, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert ripple_gain(0.0, 0.5) == pytest.approx(1.5)
    np.testing.assert_allclose(ripple_gain(np.linspace(0, 10, 50), 0.0), 1.0)


def test_log_ripple_values():
    np.testing.assert_allclose(log_ripple(np.linspace(0, 10, 50), 0.0), 0.0)
    assert log_ripple(0.0, 0.7) == pytest.approx(math.log(1.7), rel=1e-14)
    with pytest.raises(ValueError, match="singular"):
        log_ripple(np.pi, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 0.95), st.floats(-20, 20), st.integers(-5, 5))
def test_log_ripple_periodic(alpha, theta, k):
    assert log_ripple(theta + 2 * np.pi * k, alpha) == pytest.approx(log_ripple(theta, alpha), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_circular_echo_log_spectrum_identity(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(64, 2048))
    tau = int(rng.integers(1, n))
    alpha = rng.uniform(0.1, 0.9)
    s = rng.standard_normal(n)
    x = apply_echo(Waveform(s, FS), EchoSpec(alpha, tau), "circular").samples
    S, X = np.abs(np.fft.fft(s)), np.abs(np.fft.fft(x))
    k = np.arange(n)
    ok = S > 1e-6
    np.testing.assert_allclose(np.log(X[ok]) - np.log(S[ok]),
                               log_ripple(2 * np.pi * k[ok] * tau / n, alpha), atol=1e-6)


def _cep(values):
    return SpectroMatrix(np.atleast_2d(values), "quefrency_s", 1.0 / FS, "s")


def test_single_spike():
    v = np.zeros(400)
    v[200] = 3.0
    rep = detect_rahmonic_peaks(_cep(v), 1, 5)
    assert rep.indices == [200]
    assert rep.peaks[0].quefrency_s == pytest.approx(200 / FS)


def test_peaks_sorted_and_limited(rng):
    v = rng.standard_normal(500) * 0.01
    for i, m in [(50, 1.0), (120, 3.0), (300, 2.0), (410, 0.5)]:
        v[i] = m
    rep = detect_rahmonic_peaks(_cep(v), 10, 3)
    assert rep.indices == [120, 300, 50]
    assert "120\t" in rep.to_tsv()


def test_peak_shift_invariance(rng):
    v = rng.standard_normal(600)
    v[[80, 250]] += 8
    a = detect_rahmonic_peaks(_cep(v), 5, 10)
    b = detect_rahmonic_peaks(_cep(v + 42.0), 5, 10)
    assert a.indices == b.indices


def test_peak_range_errors():
    with pytest.raises(ValueError):
        detect_rahmonic_peaks(_cep(np.zeros(10)), 0, 3)
    with pytest.raises(ValueError):
        detect_rahmonic_peaks(_cep(np.zeros(10)), 20, 3)


def _white_echo_cepstrum(seed, taps, fft_len=2048):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(FS * 2) * 3000.0
    x = np.zeros_like(s)
    x += s
    for alpha, tau in taps:
        x[tau:] += alpha * s[:-tau]
    return cepstrogram(Waveform(x, FS), FrameConfig(fft_len, fft_len // 4, "hann", fft_len))


def test_white_noise_echo_peak():
    cep = _white_echo_cepstrum(3, [(0.8, 200)])
    rep = detect_rahmonic_peaks(cep, 10, 5)
    assert abs(rep.indices[0] - 200) <= 2
    assert rep.peaks[0].quefrency_s == pytest.approx(0.0125, rel=0.01)


def test_two_echo_chain_peaks():
    cep = _white_echo_cepstrum(4, [(0.6, 60), (0.6, 200)])
    rep = detect_rahmonic_peaks(cep, 10, 5)
    assert rep.near(200) and rep.near(60)


def test_parse_chain_grammar():
    bona = parse_chain("0.4:6.0")
    assert bona.echoes == (EchoSpec(0.4, 96),) and bona.band is None
    spoof = parse_chain("0.5:3.75,0.3:1.25;band:100-7000")
    assert spoof.echoes == (EchoSpec(0.3, 20), EchoSpec(0.5, 60))
    assert spoof.band == (100.0, 7000.0)
    assert parse_chain("0.2:1;snr:25").noise_snr_db == 25.0
    assert format_chain(spoof) == "0.3:1.25,0.5:3.75;band:100-7000"
    assert parse_chain(format_chain(spoof)) == spoof


@pytest.mark.parametrize("bad, pos", [("0.5:", 0), ("0.4:6.0,x", 8), ("0.4:6;band:7000-100", 6),
                                      ("0.4:6;foo", 6), ("", 0), ("0.4:-1", 0)])
def test_parse_chain_errors(bad, pos):
    with pytest.raises(ChainSyntaxError) as exc:
        parse_chain(bad)
    assert exc.value.position == pos


def test_chain_preserves_length_and_band(rng):
    x = Waveform(rng.standard_normal(8000), FS)
    y = apply_chain(x, parse_chain(DEFAULT_SPOOF_CHAIN))
    assert len(y) == len(x)
    spec = np.abs(np.fft.rfft(y.samples))
    freqs = np.fft.rfftfreq(8000, 1 / FS)
    assert spec[freqs > 7800].mean() < 0.05 * spec[(freqs > 1000) & (freqs < 5000)].mean()
    with pytest.raises(ValueError):
        apply_chain(x, ReplayChain((), (100, 9000)))


def test_noisy_chain_needs_rng(rng):
    x = Waveform(rng.standard_normal(100), FS)
    with pytest.raises(ValueError):
        apply_chain(x, parse_chain("0.1:1;snr:10"))
    y = apply_chain(x, parse_chain("0.1:1;snr:10"), np.random.default_rng(0))
    assert len(y) == 100


def test_trial_pair_deterministic():
    bc, sc = parse_chain(DEFAULT_BONA_CHAIN), parse_chain(DEFAULT_SPOOF_CHAIN)
    a = make_trial_pair(7, 3, bc, sc)
    b = make_trial_pair(7, 3, bc, sc)
    assert np.array_equal(a[0].samples, b[0].samples) and np.array_equal(a[1].samples, b[1].samples)
    assert np.max(np.abs(a[1].samples)) < 1.0
    assert not np.array_equal(make_trial_pair(8, 3, bc, sc)[0].samples, a[0].samples)


def test_corpus_determinism_and_counts(tmp_path):
    bc, sc = parse_chain(DEFAULT_BONA_CHAIN), parse_chain(DEFAULT_SPOOF_CHAIN)
    cfg = CorpusConfig(min_duration_s=0.2, max_duration_s=0.3)
    p1 = synthesize_corpus(5, 3, tmp_path / "a", bc, sc, cfg)
    p2 = synthesize_corpus(5, 3, tmp_path / "b", bc, sc, cfg, jobs=3)
    files = sorted(f.relative_to(tmp_path / "a") for f in (tmp_path / "a").rglob("*") if f.is_file())
    assert len(files) == 7
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert p1.records == p2.records == parse_protocol(tmp_path / "a" / "protocol.txt").records
    one = synthesize_corpus(5, 1, tmp_path / "c", bc, sc, cfg)
    assert [r.label for r in one] == [BONAFIDE, SPOOF]


def test_corpus_rejects_bad_args(tmp_path):
    bc, sc = parse_chain(DEFAULT_BONA_CHAIN), parse_chain(DEFAULT_SPOOF_CHAIN)
    with pytest.raises(ValueError):
        synthesize_corpus(1, 0, tmp_path, bc, sc)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        synthesize_corpus(1, 1, blocker / "sub", bc, sc)


def test_split_keeps_pairs_and_classes(tmp_path):
    from qfea.audio_io import Protocol, TrialRecord
    recs = []
    for i in range(8):
        recs.append(TrialRecord("s", f"T{2 * i}", "e", "-", BONAFIDE))
        recs.append(TrialRecord("s", f"T{2 * i + 1}", "e", "RP", SPOOF))
    parts = split_protocol(Protocol(recs), (0.5, 0.25, 0.25))
    assert [len(parts[p]) for p in ("train", "dev", "eval")] == [8, 4, 4]
    default = split_protocol(Protocol(recs))
    assert [len(default[p]) for p in ("train", "dev", "eval")] == [6, 4, 6]
    for p in parts.values():
        assert p.count(BONAFIDE) == p.count(SPOOF)
        ids = {int(t[1:]) for t in p.trial_ids}
        assert all((i ^ 1) in ids for i in ids)


def test_spoof_trials_carry_extra_rahmonics():
    # detector settings match the `qfea analyze` defaults
    from qfea.frontends import extract

    bc, sc = parse_chain(DEFAULT_BONA_CHAIN), parse_chain(DEFAULT_SPOOF_CHAIN)
    lags = [e.tau_samples for e in sc.echoes]
    hits = 0
    for i in range(100):
        bona, spoof = make_trial_pair(7, i, bc, sc)
        rb = detect_rahmonic_peaks(extract("ceps", bona), 8, 8)
        rs = detect_rahmonic_peaks(extract("ceps", spoof), 8, 8)
        hits += any(rs.near(tau) and not rb.near(tau) for tau in lags)
    assert hits >= 90
