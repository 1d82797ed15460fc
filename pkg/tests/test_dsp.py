import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blocksep.dsp import (
    AudioSignal,
    StftConfig,
    apply_mask,
    ipd,
    istft,
    make_window,
    read_wav,
    stft,
    write_wav,
)


def naive_dft(frame):
    """O(N^2) reference DFT, first N/2+1 bins."""
    n = frame.size
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    return (frame[None, :] * np.exp(-2j * np.pi * k * t / n)).sum(axis=1)


def test_stft_zero_signal():
    cfg = StftConfig()
    spec = stft(np.zeros(2048), cfg)
    assert spec.shape == ((2048 - 256) // 64 + 1, 129)
    assert np.all(spec == 0)


def test_stft_shape_contract():
    cfg = StftConfig(window_len=128, hop=32)
    n = 1000
    spec = stft(np.random.default_rng(0).normal(size=n), cfg)
    assert spec.shape == ((n - 128) // 32 + 1, 65)


def test_stft_too_short():
    with pytest.raises(ValueError, match="input too short"):
        stft(np.zeros(100), StftConfig(window_len=256, hop=64))


def test_stft_impulse_matches_window_center():
    # impulse in the middle of frame 0's window: magnitude at every bin equals
    # the window value at the impulse position
    cfg = StftConfig(window_len=64, hop=16, window="sqrt_hann")
    x = np.zeros(256)
    x[32] = 1.0
    spec = stft(x, cfg)
    w = make_window("sqrt_hann", 64)
    assert np.allclose(np.abs(spec[0]), w[32], atol=1e-12)


def test_stft_matches_naive_dft_on_sinusoid():
    cfg = StftConfig(window_len=64, hop=64, window="rect")
    n = 256
    x = np.sin(2 * np.pi * 8 * np.arange(n) / 64)
    spec = stft(x, cfg)
    for frame_idx in range(spec.shape[0]):
        frame = x[frame_idx * 64 : frame_idx * 64 + 64]
        ref = naive_dft(frame)
        assert np.allclose(spec[frame_idx], ref, atol=1e-9)
    # energy concentrated in bin 8
    mags = np.abs(spec[0])
    assert mags[8] > 10 * np.delete(mags, 8).max()


def test_stft_random_matches_naive_dft():
    cfg = StftConfig(window_len=32, hop=8)
    rng = np.random.default_rng(7)
    x = rng.normal(size=200)
    spec = stft(x, cfg)
    w = make_window("sqrt_hann", 32)
    for i in (0, 3, spec.shape[0] - 1):
        ref = naive_dft(x[i * 8 : i * 8 + 32] * w)
        assert np.allclose(spec[i], ref, atol=1e-9)


def test_istft_zero():
    cfg = StftConfig()
    out = istft(np.zeros((10, 129), dtype=complex), cfg)
    assert np.all(out == 0)
    assert out.size == 9 * 64 + 256


def test_istft_rejects_non_cola():
    cfg = StftConfig(window_len=256, hop=96, window="sqrt_hann")
    with pytest.raises(ValueError, match="overlap-add"):
        istft(np.zeros((4, 129), dtype=complex), cfg)


def _interior_roundtrip_error(x, cfg):
    y = istft(stft(x, cfg), cfg)
    w = cfg.window_len
    a, b = w, min(x.size, y.size) - w
    return np.max(np.abs(y[a:b] - x[a:b])) / (np.max(np.abs(x)) + 1e-30)


def test_roundtrip_white_noise():
    x = np.random.default_rng(1).normal(size=8192)
    assert _interior_roundtrip_error(x, StftConfig()) < 1e-6


def test_roundtrip_speech_shaped():
    rng = np.random.default_rng(2)
    # low-pass filtered noise with a slow envelope, crudely speech-like
    x = np.convolve(rng.normal(size=8192), np.ones(8) / 8, mode="same")
    x *= 0.5 + 0.5 * np.sin(2 * np.pi * np.arange(8192) / 4000)
    assert _interior_roundtrip_error(x, StftConfig()) < 1e-6


@settings(max_examples=20, deadline=None)
@given(
    st.sampled_from([(256, 64, "sqrt_hann"), (256, 128, "sqrt_hann"),
                     (128, 32, "hann"), (64, 64, "rect")]),
    st.integers(0, 2**31 - 1),
)
def test_roundtrip_property(cfg_tuple, seed):
    wl, hop, win = cfg_tuple
    x = np.random.default_rng(seed).normal(size=4096)
    assert _interior_roundtrip_error(x, StftConfig(wl, hop, win)) < 1e-6


def test_ipd_identical_channels():
    spec = stft(np.random.default_rng(3).normal(size=2048), StftConfig())
    feat = ipd(spec, spec)
    assert np.allclose(feat.cos, 1.0)
    assert np.allclose(feat.sin, 0.0)


def test_ipd_delay_gives_phase_ramp():
    # tones at exact bin frequencies so the delay -> phase relation is exact
    cfg = StftConfig(window_len=256, hop=64, window="rect")
    d = 2.5  # fractional delay in samples
    bins = [3, 8, 17, 30]
    t = np.arange(4096)
    x1 = sum(np.sin(2 * np.pi * k * t / 256 + 0.3 * k) for k in bins)
    x2 = sum(np.sin(2 * np.pi * k * (t - d) / 256 + 0.3 * k) for k in bins)
    feat = ipd(stft(x1, cfg), stft(x2, cfg))
    ang = np.arctan2(feat.sin, feat.cos)
    for k in bins:
        expected = 2 * np.pi * k * d / 256
        err = np.angle(np.exp(1j * (ang[:, k] - expected)))
        assert np.max(np.abs(err)) < 1e-9


def test_ipd_degenerate_bin():
    spec = stft(np.random.default_rng(5).normal(size=1024), StftConfig())
    zero = np.zeros_like(spec)
    feat = ipd(spec, zero)
    assert np.allclose(feat.cos, 1.0)
    assert np.allclose(feat.sin, 0.0)


def test_ipd_unit_circle_invariant():
    rng = np.random.default_rng(6)
    s1 = stft(rng.normal(size=2048), StftConfig())
    s2 = stft(rng.normal(size=2048), StftConfig())
    feat = ipd(s1, s2)
    assert np.allclose(feat.cos**2 + feat.sin**2, 1.0, atol=1e-6)


def test_ipd_shape_mismatch():
    with pytest.raises(ValueError):
        ipd(np.zeros((3, 5), dtype=complex), np.zeros((4, 5), dtype=complex))


def test_apply_mask_identity_zero_half():
    spec = stft(np.random.default_rng(8).normal(size=1024), StftConfig())
    assert np.allclose(apply_mask(np.ones(spec.shape), spec), spec)
    assert np.all(apply_mask(np.zeros(spec.shape), spec) == 0)
    half = apply_mask(np.full(spec.shape, 0.5), spec)
    assert np.allclose(np.abs(half), 0.5 * np.abs(spec))
    assert np.allclose(np.angle(half[np.abs(spec) > 1e-9]),
                       np.angle(spec[np.abs(spec) > 1e-9]))


def test_apply_mask_rejects_bad_range():
    spec = np.ones((2, 3), dtype=complex)
    with pytest.raises(ValueError):
        apply_mask(np.full((2, 3), 1.5), spec)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_apply_mask_monotone(seed):
    rng = np.random.default_rng(seed)
    spec = rng.normal(size=(4, 6)) + 1j * rng.normal(size=(4, 6))
    m1 = rng.uniform(0, 1, (4, 6))
    m2 = np.clip(m1 + rng.uniform(0, 1, (4, 6)) * (1 - m1), 0, 1)
    assert np.all(np.abs(apply_mask(m2, spec)) >= np.abs(apply_mask(m1, spec)) - 1e-12)


def test_wav_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    sig = AudioSignal(8000, rng.uniform(-0.9, 0.9, (2, 4000)))
    path = tmp_path / "x.wav"
    write_wav(path, sig)
    back = read_wav(path)
    assert back.sample_rate == 8000
    assert back.n_channels == 2
    assert np.max(np.abs(back.samples - sig.samples)) < 1.0 / 16384


def test_wav_rejects_wrong_encoding(tmp_path):
    import wave

    path = tmp_path / "bad.wav"
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(4)
        fh.setframerate(8000)
        fh.writeframes(b"\x00" * 64)
    with pytest.raises(ValueError, match="16-bit"):
        read_wav(path)


def test_audio_signal_invariants():
    with pytest.raises(ValueError):
        AudioSignal(0, np.zeros(10))
    sig = AudioSignal(8000, np.zeros(16000))
    assert sig.n_channels == 1
    assert sig.duration == pytest.approx(2.0)
