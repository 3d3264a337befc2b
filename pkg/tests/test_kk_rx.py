import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sdmlink.kk_rx import (
    BiasSearch,
    BiasSearchError,
    KkConfig,
    KkReconstructionError,
    Photocurrent,
    adc_capture,
    adc_ratio,
    gap_quality,
    golden_section_max,
    kk_baseband,
    kk_reconstruct,
    minimum_phase_field,
    optimize_dc_bias,
    photodetect,
    pilot_evm_quality,
    restore_and_reconstruct,
)
from sdmlink.sigkit import ComplexFrame
from sdmlink.txchain import TxConfig, build_tributary

BAUD = 33.33e9
GUARD = 200
N_SYM = 4000


@pytest.fixture(scope="module")
def tributary():
    tx = TxConfig(n_symbols=2**14)
    frame, sym, _ = build_tributary(tx, 3)
    return tx, frame, sym


def _capture(tributary, cfg):
    tx, frame, sym = tributary
    cap = adc_capture(frame, cfg, -GUARD * 3, int((N_SYM + 2 * GUARD) * 2.4))
    pilot = sym[np.arange(-GUARD, N_SYM + GUARD) % sym.size]
    return photodetect(cap, cfg), pilot_evm_quality(pilot, BAUD, tx.rrc, skip=GUARD)


def _evm(pc, cfg, q, bias):
    return -q(kk_baseband(pc, cfg, bias))


# --- configuration and ADC -----------------------------------------------------


def test_lo_offset_must_clear_signal_band():
    with pytest.raises(ValueError):
        KkConfig(lo_offset_hz=15e9)
    with pytest.raises(ValueError):
        BiasSearch(lower=2.0, upper=1.0)


def test_adc_ratio():
    r = adc_ratio(99.99e9, 80e9)
    assert (r.numerator, r.denominator) == (4, 5)


def test_adc_capture_interpolates_exactly():
    fs, n = 100e9, 1000
    rng = np.random.default_rng(0)
    bins = rng.integers(-150, 150, 6)
    amp = rng.normal(size=6) + 1j * rng.normal(size=6)
    t = np.arange(n) / fs
    tone = lambda tt: (amp[:, None] * np.exp(2j * np.pi * bins[:, None] * fs / n * tt[None, :])).sum(0)
    x = ComplexFrame(tone(t), fs)
    cap = adc_capture(x, KkConfig(), start=-37, n_samples=2000)
    r = adc_ratio(fs, 80e9)
    t_cap = (-37 + np.arange(2000) * r.denominator / r.numerator) / fs
    np.testing.assert_allclose(cap.samples[0], tone(t_cap), atol=1e-10)
    assert cap.sample_rate == pytest.approx(80e9)


# --- photodetection ------------------------------------------------------------


def test_dark_input_gives_zero_photocurrent():
    pc = photodetect(ComplexFrame(np.zeros(1024), 80e9), KkConfig())
    assert np.all(pc.samples == 0)


def test_single_tone_beat():
    fs, n = 80e9, 4000
    f1 = 5e9  # 250 bins at 20 MHz resolution; f_off - f1 = 13.5 GHz
    t = np.arange(n) / fs
    x = ComplexFrame(np.exp(2j * np.pi * f1 * t), fs)
    pc = photodetect(x, KkConfig(cspr_db=10))
    assert abs(pc.samples.mean()) < 1e-12
    spec = np.abs(np.fft.rfft(pc.samples[0]))
    f = np.fft.rfftfreq(n, 1 / fs)
    k = int(np.argmax(spec))
    assert f[k] == pytest.approx(18.5e9 - f1)
    rest = np.delete(spec, k)
    assert rest.max() < 1e-9 * spec[k]
    # analytic amplitude 2*A*B with A = sqrt(10)
    assert spec[k] / (n / 2) == pytest.approx(2 * np.sqrt(10), rel=1e-9)


def test_photocurrent_zero_mean(tributary):
    pc, _ = _capture(tributary, KkConfig())
    assert abs(pc.samples.mean()) < 1e-12


# --- reconstruction ------------------------------------------------------------


@given(arrays(float, st.integers(2, 300), elements=st.floats(1e-3, 1e3)))
@settings(max_examples=50, deadline=None)
def test_phase_retrieval_modulus_identity(i):
    s = minimum_phase_field(i)
    np.testing.assert_allclose(np.abs(s) ** 2, i, rtol=1e-12)


def test_nonpositive_intensity_named():
    with pytest.raises(KkReconstructionError, match="3 of"):
        minimum_phase_field(np.array([1.0, -1.0, 0.0, 2.0, -0.5, 1.0]))


def test_pure_lo_reconstructs_to_zero():
    cfg = KkConfig()
    pc = Photocurrent(np.zeros((1, 4096)), 80e9, np.array([1.0]), np.array([1.0]), cfg.cspr)
    y = kk_reconstruct(pc, cfg, bias=1.0)
    assert 10 * np.log10(np.mean(np.abs(y.samples) ** 2) / 1.0) < -40


def test_tone_lands_at_its_frequency():
    fs, n = 80e9, 8000
    f1 = -3e9
    t = np.arange(n) / fs
    x = ComplexFrame(np.exp(2j * np.pi * f1 * t), fs)
    cfg = KkConfig(cspr_db=12)
    pc = photodetect(x, cfg)
    y = kk_reconstruct(pc, cfg, bias=pc.dc)
    f = np.fft.fftfreq(y.n, 1 / y.sample_rate)
    k = int(np.argmax(np.abs(np.fft.fft(y.samples[0]))))
    assert abs(f[k] - f1) <= fs / n


def test_evm_below_one_percent_at_6sps(tributary):
    cfg = KkConfig(cspr_db=12, upsample=(5, 2))
    pc, q = _capture(tributary, cfg)
    assert _evm(pc, cfg, q, pc.dc) < 0.01


def test_kk_reconstruct_output_rate(tributary):
    cfg = KkConfig()
    pc, _ = _capture(tributary, cfg)
    y = kk_reconstruct(pc, cfg)
    assert y.n == pc.samples.shape[1] and y.sample_rate == pc.sample_rate


def test_evm_improves_with_internal_oversampling(tributary):
    evms = []
    for up in [(5, 4), (5, 3), (5, 2)]:  # 3, 4, 6 samples per symbol
        cfg = KkConfig(cspr_db=10, upsample=up)
        pc, q = _capture(tributary, cfg)
        evms.append(_evm(pc, cfg, q, pc.dc))
    assert evms[0] > evms[1] > evms[2]


def test_evm_improves_with_cspr(tributary):
    evms = []
    for cspr in (6, 8, 10, 12, 14):
        cfg = KkConfig(cspr_db=cspr)
        pc, q = _capture(tributary, cfg)
        evms.append(_evm(pc, cfg, q, pc.dc))
    assert np.all(np.diff(evms) < 0)


def test_wrong_bias_degrades_monotonically(tributary):
    cfg = KkConfig(cspr_db=12, upsample=(5, 2))
    pc, q = _capture(tributary, cfg)
    d = pc.dc[0]

    def sweep(factors):
        out = []
        for r in factors:
            try:
                out.append(_evm(pc, cfg, q, r * d))
            except KkReconstructionError:
                break  # past the positivity limit
        return np.array(out)

    up = sweep(1 + np.linspace(0, 0.5, 11))
    down = sweep(1 - np.linspace(0, 0.5, 11))
    assert up.size == 11 and down.size >= 3
    assert np.all(np.diff(up) > 0) and np.all(np.diff(down) > 0)


def test_front_end_is_deterministic(tributary):
    cfg = KkConfig()
    a = kk_reconstruct(_capture(tributary, cfg)[0], cfg).samples
    b = kk_reconstruct(_capture(tributary, cfg)[0], cfg).samples
    np.testing.assert_array_equal(a, b)


# --- bias search ---------------------------------------------------------------


def test_golden_section_quadratic():
    b_star = 1.2345
    x, fx, n = golden_section_max(lambda b: -((b - b_star) ** 2), 0.2, 3.0, 1e-3)
    assert abs(x - b_star) <= 1e-3
    assert n <= 35


def test_evaluation_budget(tributary):
    cfg = KkConfig(bias_search=BiasSearch(lower=0.2, upper=3.0, rel_tol=1e-3))
    pc, _ = _capture(tributary, cfg)
    calls = []

    def q(bb):
        calls.append(1)
        return 0.0

    _, _, n = optimize_dc_bias(pc.segment(0, 4096), cfg, q)
    assert len(calls) <= n <= 35  # infeasible biases are counted but not scored


@pytest.mark.parametrize("blind", [False, True])
def test_optimized_bias_matches_true_dc(tributary, blind):
    cfg = KkConfig(cspr_db=12)
    pc, q = _capture(tributary, cfg)
    bias, _, _ = optimize_dc_bias(pc, cfg, None if blind else q)
    assert abs(_evm(pc, cfg, q, bias) - _evm(pc, cfg, q, pc.dc)) < 1e-3


def test_no_feasible_bias():
    cfg = KkConfig(bias_search=BiasSearch(lower=0.01, upper=0.02))
    pc = Photocurrent(np.array([[-1.0, 0.5, 0.5]]), 80e9, np.array([1.0]), np.array([1.0]), cfg.cspr)
    with pytest.raises(BiasSearchError):
        optimize_dc_bias(pc, cfg)


def test_restore_fixed_and_golden(tributary):
    pc, q = _capture(tributary, KkConfig())
    fixed = KkConfig(bias_search=BiasSearch(method="fixed"))
    y, b = restore_and_reconstruct(pc, fixed)
    np.testing.assert_allclose(b, pc.nominal_dc)
    y2, b2 = restore_and_reconstruct(pc, KkConfig())
    assert abs(b2[0] / pc.dc[0] - 1) < 0.02
    assert y2.n == y.n
