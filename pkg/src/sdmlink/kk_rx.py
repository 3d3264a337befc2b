"""
Kramers-Kronig receiver front end.

A local-oscillator tone offset by ``lo_offset_hz`` is added to the received
field, the sum is square-law detected with AC coupling, and the field is
recovered from the intensity through its minimum-phase property. The DC
removed by the AC coupling has to be restored before the logarithm, either
from configuration or by a one-dimensional search.

The photocurrent of a field band-limited to ``B`` with an LO at ``f_off``
occupies ``|f| <= f_off + B/2``. Below the ADC Nyquist frequency, sampling
the intensity is exact, so the optical field is interpolated at the ADC
instants and detected there.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Literal, Optional, Sequence

import numpy as np
import scipy.signal as sps
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .sigkit import ComplexFrame, RrcSpec, design_rrc, evm, fir_filter, hilbert_transform, resample


class KkReconstructionError(ValueError):
    """The biased photocurrent is not strictly positive."""


class BiasSearchError(ValueError):
    """No positivity-restoring bias inside the search bounds."""


class BiasSearch(BaseModel):
    """DC-bias restoration.

    ``lower``/``upper`` and ``rel_tol`` are relative to the nominal DC
    ``P_LO * (1 + 1/CSPR)``, the photocurrent mean the receiver expects.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    method: Literal["fixed", "golden"] = "golden"
    lower: float = Field(0.2, gt=0)
    upper: float = Field(3.0, gt=0)
    rel_tol: float = Field(1e-3, gt=0)
    segment_samples: int = Field(8192, ge=256)

    @model_validator(mode="after")
    def _order(self):
        if self.upper <= self.lower:
            raise ValueError("bias_search.upper must exceed bias_search.lower")
        return self


class KkConfig(BaseModel):
    """Receiver front-end parameters."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    lo_offset_hz: float = Field(18.5e9, gt=0)
    cspr_db: float = Field(10.0, ge=0)
    adc_rate_hz: float = Field(80e9, gt=0)
    adc_bandwidth_hz: float = Field(36e9, gt=0)
    # two-sided optical signal bandwidth, baud * (1 + roll-off)
    signal_bandwidth_hz: float = Field(33.33e9 * 1.01, gt=0)
    # internal rate = ADC rate * p / q ahead of the sqrt/log/Hilbert steps
    upsample: tuple[int, int] = (2, 1)
    # absolute bias used by method="fixed"; None means the nominal DC
    dc_bias: Optional[float] = None
    bias_search: BiasSearch = BiasSearch()

    @model_validator(mode="after")
    def _checks(self):
        if self.lo_offset_hz <= self.signal_bandwidth_hz / 2:
            raise ValueError(
                f"lo_offset_hz ({self.lo_offset_hz:g}) must exceed the one-sided signal bandwidth "
                f"({self.signal_bandwidth_hz / 2:g})"
            )
        p, q = self.upsample
        if p < 1 or q < 1 or p < q:
            raise ValueError("upsample must be (p, q) with p >= q >= 1")
        return self

    @property
    def cspr(self) -> float:
        return 10 ** (self.cspr_db / 10)


@dataclass(frozen=True)
class Photocurrent:
    """AC-coupled detector output.

    ``dc`` is the per-channel mean removed by the AC coupling (ground truth,
    unknown to a real receiver); ``lo_power`` the per-channel LO power.
    """

    samples: np.ndarray
    sample_rate: float
    lo_power: np.ndarray
    dc: np.ndarray
    cspr: float

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def nominal_dc(self) -> np.ndarray:
        return self.lo_power * (1 + 1 / self.cspr)

    def segment(self, start: int, count: int) -> "Photocurrent":
        return Photocurrent(self.samples[:, start : start + count], self.sample_rate, self.lo_power, self.dc,
                            self.cspr)

    def channel(self, c: int) -> "Photocurrent":
        return Photocurrent(self.samples[c : c + 1], self.sample_rate, self.lo_power[c : c + 1],
                            self.dc[c : c + 1], self.cspr)


# ---------------------------------------------------------------------------
# ADC and detection
# ---------------------------------------------------------------------------


def adc_ratio(in_rate: float, adc_rate: float, max_denominator: int = 64) -> Fraction:
    """Rational approximation ``p/q`` of ``adc_rate / in_rate``."""
    return Fraction(adc_rate / in_rate).limit_denominator(max_denominator)


def adc_capture(x: ComplexFrame, cfg: KkConfig, start: int, n_samples: int) -> ComplexFrame:
    """Sample a periodic, band-limited field at the ADC instants.

    Sample ``k`` of the result is the field at input-sample time
    ``start + k * q / p`` (``p/q`` from :func:`adc_ratio`), obtained by exact
    trigonometric interpolation of the periodic input. ``start`` may be
    negative or exceed the frame; time wraps around.
    """
    r = adc_ratio(x.sample_rate, cfg.adc_rate_hz)
    p, q = r.numerator, r.denominator
    n = x.n
    idx = (start * p + q * np.arange(n_samples)) % (p * n)
    out = np.empty((x.channels, n_samples), dtype=complex)
    half = n // 2
    for c in range(x.channels):
        X = np.fft.fft(x.samples[c])
        Xp = np.zeros(p * n, dtype=complex)
        Xp[:half] = X[:half]
        Xp[-(n - half):] = X[half:]
        out[c] = np.fft.ifft(Xp)[idx] * p
    return ComplexFrame(out, x.sample_rate * p / q, x.center_offset)


def photodetect(x: ComplexFrame, cfg: KkConfig) -> Photocurrent:
    """Add the LO tone, detect ``|E + A exp(j 2 pi f_off t)|**2`` and AC couple.

    The LO power is set per channel from ``cspr_db`` and the channel's
    mean power. The analog bandwidth is modelled as a brick wall at
    ``adc_bandwidth_hz``; time starts at sample 0.
    """
    p_sig = x.power()
    lo_power = p_sig * cfg.cspr
    t = np.arange(x.n) / x.sample_rate
    lo = np.sqrt(lo_power)[:, None] * np.exp(2j * np.pi * cfg.lo_offset_hz * t)[None, :]
    i = np.abs(x.samples + lo) ** 2
    if cfg.adc_bandwidth_hz < x.sample_rate / 2:
        f = np.fft.rfftfreq(x.n, 1.0 / x.sample_rate)
        I = np.fft.rfft(i, axis=1)
        I[:, f > cfg.adc_bandwidth_hz] = 0.0
        i = np.fft.irfft(I, n=x.n, axis=1)
    dc = i.mean(axis=1)
    return Photocurrent(i - dc[:, None], x.sample_rate, lo_power, dc, cfg.cspr)


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------


def minimum_phase_field(intensity: np.ndarray) -> np.ndarray:
    """Field with modulus ``sqrt(I)`` and phase ``-H{ln(I) / 2}``.

    The sign selects the field whose non-DC content lies at negative
    frequencies, i.e. signal below the LO line.
    """
    i = np.asarray(intensity, dtype=float)
    bad = int(np.sum(~(i > 0)))
    if bad:
        raise KkReconstructionError(f"biased photocurrent is nonpositive at {bad} of {i.size} samples")
    half_log = 0.5 * np.log(i)
    n = i.shape[-1]
    if n % 2:
        ext = np.concatenate([half_log, half_log[..., -1:]], axis=-1)
        phi = -hilbert_transform(ext)[..., :n]
    else:
        phi = -hilbert_transform(half_log)
    return np.sqrt(i) * np.exp(1j * phi)


def _bias_vector(pc: Photocurrent, bias) -> np.ndarray:
    return np.broadcast_to(np.asarray(bias, dtype=float), (pc.channels,))


def _internal(i: np.ndarray, rate: float, cfg: KkConfig) -> ComplexFrame:
    # the record is treated as periodic, as in the Hilbert step: FFT interpolation
    p, q = cfg.upsample
    i = np.atleast_2d(i)
    n = i.shape[1]
    if (p, q) == (1, 1):
        return ComplexFrame(i, rate)
    if (n * p) % q:
        return resample(ComplexFrame(i, rate), p, q)
    return ComplexFrame(sps.resample(i, n * p // q, axis=1), rate * p / q)


def positivity_floor(pc: Photocurrent, cfg: KkConfig) -> np.ndarray:
    """Per-channel bias below which the internal-rate intensity has nonpositive samples."""
    return -_internal(pc.samples, pc.sample_rate, cfg).samples.real.min(axis=1)


def kk_baseband(pc: Photocurrent, cfg: KkConfig, bias) -> ComplexFrame:
    """Reconstructed field at the internal rate, shifted to baseband, LO removed.

    No low-pass is applied, so reconstruction artefacts outside the signal
    band remain visible to bias-quality functionals.
    """
    i = pc.samples + _bias_vector(pc, bias)[:, None]
    up = _internal(i, pc.sample_rate, cfg)
    s = minimum_phase_field(up.samples.real)
    s = s - s.mean(axis=1, keepdims=True)
    t = np.arange(up.n) / up.sample_rate
    s = s * np.exp(2j * np.pi * cfg.lo_offset_hz * t)[None, :]
    return ComplexFrame(s, up.sample_rate)


def kk_reconstruct(pc: Photocurrent, cfg: KkConfig, bias=None) -> ComplexFrame:
    """Recover the complex baseband field at the ADC rate.

    Parameters
    ----------
    pc : Photocurrent
    cfg : KkConfig
    bias : float or array, optional
        DC added back before reconstruction, per channel or common. Defaults
        to ``cfg.dc_bias`` and then to the nominal DC.

    Raises
    ------
    KkReconstructionError
        If the biased photocurrent is not strictly positive.
    """
    if bias is None:
        bias = cfg.dc_bias if cfg.dc_bias is not None else pc.nominal_dc
    bb = kk_baseband(pc, cfg, bias)
    f = np.fft.fftfreq(bb.n, 1.0 / bb.sample_rate)
    S = np.fft.fft(bb.samples, axis=1)
    S[:, np.abs(f) > cfg.signal_bandwidth_hz / 2] = 0.0
    n = pc.samples.shape[1]
    if bb.n == n:
        return ComplexFrame(np.fft.ifft(S, axis=1), pc.sample_rate)
    if (n * cfg.upsample[0]) % cfg.upsample[1]:
        y = resample(ComplexFrame(np.fft.ifft(S, axis=1), bb.sample_rate), *cfg.upsample[::-1])
        return y.replace(samples=y.samples[:, :n], sample_rate=pc.sample_rate)
    # back to the ADC rate by keeping the bins below its Nyquist frequency
    h = n // 2
    Y = np.zeros((S.shape[0], n), dtype=complex)
    Y[:, :h] = S[:, :h]
    Y[:, h:] = S[:, bb.n - (n - h):]
    return ComplexFrame(np.fft.ifft(Y, axis=1) * (n / bb.n), pc.sample_rate)


# ---------------------------------------------------------------------------
# Bias search
# ---------------------------------------------------------------------------


def golden_section_max(f: Callable[[float], float], a: float, b: float, tol: float):
    """Maximize a unimodal ``f`` on ``[a, b]`` to interval width ``tol``.

    Returns
    -------
    x, fx : float
        Best evaluated point and its value.
    n_eval : int
    """
    inv_phi = (np.sqrt(5) - 1) / 2
    c, d = b - inv_phi * (b - a), a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    n_eval = 2
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
        n_eval += 1
    return (c, fc, n_eval) if fc >= fd else (d, fd, n_eval)


def gap_quality(cfg: KkConfig) -> Callable[[ComplexFrame], float]:
    """Blind functional: in-band to LO-gap spectral density ratio (dB).

    Between the LO line and the signal band the received field is empty.
    A bias error leaves signal-signal beat products there; a correct bias
    removes them. Measured after the shift to baseband, on
    ``B/2 < f < 2 f_off - B/2`` without the LO bin.
    """
    half = cfg.signal_bandwidth_hz / 2
    f_lo = cfg.lo_offset_hz

    def quality(bb: ComplexFrame) -> float:
        S = np.abs(np.fft.fft(bb.samples * np.hanning(bb.n), axis=1)) ** 2
        f = np.fft.fftfreq(bb.n, 1.0 / bb.sample_rate)
        df = bb.sample_rate / bb.n
        gap = (f > half * 1.01) & (f < 2 * f_lo - half * 1.01) & (np.abs(f - f_lo) > 4 * df)
        if not gap.any():
            raise ValueError("segment too short to resolve the LO gap")
        return float(10 * np.log10(S[:, np.abs(f) <= half].mean() / (S[:, gap].mean() + 1e-300)))

    return quality


def pilot_evm_quality(pilot: np.ndarray, baud: float, rrc: RrcSpec, skip: int = 64) -> Callable[[ComplexFrame], float]:
    """Negative EVM against known symbols.

    ``pilot[k]`` is the symbol centred on time ``k / baud`` of the segment;
    ``skip`` symbols at each edge are ignored.
    """
    pilot = np.asarray(pilot)
    mf = design_rrc(rrc.model_copy(update={"samples_per_symbol": 2}))

    def quality(bb: ComplexFrame) -> float:
        r = adc_ratio(bb.sample_rate, 2 * baud, max_denominator=256)
        y = resample(bb, r.numerator, r.denominator)
        y = fir_filter(y, mf)
        sym = y.samples[0, ::2]
        n = min(sym.size, pilot.size)
        if n <= 2 * skip:
            raise ValueError("pilot segment too short for the edge guard")
        return -evm(sym[skip : n - skip], pilot[skip : n - skip])

    return quality


def optimize_dc_bias(pc: Photocurrent, cfg: KkConfig, quality: Optional[Callable[[ComplexFrame], float]] = None,
                     min_bias: float = -np.inf):
    """Golden-section search of the restored DC maximizing ``quality``.

    ``quality`` receives the unfiltered baseband field of a single channel
    (:func:`kk_baseband`) and returns a figure where larger is better;
    default :func:`gap_quality`. Biases that leave nonpositive
    samples score ``-inf``. ``min_bias`` raises the lower search bound,
    e.g. to keep a longer record than ``pc`` positive.

    Returns
    -------
    bias : float
    quality_value : float
    n_eval : int

    Raises
    ------
    BiasSearchError
        If no bias within the bounds restores positivity.
    """
    if pc.channels != 1:
        raise ValueError("optimize_dc_bias works on one channel at a time")
    bs = cfg.bias_search
    quality = quality or gap_quality(cfg)
    d0 = float(pc.nominal_dc[0])
    lo, hi = bs.lower * d0, bs.upper * d0
    floor = max(float(positivity_floor(pc, cfg)[0]), min_bias)
    if hi <= floor:
        raise BiasSearchError(
            f"bias bounds [{lo:.4g}, {hi:.4g}] never restore positivity (need > {floor:.4g})"
        )
    lo = max(lo, floor * (1 + 1e-6) + 1e-12 * d0)

    def f(b):
        try:
            return quality(kk_baseband(pc, cfg, b))
        except KkReconstructionError:
            return -np.inf

    return golden_section_max(f, lo, hi, bs.rel_tol * d0)


def restore_and_reconstruct(pc: Photocurrent, cfg: KkConfig,
                            quality: Optional[Callable[[ComplexFrame], float]] = None):
    """Per-channel bias restoration followed by :func:`kk_reconstruct`.

    With ``method="golden"`` the bias is searched on a central segment of
    ``segment_samples``. Returns the reconstructed frame and the biases.
    """
    bs = cfg.bias_search
    if bs.method == "fixed":
        bias = np.full(pc.channels, cfg.dc_bias) if cfg.dc_bias is not None else pc.nominal_dc
        return kk_reconstruct(pc, cfg, bias), bias
    n = pc.samples.shape[1]
    seg = min(bs.segment_samples, n)
    start = (n - seg) // 2
    floor = positivity_floor(pc, cfg)
    bias = np.empty(pc.channels)
    for c in range(pc.channels):
        # the whole record, not just the searched segment, must stay positive
        bias[c] = optimize_dc_bias(pc.channel(c).segment(start, seg), cfg, quality, min_bias=floor[c])[0]
    return kk_reconstruct(pc, cfg, bias), bias


__all__: Sequence[str] = (
    "BiasSearch", "BiasSearchError", "KkConfig", "KkReconstructionError", "Photocurrent",
    "adc_capture", "adc_ratio", "golden_section_max", "kk_baseband", "kk_reconstruct",
    "gap_quality", "minimum_phase_field", "optimize_dc_bias", "photodetect",
    "pilot_evm_quality", "positivity_floor", "restore_and_reconstruct",
)
