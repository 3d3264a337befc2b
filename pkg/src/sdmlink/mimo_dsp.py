"""
Digital receiver after the KK front ends.

Chain: rate conversion to 2 samples/symbol and RRC matched filter, bulk
dispersion compensation, data-aided frequency-offset removal, timing
alignment, and a butterfly LMS equalizer with blind phase search inside
the adaptation loop.

Sample ``2*s`` of an equalizer input is aligned with reference symbol ``s``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .kk_rx import adc_ratio
from .serialization import matrix_from_json, matrix_to_json
from .sigkit import MODE_ORDER, ComplexFrame, Constellation, RrcSpec, design_rrc, fir_filter, resample


class EqualizerDivergenceError(RuntimeError):
    """Output power ran away; ``taps`` holds the tap tensor at detection."""

    def __init__(self, msg: str, taps: np.ndarray, symbol: int):
        super().__init__(msg)
        self.taps = taps
        self.symbol = symbol


# ---------------------------------------------------------------------------
# Front-end conditioning
# ---------------------------------------------------------------------------


def to_symbol_grid(x: ComplexFrame, baud: float, rrc: RrcSpec, sps: int = 2) -> ComplexFrame:
    """Resample to ``sps`` samples/symbol and apply the RRC matched filter."""
    r = adc_ratio(x.sample_rate, sps * baud, max_denominator=256)
    if abs(float(r) * x.sample_rate - sps * baud) > 1e-6 * baud:
        raise ValueError(f"cannot convert {x.sample_rate:g} Sa/s to {sps} sps at {baud:g} Bd")
    y = resample(x, r.numerator, r.denominator)
    y = y.replace(sample_rate=sps * baud)
    return fir_filter(y, design_rrc(rrc.model_copy(update={"samples_per_symbol": sps})))


def compensate_dispersion(x: ComplexFrame, beta2_l_s2: float) -> ComplexFrame:
    """Undo ``exp(j/2 beta2 L w^2)`` accumulated over the link (all modes alike)."""
    if beta2_l_s2 == 0:
        return x
    w = 2 * np.pi * np.fft.fftfreq(x.n, 1.0 / x.sample_rate)
    H = np.exp(-0.5j * beta2_l_s2 * w**2)
    return x.replace(samples=np.fft.ifft(np.fft.fft(x.samples, axis=1) * H, axis=1))


@dataclass(frozen=True)
class FrequencyEstimate:
    """Carrier-offset estimate; ``peak_ratio_db`` is peak over mean periodogram level."""

    hz: float
    peak_ratio_db: float

    @property
    def reliable(self) -> bool:
        return self.peak_ratio_db > 15.0


def estimate_frequency_offset(x: ComplexFrame, ref_symbols: np.ndarray, baud: float, *,
                              n_symbols: int = 2**14, zero_pad: int = 4,
                              start_symbol: int = 0) -> FrequencyEstimate:
    """Data-aided carrier-offset estimate.

    Every (input channel, reference stream) product ``r_c[s] * conj(s_j[s])``
    carries a tone at the offset whatever the mixing; their periodograms are
    summed, and the peak refined by parabolic interpolation.

    Parameters
    ----------
    x : ComplexFrame
        Matched-filtered input at 2 samples/symbol.
    ref_symbols : ndarray (streams, symbols)
        Aligned with ``x`` (symbol ``s`` at sample ``2 s``).
    """
    sps = int(round(x.sample_rate / baud))
    ref = np.atleast_2d(ref_symbols)
    n = min(n_symbols, ref.shape[1] - start_symbol, (x.n - 1) // sps + 1 - start_symbol)
    r = x.samples[:, (start_symbol + np.arange(n)) * sps]
    s = ref[:, start_symbol : start_symbol + n]
    nfft = zero_pad * (1 << int(np.ceil(np.log2(n))))
    P = np.zeros(nfft)
    for c in range(r.shape[0]):
        P += np.sum(np.abs(np.fft.fft(r[c][None, :] * np.conj(s), n=nfft, axis=1)) ** 2, axis=0)
    k = int(np.argmax(P))
    a, b, cc = P[k - 1], P[k], P[(k + 1) % nfft]
    denom = a - 2 * b + cc
    delta = 0.5 * (a - cc) / denom if denom != 0 else 0.0
    f = np.fft.fftfreq(nfft, 1.0 / baud)[k] + delta * baud / nfft
    return FrequencyEstimate(float(f), float(10 * np.log10(b / P.mean())))


def remove_frequency_offset(x: ComplexFrame, hz: float) -> ComplexFrame:
    t = np.arange(x.n) / x.sample_rate
    return x.replace(samples=x.samples * np.exp(-2j * np.pi * hz * t)[None, :])


def align_timing(x: ComplexFrame, ref_symbols: np.ndarray, baud: float, *,
                 max_lag_symbols: int = 64, n_symbols: int = 2**13, start_symbol: int = 0,
                 block_symbols: int = 32) -> int:
    """Sample lag of ``x`` relative to the reference grid, by correlation.

    Correlations are summed noncoherently over blocks of ``block_symbols``,
    so a residual carrier offset well below ``baud / (4 * block_symbols)``
    does not wash out the peak.

    Returns the integer lag ``d`` (in samples) such that reference symbol
    ``s`` sits at sample ``sps*s + d``; shift by ``-d`` to align.
    """
    sps = int(round(x.sample_rate / baud))
    ref = np.atleast_2d(ref_symbols)
    n = min(n_symbols, ref.shape[1] - start_symbol - 2 * max_lag_symbols)
    if n < 64:
        raise ValueError("not enough symbols to align")
    n -= n % block_symbols
    s = ref[:, start_symbol + max_lag_symbols : start_symbol + max_lag_symbols + n]
    sb = s.reshape(s.shape[0], -1, block_symbols)
    best, best_lag = -1.0, 0
    for lag in range(-max_lag_symbols * sps, max_lag_symbols * sps + 1):
        idx = (start_symbol + max_lag_symbols + np.arange(n)) * sps + lag
        if idx[0] < 0 or idx[-1] >= x.n:
            continue
        rb = x.samples[:, idx].reshape(x.channels, -1, block_symbols)
        score = float(np.sum(np.abs(np.einsum("ibn,jbn->ijb", rb, sb.conj())) ** 2))
        if score > best:
            best, best_lag = score, lag
    return best_lag


def shift_samples(x: ComplexFrame, lag: int) -> ComplexFrame:
    """Advance by ``lag`` samples (cyclic; wrapped samples land in the guards)."""
    return x.replace(samples=np.roll(x.samples, -lag, axis=1))


# ---------------------------------------------------------------------------
# Receiver subset
# ---------------------------------------------------------------------------


class RxSelection(BaseModel):
    """Which receivers feed the equalizer; the first ``received_modes`` in mode order."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    transmitted_modes: int = Field(6, ge=1, le=6)
    received_modes: int = Field(6, ge=1, le=6)
    mode_order: tuple[str, ...] = MODE_ORDER

    @model_validator(mode="after")
    def _k(self):
        if self.received_modes < self.transmitted_modes:
            raise ValueError(
                f"received_modes ({self.received_modes}) < transmitted_modes ({self.transmitted_modes})"
            )
        return self

    @property
    def rx_modes(self) -> tuple[str, ...]:
        return self.mode_order[: self.received_modes]

    @property
    def tx_modes(self) -> tuple[str, ...]:
        return self.mode_order[: self.transmitted_modes]


def select_receivers(rx: ComplexFrame, sel: RxSelection) -> ComplexFrame:
    """First ``2*k`` tributaries of a capture ordered by mode then polarization."""
    if 2 * sel.received_modes > rx.channels:
        raise ValueError(f"k={sel.received_modes} needs {2 * sel.received_modes} channels, capture has {rx.channels}")
    return rx.replace(samples=rx.samples[: 2 * sel.received_modes])


# ---------------------------------------------------------------------------
# Equalizer
# ---------------------------------------------------------------------------


# inputs x taps of the equalizer the step sizes are specified for
STEP_REFERENCE_TAPS = 12 * 51


class EqualizerConfig(BaseModel):
    """Adaptation parameters.

    Step sizes refer to a 12-input, 51-tap equalizer. The applied step is
    ``step * STEP_REFERENCE_TAPS / (inputs * taps)``, which keeps
    ``mu * trace(R)`` and hence the LMS misadjustment independent of the
    equalizer dimensions.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_taps: int = Field(51, ge=1)
    step_train: float = Field(1e-3, gt=0)
    step_dd: float = Field(1e-4, gt=0)
    n_train_symbols: int = Field(20_000, ge=0)
    bps_test_phases: int = Field(32, ge=4)
    bps_window: int = Field(64, ge=1)
    # divergence: mean output power above factor x input power for `run` symbols
    divergence_factor: float = Field(10.0, gt=1)
    divergence_run: int = Field(1000, ge=1)
    # quarter-turn ambiguity re-resolved per block from its leading known symbols; 0 disables
    pilot_block_symbols: int = Field(1024, ge=1)
    pilot_symbols: int = Field(32, ge=0)

    @field_validator("n_taps")
    @classmethod
    def _odd(cls, v):
        if v % 2 == 0:
            raise ValueError("n_taps must be odd")
        return v


@dataclass
class EqualizerState:
    """Tap tensor ``(2M out, 2k in, L)`` at 2 samples/symbol plus its adaptation parameters."""

    taps: np.ndarray
    config: EqualizerConfig = field(default_factory=EqualizerConfig)
    phases: Optional[np.ndarray] = None
    input_scale: float = 1.0

    @classmethod
    def initial(cls, n_out: int, n_in: int, config: EqualizerConfig | None = None) -> "EqualizerState":
        """Centre-tap identity on the first ``n_out`` inputs."""
        config = config or EqualizerConfig()
        taps = np.zeros((n_out, n_in, config.n_taps), dtype=complex)
        for o in range(min(n_out, n_in)):
            taps[o, o, config.n_taps // 2] = 1.0
        return cls(taps, config)

    # parameters, spelled as on the domain type
    @property
    def step_train(self) -> float:
        return self.config.step_train

    @property
    def step_dd(self) -> float:
        return self.config.step_dd

    @property
    def bps_test_phases(self) -> int:
        return self.config.bps_test_phases

    @property
    def bps_window(self) -> int:
        return self.config.bps_window

    @property
    def n_train_symbols(self) -> int:
        return self.config.n_train_symbols

    def to_json_dict(self) -> dict:
        return {
            "format": "sdmlink-taps-v1",
            "taps": matrix_to_json(self.taps),
            "config": self.config.model_dump(),
            "phases": None if self.phases is None else self.phases.tolist(),
            "input_scale": self.input_scale,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "EqualizerState":
        ph = d.get("phases")
        return cls(matrix_from_json(d["taps"]), EqualizerConfig(**d["config"]),
                   None if ph is None else np.array(ph), d.get("input_scale", 1.0))


@numba.njit(nogil=True, cache=True)
def _lms_bps(x, ref, W, points, s_lo, s_hi, n_train, mu_train, mu_dd, phis, window, div_level, div_run):
    n_out, n_in, L = W.shape
    c = L // 2
    B = phis.size
    n_sym = s_hi - s_lo
    z_out = np.zeros((n_out, n_sym), dtype=np.complex128)
    th_out = np.zeros((n_out, n_sym))
    mse = np.zeros(n_sym)
    rot = np.exp(-1j * phis)
    ring = np.zeros((n_out, B, window))
    acc = np.zeros((n_out, B))
    da_ring = np.zeros((n_out, window), dtype=np.complex128)
    da_acc = np.zeros(n_out, dtype=np.complex128)
    theta = np.zeros(n_out)
    y = np.zeros(n_out, dtype=np.complex128)
    e = np.zeros(n_out, dtype=np.complex128)
    quarter = np.pi / 2
    run = 0
    for k in range(n_sym):
        s = s_lo + k
        base = 2 * s + c
        for o in range(n_out):
            a = 0j
            for i in range(n_in):
                for l in range(L):
                    a += W[o, i, l] * x[i, base - l]
            y[o] = a
        pos = k % window
        p_out = 0.0
        err = 0.0
        for o in range(n_out):
            p_out += (y[o].real ** 2 + y[o].imag ** 2) / n_out
            best_b = 0
            best_v = np.inf
            for b in range(B):
                zt = y[o] * rot[b]
                dmin = np.inf
                for q in range(points.size):
                    d = zt - points[q]
                    dd = d.real ** 2 + d.imag ** 2
                    if dd < dmin:
                        dmin = dd
                acc[o, b] += dmin - ring[o, b, pos]
                ring[o, b, pos] = dmin
                if acc[o, b] < best_v:
                    best_v = acc[o, b]
                    best_b = b
            if k < n_train:
                # data-aided phase: no quadrant ambiguity while the taps settle
                corr = y[o] * np.conj(ref[o, s])
                da_acc[o] += corr - da_ring[o, pos]
                da_ring[o, pos] = corr
                th = np.angle(da_acc[o])
            else:
                # parabolic refinement; the metric is pi/2-periodic so neighbours wrap
                m0 = acc[o, (best_b - 1) % B]
                m2 = acc[o, (best_b + 1) % B]
                den = m0 - 2.0 * best_v + m2
                frac = 0.5 * (m0 - m2) / den if den > 0 else 0.0
                phi = phis[best_b] + frac * (phis[1] - phis[0])
                th = phi + quarter * np.round((theta[o] - phi) / quarter)
            theta[o] = th
            z = y[o] * np.exp(-1j * th)
            if k < n_train:
                target = ref[o, s]
            else:
                dmin = np.inf
                target = points[0]
                for q in range(points.size):
                    d = z - points[q]
                    dd = d.real ** 2 + d.imag ** 2
                    if dd < dmin:
                        dmin = dd
                        target = points[q]
            ez = target - z
            err += (ez.real ** 2 + ez.imag ** 2) / n_out
            e[o] = ez * np.exp(1j * th)
            z_out[o, k] = z
            th_out[o, k] = th
        mse[k] = err
        if not (p_out <= div_level):
            run += 1
            if run >= div_run:
                return z_out, th_out, mse, theta, s
        else:
            run = 0
        if k < n_train // 2:
            mu = mu_train
        elif k < n_train:
            # second half of training glides geometrically down to the DD step
            mu = mu_train * (mu_dd / mu_train) ** ((k - n_train // 2) / (n_train - n_train // 2))
        else:
            mu = mu_dd
        for o in range(n_out):
            g = mu * e[o]
            for i in range(n_in):
                for l in range(L):
                    W[o, i, l] += g * np.conj(x[i, base - l])
    return z_out, th_out, mse, theta, -1


@dataclass
class EqualizerResult:
    """Equalized, derotated symbol streams after the training prefix.

    ``index[j]`` is the reference symbol index of column ``j``.
    """

    symbols: np.ndarray
    index: np.ndarray
    phase: np.ndarray
    mse: np.ndarray
    state: EqualizerState


def resolve_quadrants(z: np.ndarray, index: np.ndarray, ref: np.ndarray, block: int, pilots: int):
    """Undo cycle slips of the phase tracker with sparse pilots.

    Symbols whose reference index is among the first ``pilots`` of each
    ``block`` are treated as known; each block of every stream is rotated
    by the multiple of ``pi/2`` that best matches its pilots.

    Returns the corrected streams and the applied quarter turns
    ``(streams, blocks)``.
    """
    z = z.copy()
    blk = index // block
    is_pilot = (index % block) < pilots
    blocks = np.unique(blk)
    turns = np.zeros((z.shape[0], blocks.size), dtype=int)
    rot = 1j ** np.arange(4)
    for b_i, b in enumerate(blocks):
        sel = blk == b
        pil = sel & is_pilot
        if not pil.any():
            continue
        for o in range(z.shape[0]):
            err = [np.sum(np.abs(z[o, pil] * r - ref[o, index[pil]]) ** 2) for r in rot]
            k = int(np.argmin(err))
            if k:
                z[o, sel] *= rot[k]
            turns[o, b_i] = k
    return z, turns


def valid_symbol_range(n_samples: int, n_taps: int) -> tuple[int, int]:
    """Symbols whose full tap window lies inside ``n_samples`` at 2 sps."""
    c = n_taps // 2
    s_lo = max(0, -(-(n_taps - 1 - c) // 2))
    s_hi = (n_samples - 1 - c) // 2 + 1
    return s_lo, s_hi


def mimo_equalize(rx: ComplexFrame, ref_symbols: np.ndarray, state: EqualizerState,
                  c: Constellation, *, keep_training: bool = False) -> EqualizerResult:
    """Butterfly LMS with in-loop blind phase search.

    The first ``n_train_symbols`` processed symbols adapt towards the
    reference (the step gliding from ``step_train`` to ``step_dd`` over the
    second half), derotated by a windowed data-aided phase while the BPS
    window fills. The rest adapt towards hard decisions, with errors formed
    after derotation by the per-stream BPS phase, unwrapped from the
    trained phase. Inputs are scaled by one common
    factor to unit mean power, which leaves the channel's eigenvalue ratios
    intact.

    Raises
    ------
    EqualizerDivergenceError
        Mean output power above ``divergence_factor`` for ``divergence_run``
        consecutive symbols.
    """
    cfg = state.config
    ref = np.ascontiguousarray(np.atleast_2d(ref_symbols), dtype=np.complex128)
    n_out, n_in, L = state.taps.shape
    if rx.channels != n_in or ref.shape[0] != n_out:
        raise ValueError(f"taps {state.taps.shape[:2]} vs {ref.shape[0]} references and {rx.channels} inputs")
    scale = 1.0 / np.sqrt(np.mean(rx.power()))
    x = np.ascontiguousarray(rx.samples * scale, dtype=np.complex128)
    s_lo, s_hi = valid_symbol_range(rx.n, L)
    s_hi = min(s_hi, ref.shape[1])
    if s_hi - s_lo <= cfg.n_train_symbols:
        raise ValueError(f"only {s_hi - s_lo} symbols available for {cfg.n_train_symbols} training symbols")
    W = np.ascontiguousarray(state.taps, dtype=np.complex128).copy()
    phis = -np.pi / 4 + np.pi / 2 * np.arange(cfg.bps_test_phases) / cfg.bps_test_phases
    norm = STEP_REFERENCE_TAPS / (n_in * L)
    z, th, mse, theta, bad = _lms_bps(
        x, ref, W, np.ascontiguousarray(c.points, dtype=np.complex128), s_lo, s_hi, cfg.n_train_symbols,
        cfg.step_train * norm, cfg.step_dd * norm, phis, cfg.bps_window, cfg.divergence_factor, cfg.divergence_run,
    )
    if bad >= 0:
        raise EqualizerDivergenceError(
            f"equalizer diverged at symbol {bad}: output power above {cfg.divergence_factor}x input "
            f"for {cfg.divergence_run} symbols",
            W.copy(), int(bad),
        )
    skip = 0 if keep_training else cfg.n_train_symbols
    new_state = EqualizerState(W, cfg, theta.copy(), float(scale))
    idx = np.arange(s_lo, s_hi)
    if cfg.pilot_symbols:
        n = cfg.n_train_symbols
        z[:, n:], turns = resolve_quadrants(z[:, n:], idx[n:], ref, cfg.pilot_block_symbols, cfg.pilot_symbols)
        _, which = np.unique(idx[n:] // cfg.pilot_block_symbols, return_inverse=True)
        th[:, n:] -= turns[:, which] * (np.pi / 2)  # keep the phase track consistent with z
        if turns.size:
            new_state.phases = new_state.phases - turns[:, -1] * (np.pi / 2)
    return EqualizerResult(z[:, skip:], idx[skip:], th[:, skip:], mse, new_state)


def apply_taps(rx: ComplexFrame, state: EqualizerState) -> tuple[np.ndarray, np.ndarray]:
    """Static filtering by converged taps, derotated by the final phases.

    Returns the symbol streams and their reference indices. The input is
    scaled by the state's ``input_scale`` so a fresh capture of the same
    channel sees the same gain.
    """
    n_out, n_in, L = state.taps.shape
    c = L // 2
    s_lo, s_hi = valid_symbol_range(rx.n, L)
    x = rx.samples * state.input_scale
    idx = np.arange(s_lo, s_hi)
    out = np.zeros((n_out, idx.size), dtype=complex)
    for o in range(n_out):
        for i in range(n_in):
            full = np.convolve(x[i], state.taps[o, i])  # full[m] = sum_l w[l] x[m - l]
            out[o] += full[2 * idx + c]
    if state.phases is not None:
        out *= np.exp(-1j * state.phases)[:, None]
    return out, idx


__all__ = [
    "STEP_REFERENCE_TAPS", "EqualizerConfig", "EqualizerDivergenceError", "EqualizerResult", "EqualizerState",
    "FrequencyEstimate", "RxSelection", "align_timing", "apply_taps", "compensate_dispersion",
    "estimate_frequency_offset", "mimo_equalize", "remove_frequency_offset", "resolve_quadrants",
    "select_receivers",
    "shift_samples", "to_symbol_grid", "valid_symbol_range",
]
