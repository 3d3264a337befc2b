"""
Shared DSP primitives and signal containers.

Everything downstream passes signals around as :class:`ComplexFrame`, a
``(channels, samples)`` complex array tagged with its sample rate. None of
the functions here assume a global rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import signal as sps

#: Lantern port / receiver ranking; frames list tributaries as (mode, pol) in this order.
MODE_ORDER = ("LP01", "LP11a", "LP11b", "LP21a", "LP21b", "LP02")
#: Degenerate mode groups of the 6-LP fiber.
MODE_GROUPS = {"LP01": 1, "LP11a": 2, "LP11b": 2, "LP21a": 3, "LP21b": 3, "LP02": 3}

SPEED_OF_LIGHT = 299_792_458.0

# Above this many multiply-accumulates fir_filter switches to FFT convolution.
_FFT_CONV_THRESHOLD = 1 << 16


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComplexFrame:
    """Multi-channel complex baseband block.

    Attributes
    ----------
    samples : ndarray, shape (channels, n)
        Complex samples, one row per spatial/polarization tributary.
    sample_rate : float
        Sample rate in Hz.
    center_offset : float
        Digital carrier offset of the block relative to the nominal carrier, Hz.
    """

    samples: np.ndarray
    sample_rate: float
    center_offset: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2:
            raise ValueError(f"samples must be 1-D or 2-D, got ndim={s.ndim}")
        if s.shape[1] == 0 or s.shape[0] == 0:
            raise ValueError("frame must contain at least one sample per channel")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", s.astype(np.complex128, copy=False))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n(self) -> int:
        return self.samples.shape[1]

    def replace(self, samples=None, sample_rate=None, center_offset=None) -> "ComplexFrame":
        return ComplexFrame(
            self.samples if samples is None else samples,
            self.sample_rate if sample_rate is None else sample_rate,
            self.center_offset if center_offset is None else center_offset,
        )

    def power(self) -> np.ndarray:
        """Mean power of each channel."""
        return np.mean(np.abs(self.samples) ** 2, axis=1)


def _gray_8qam_labels() -> np.ndarray:
    # Minimizes mean Hamming distance over the 12 nearest-neighbour pairs (16/12).
    return np.array([0, 1, 2, 6, 4, 5, 3, 7])


@dataclass(frozen=True)
class Constellation:
    """Symbol alphabet with a binary labeling.

    ``labels[i]`` is the integer label (MSB first) of ``points[i]``.
    """

    points: np.ndarray
    labels: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.complex128)
        lab = np.asarray(self.labels, dtype=np.int64)
        if pts.ndim != 1 or lab.shape != pts.shape:
            raise ValueError("points and labels must be 1-D arrays of equal length")
        m = int(round(np.log2(pts.size)))
        if 2**m != pts.size:
            raise ValueError(f"constellation size {pts.size} is not a power of two")
        if sorted(lab.tolist()) != list(range(pts.size)):
            raise ValueError("labels must be a permutation of 0..M-1")
        pts = pts / np.sqrt(np.mean(np.abs(pts) ** 2))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)

    @property
    def m(self) -> int:
        """Bits per symbol."""
        return int(round(np.log2(self.points.size)))

    @property
    def size(self) -> int:
        return self.points.size

    @cached_property
    def bit_labels(self) -> np.ndarray:
        """``(M, m)`` array of label bits, MSB first."""
        shifts = np.arange(self.m - 1, -1, -1)
        return ((self.labels[:, None] >> shifts) & 1).astype(np.uint8)

    @cached_property
    def index_of_label(self) -> np.ndarray:
        inv = np.empty_like(self.labels)
        inv[self.labels] = np.arange(self.size)
        return inv

    @classmethod
    def circular_8qam(cls) -> "Constellation":
        """(4,4) two-ring 8QAM: inner square (+-1 +-1j), outer points on the axes at 1+sqrt(3)."""
        a = 1 + np.sqrt(3)
        pts = np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j, a, 1j * a, -a, -1j * a])
        return cls(pts, _gray_8qam_labels(), name="8qam-circ")

    @classmethod
    def square_qam(cls, order: int) -> "Constellation":
        """Square Gray-labeled QAM (order 4, 16, 64, ...)."""
        k = int(round(np.sqrt(order)))
        if k * k != order or k < 2 or k & (k - 1):
            raise ValueError(f"square QAM needs order 4**n, got {order}")
        half = int(np.log2(k))
        levels = np.arange(-k + 1, k, 2, dtype=float)
        gray = np.arange(k) ^ (np.arange(k) >> 1)
        pts, labs = [], []
        for i in range(k):
            for q in range(k):
                pts.append(levels[i] + 1j * levels[q])
                labs.append((gray[i] << half) | gray[q])
        return cls(np.array(pts), np.array(labs), name=f"{order}qam")

    @classmethod
    def by_name(cls, name: str) -> "Constellation":
        if name in ("8qam", "8qam-circ"):
            return cls.circular_8qam()
        if name.endswith("qam") and name[:-3].isdigit():
            return cls.square_qam(int(name[:-3]))
        raise ValueError(f"unknown constellation {name!r}")


class RrcSpec(BaseModel):
    """Root-raised-cosine filter parameters."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    roll_off: float = Field(0.01, ge=0.0, le=1.0)
    span_symbols: int = Field(256, gt=0)
    samples_per_symbol: int = Field(3, ge=2)

    @field_validator("span_symbols")
    @classmethod
    def _even_span(cls, v):
        if v % 2:
            raise ValueError("span_symbols must be even")
        return v


# ---------------------------------------------------------------------------
# Bit source and mapping
# ---------------------------------------------------------------------------

# Feedback taps of maximal-length Fibonacci LFSRs (XAPP052 table).
PRBS_TAPS = {
    2: (2, 1), 3: (3, 2), 4: (4, 3), 5: (5, 3), 6: (6, 5), 7: (7, 6),
    8: (8, 6, 5, 4), 9: (9, 5), 10: (10, 7), 11: (11, 9), 12: (12, 6, 4, 1),
    13: (13, 4, 3, 1), 14: (14, 5, 3, 1), 15: (15, 14), 16: (16, 15, 13, 4),
    17: (17, 14), 18: (18, 11), 19: (19, 6, 2, 1), 20: (20, 17), 21: (21, 19),
    22: (22, 21), 23: (23, 18), 24: (24, 23, 22, 17), 25: (25, 22),
    26: (26, 6, 2, 1), 27: (27, 5, 2, 1), 28: (28, 25), 29: (29, 27),
    30: (30, 6, 4, 1), 31: (31, 28),
}


def generate_prbs(degree: int, length: int, seed: int = 1) -> np.ndarray:
    """Maximal-length LFSR bit sequence.

    The first ``degree`` output bits are the register seed (LSB first); the
    rest follow ``b[n] = XOR_t b[n - t]`` over the feedback lags, which has
    period ``2**degree - 1`` for any nonzero seed.

    Parameters
    ----------
    degree : int
        Register length, 2..31.
    length : int
        Number of output bits.
    seed : int
        Initial register contents, ``0 < seed < 2**degree``.

    Returns
    -------
    ndarray of uint8
    """
    if degree not in PRBS_TAPS:
        raise ValueError(f"degree must be in 2..31, got {degree}")
    if not 0 < seed < (1 << degree):
        raise ValueError(f"seed must be a nonzero {degree}-bit register value, got {seed}")
    if length < 0:
        raise ValueError("length must be nonnegative")

    taps = PRBS_TAPS[degree]
    # The reciprocal polynomial is also primitive; pick whichever recurrence
    # has the larger minimum lag so each numpy step fills a longer block.
    direct = tuple(taps)
    recip = (degree,) + tuple(degree - t for t in taps[1:])
    lags = max(direct, recip, key=min)
    block = min(lags)

    n_total = max(length, degree)
    out = np.empty(n_total, dtype=np.uint8)
    out[:degree] = (seed >> np.arange(degree)) & 1
    n = degree
    while n < n_total:
        k = min(block, n_total - n)
        acc = out[n - lags[0]:n - lags[0] + k].copy()
        for lag in lags[1:]:
            acc ^= out[n - lag:n - lag + k]
        out[n:n + k] = acc
        n += k
    return out[:length]


def map_symbols(bits: np.ndarray, c: Constellation) -> np.ndarray:
    """Map consecutive ``c.m``-bit groups (MSB first) to constellation points."""
    bits = np.asarray(bits, dtype=np.int64).ravel()
    if bits.size % c.m:
        raise ValueError(f"bit length {bits.size} is not divisible by m={c.m}")
    groups = bits.reshape(-1, c.m)
    labels = groups @ (1 << np.arange(c.m - 1, -1, -1))
    return c.points[c.index_of_label[labels]]


def decide(symbols: np.ndarray, c: Constellation) -> np.ndarray:
    """Minimum-distance decision; returns point indices into ``c.points``."""
    s = np.asarray(symbols)
    d = np.abs(s[..., None] - c.points) ** 2
    return np.argmin(d, axis=-1)


def demap_hard(symbols: np.ndarray, c: Constellation) -> np.ndarray:
    """Hard-decision bits for each symbol, flattened MSB-first per symbol."""
    idx = decide(symbols, c)
    return c.bit_labels[idx].reshape(*np.shape(symbols)[:-1], -1)


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------


def design_rrc(spec: RrcSpec) -> np.ndarray:
    """Root-raised-cosine taps, unit L2 norm, ``span*sps + 1`` long."""
    beta = spec.roll_off
    sps_ = spec.samples_per_symbol
    half = spec.span_symbols * sps_ // 2
    t = np.arange(-half, half + 1) / sps_
    h = np.empty(t.size)

    at_zero = np.isclose(t, 0.0)
    at_sing = np.zeros_like(at_zero) if beta == 0 else np.isclose(np.abs(4 * beta * t), 1.0)
    rest = ~(at_zero | at_sing)

    h[at_zero] = 1 - beta + 4 * beta / np.pi
    if beta > 0:
        h[at_sing] = beta / np.sqrt(2) * (
            (1 + 2 / np.pi) * np.sin(np.pi / (4 * beta))
            + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta))
        )
    tr = t[rest]
    h[rest] = (np.sin(np.pi * tr * (1 - beta)) + 4 * beta * tr * np.cos(np.pi * tr * (1 + beta))) / (
        np.pi * tr * (1 - (4 * beta * tr) ** 2)
    )
    # enforce exact even symmetry against rounding in t
    h = 0.5 * (h + h[::-1])
    return h / np.linalg.norm(h)


def fir_filter(x: ComplexFrame, taps, cyclic: bool = False) -> ComplexFrame:
    """Filter every channel with ``taps``, output aligned to the input.

    Output sample ``i`` is ``full[i + (L - 1) // 2]`` of the linear
    convolution, so a symmetric odd-length filter introduces no delay.
    With ``cyclic=True`` the block is treated as one period of a periodic
    signal (circular convolution, same alignment).
    """
    taps = np.asarray(taps)
    if taps.ndim != 1 or taps.size == 0:
        raise ValueError("taps must be a nonempty 1-D sequence")
    L = taps.size
    d = (L - 1) // 2
    s = x.samples
    n = x.n

    if cyclic:
        h = np.zeros(n, dtype=np.result_type(taps, np.complex128))
        # circular index of tap k is (k - d) mod n; fold long filters
        np.add.at(h, (np.arange(L) - d) % n, taps)
        y = np.fft.ifft(np.fft.fft(s, axis=1) * np.fft.fft(h), axis=1)
        if np.isrealobj(taps) and np.isrealobj(s):
            y = y.real
        return x.replace(samples=y)

    if L * n > _FFT_CONV_THRESHOLD:
        full = sps.oaconvolve(s, taps[None, :], axes=1) if L > 1 else s * taps[0]
    else:
        full = np.stack([np.convolve(row, taps) for row in s])
    return x.replace(samples=full[:, d:d + n])


def _resample_filter(p: int, q: int, half_len_per_phase: int = 64) -> np.ndarray:
    m = max(p, q)
    n = 2 * half_len_per_phase * m + 1
    return sps.firwin(n, 1.0 / m, window=("kaiser", 8.0))


def resample(x: ComplexFrame, p: int, q: int) -> ComplexFrame:
    """Rational resampling by ``p/q`` with a long Kaiser anti-alias filter.

    Sample 0 of the output coincides in time with sample 0 of the input;
    ``ceil(n*p/q)`` samples are returned.
    """
    if int(p) != p or int(q) != q or p < 1 or q < 1:
        raise ValueError(f"p and q must be positive integers, got {p}/{q}")
    from math import gcd

    g = gcd(int(p), int(q))
    p, q = int(p) // g, int(q) // g
    if p == q == 1:
        return x.replace(samples=x.samples.copy())
    h = _resample_filter(p, q)
    y = sps.resample_poly(x.samples, p, q, axis=1, window=h)
    return x.replace(samples=y, sample_rate=x.sample_rate * p / q)


def hilbert_transform(x) -> np.ndarray:
    """Discrete Hilbert transform of a real even-length sequence.

    Multiplies the DFT by ``-j*sgn(f)`` with the DC and Nyquist bins zeroed,
    so ``cos -> sin`` for every bin strictly between them.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if n < 2 or n % 2:
        raise ValueError(f"hilbert_transform needs an even length >= 2, got {n}")
    X = np.fft.rfft(x, axis=-1)
    X *= -1j
    X[..., 0] = 0.0
    X[..., -1] = 0.0
    return np.fft.irfft(X, n=n, axis=-1)


# ---------------------------------------------------------------------------
# Small utilities shared by the stages
# ---------------------------------------------------------------------------


def frequency_shift(x: ComplexFrame, f_hz: float, t0: float = 0.0) -> ComplexFrame:
    """Multiply by ``exp(j 2 pi f t)``; ``t0`` is the time of sample 0."""
    t = t0 + np.arange(x.n) / x.sample_rate
    rot = np.exp(2j * np.pi * f_hz * t)
    return x.replace(samples=x.samples * rot, center_offset=x.center_offset + f_hz)


def fractional_delay(x: ComplexFrame, delay_samples: float) -> ComplexFrame:
    """Cyclic delay by a possibly fractional number of samples (FFT phase ramp)."""
    f = np.fft.fftfreq(x.n)
    ramp = np.exp(-2j * np.pi * f * delay_samples)
    if x.n % 2 == 0 and delay_samples != int(delay_samples):
        ramp[x.n // 2] = np.cos(np.pi * delay_samples)
    y = np.fft.ifft(np.fft.fft(x.samples, axis=1) * ramp, axis=1)
    return x.replace(samples=y)


def brickwall(x: ComplexFrame, f_lo: float, f_hi: float) -> ComplexFrame:
    """Zero every DFT bin outside ``[f_lo, f_hi]`` Hz."""
    f = np.fft.fftfreq(x.n, 1.0 / x.sample_rate)
    mask = (f >= f_lo) & (f <= f_hi)
    y = np.fft.ifft(np.fft.fft(x.samples, axis=1) * mask, axis=1)
    return x.replace(samples=y)


def evm(rx, ref) -> float:
    """RMS error vector magnitude (fraction, not %) after a least-squares complex gain."""
    rx = np.asarray(rx).ravel()
    ref = np.asarray(ref).ravel()
    g = np.vdot(rx, ref) / np.vdot(rx, rx)
    err = g * rx - ref
    return float(np.sqrt(np.mean(np.abs(err) ** 2) / np.mean(np.abs(ref) ** 2)))


@dataclass
class Periodogram:
    freqs: np.ndarray
    psd: np.ndarray = field(repr=False)


def periodogram(x: ComplexFrame, channel: int = 0, nfft: int | None = None) -> Periodogram:
    """Welch PSD of one channel, two-sided, frequencies ascending."""
    nper = min(x.n, nfft or 4096)
    f, p = sps.welch(x.samples[channel], fs=x.sample_rate, nperseg=nper,
                     return_onesided=False, detrend=False)
    order = np.argsort(f)
    return Periodogram(f[order], p[order])
