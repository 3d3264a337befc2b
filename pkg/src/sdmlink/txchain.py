"""
Transmitter: PRBS bits -> 8QAM symbols -> RRC-shaped waveform -> spatial frame.

Both polarizations of a spatial mode are independent tributaries. Every
launched mode carries the same pair of tributaries, cyclically delayed by
its decorrelation fiber, so the frame is one period of a periodic waveform.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .sigkit import (
    MODE_ORDER,
    SPEED_OF_LIGHT,
    ComplexFrame,
    Constellation,
    RrcSpec,
    design_rrc,
    fir_filter,
    generate_prbs,
    map_symbols,
)


class TxConfig(BaseModel):
    """Transmitter parameters. Defaults follow the lab transmitter."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    baud: float = Field(33.33e9, gt=0)
    samples_per_symbol: int = Field(3, ge=2)
    n_symbols: int = Field(2**16, ge=64)
    rrc: RrcSpec = RrcSpec(roll_off=0.01, span_symbols=256, samples_per_symbol=3)
    constellation: str = "8qam"
    active_modes: tuple[str, ...] = MODE_ORDER
    # one entry per lantern port in MODE_ORDER
    decorrelation_delays_m: tuple[float, ...] = (0.0, 20.0, 30.0, 50.0, 60.0, 80.0)
    group_index: float = Field(1.468, gt=0)
    # (frequency Hz, linear amplitude gain) breakpoints; None means flat
    pre_emphasis: Optional[tuple[tuple[float, float], ...]] = None
    prbs_degree: int = Field(23, ge=2, le=31)
    seed: int = Field(1, ge=0)

    @field_validator("active_modes")
    @classmethod
    def _known_modes(cls, v):
        bad = [m for m in v if m not in MODE_ORDER]
        if bad:
            raise ValueError(f"unknown modes {bad}; expected a subset of {list(MODE_ORDER)}")
        if len(set(v)) != len(v) or not v:
            raise ValueError("active_modes must be nonempty and without duplicates")
        return tuple(m for m in MODE_ORDER if m in v)

    @field_validator("decorrelation_delays_m")
    @classmethod
    def _delays(cls, v):
        if len(v) != len(MODE_ORDER):
            raise ValueError(f"need {len(MODE_ORDER)} delays (one per lantern port), got {len(v)}")
        if any(d < 0 for d in v):
            raise ValueError("delays must be nonnegative")
        return v

    @field_validator("constellation")
    @classmethod
    def _const(cls, v):
        Constellation.by_name(v)
        return v

    @model_validator(mode="after")
    def _consistency(self):
        if self.rrc.samples_per_symbol != self.samples_per_symbol:
            object.__setattr__(
                self, "rrc", self.rrc.model_copy(update={"samples_per_symbol": self.samples_per_symbol})
            )
        if len(self.active_modes) not in (3, 6):
            warnings.warn(
                f"{len(self.active_modes)} active modes; the reference experiments use 3 or 6",
                stacklevel=2,
            )
        if self.pre_emphasis is not None and any(g <= 0 for _, g in self.pre_emphasis):
            raise ValueError("pre_emphasis gains must be strictly positive")
        return self

    @property
    def sample_rate(self) -> float:
        return self.baud * self.samples_per_symbol

    def const(self) -> Constellation:
        return Constellation.by_name(self.constellation)

    def delay_symbols(self, mode: str) -> int:
        """Decorrelation delay of ``mode`` in whole symbols."""
        length = self.decorrelation_delays_m[MODE_ORDER.index(mode)]
        return int(round(length * self.group_index / SPEED_OF_LIGHT * self.baud))


@dataclass(frozen=True)
class TxReference:
    """Per-channel transmitted data, delay-adjusted to match the frame.

    ``symbols[c, n]`` is the symbol centred on sample ``n * sps`` of channel
    ``c``; ``bits[c]`` holds the corresponding labels, ``m`` bits per symbol.
    """

    symbols: np.ndarray
    bits: np.ndarray
    delays_symbols: np.ndarray
    labels: tuple[str, ...]
    constellation: Constellation

    @property
    def channels(self) -> int:
        return self.symbols.shape[0]

    def take(self, start: int, count: int) -> "TxReference":
        """Symbols ``start .. start+count-1`` with periodic wrap-around."""
        n = self.symbols.shape[1]
        idx = (start + np.arange(count)) % n
        m = self.constellation.m
        bidx = (idx[:, None] * m + np.arange(m)).ravel()
        return TxReference(
            self.symbols[:, idx], self.bits[:, bidx], self.delays_symbols, self.labels, self.constellation
        )

    def subset(self, channels: Sequence[int]) -> "TxReference":
        ch = list(channels)
        return TxReference(
            self.symbols[ch], self.bits[ch], self.delays_symbols[ch],
            tuple(self.labels[c] for c in ch), self.constellation,
        )


def _register_seed(seed: int, degree: int) -> int:
    return seed % ((1 << degree) - 1) + 1


def tributary_seed(base_seed: int, pol: int) -> int:
    """Seed of polarization ``pol`` (0 = X, 1 = Y) for a transmitter seed."""
    return int(np.random.SeedSequence([base_seed, 0x7E, pol]).generate_state(1)[0])


def build_tributary(cfg: TxConfig, trib_seed: int):
    """One RRC-shaped tributary.

    Returns
    -------
    frame : ComplexFrame
        Single channel at ``baud * sps``, unit mean power, periodic.
    symbols : ndarray
    bits : ndarray
    """
    c = cfg.const()
    bits = generate_prbs(cfg.prbs_degree, c.m * cfg.n_symbols, _register_seed(trib_seed, cfg.prbs_degree))
    symbols = map_symbols(bits, c)

    up = np.zeros(cfg.n_symbols * cfg.samples_per_symbol, dtype=complex)
    up[:: cfg.samples_per_symbol] = symbols
    frame = fir_filter(ComplexFrame(up, cfg.sample_rate), design_rrc(cfg.rrc), cyclic=True)
    frame = frame.replace(samples=frame.samples / np.sqrt(frame.power()[:, None]))
    if cfg.pre_emphasis is not None:
        frame = apply_pre_emphasis(frame, cfg.pre_emphasis)
    return frame, symbols, bits.astype(np.uint8)


def assemble_spatial_frame(cfg: TxConfig):
    """Multi-mode launch frame with ``2 * len(active_modes)`` channels.

    Channel ``2*i + p`` is polarization ``p`` of ``cfg.active_modes[i]``.
    The decorrelation delay is rounded to whole symbols so that the stored
    references stay symbol-aligned.
    """
    tribs = [build_tributary(cfg, tributary_seed(cfg.seed, pol)) for pol in (0, 1)]
    sps_ = cfg.samples_per_symbol
    m = cfg.const().m

    rows, syms, bits, delays, labels = [], [], [], [], []
    for mode in cfg.active_modes:
        d = cfg.delay_symbols(mode)
        for pol, (fr, s, b) in enumerate(tribs):
            rows.append(np.roll(fr.samples[0], d * sps_))
            syms.append(np.roll(s, d))
            bits.append(np.roll(b, d * m))
            delays.append(d)
            labels.append(f"{mode}{'XY'[pol]}")

    frame = ComplexFrame(np.array(rows), cfg.sample_rate)
    ref = TxReference(np.array(syms), np.array(bits), np.array(delays), tuple(labels), cfg.const())
    return frame, ref


def _response_on_grid(response, f: np.ndarray) -> np.ndarray:
    if callable(response):
        g = np.asarray(response(f), dtype=float)
    else:
        pts = np.asarray(response, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("response must be a callable or (freq, gain) pairs")
        order = np.argsort(pts[:, 0])
        g = np.interp(f, pts[order, 0], pts[order, 1])
    return np.broadcast_to(g, f.shape)


def apply_pre_emphasis(x: ComplexFrame, response: Callable | Sequence) -> ComplexFrame:
    """Shape the spectrum by a real positive gain curve, keeping each channel's energy.

    ``response`` is either a callable ``gain(f_hz)`` or ``(f_hz, gain)``
    breakpoints interpolated linearly and held constant outside.
    """
    f = np.fft.fftfreq(x.n, 1.0 / x.sample_rate)
    g = _response_on_grid(response, f)
    if np.any(~(g > 0)):
        raise ValueError("pre-emphasis response must be strictly positive")
    y = np.fft.ifft(np.fft.fft(x.samples, axis=1) * g, axis=1)
    e_in = np.sum(np.abs(x.samples) ** 2, axis=1)
    e_out = np.sum(np.abs(y) ** 2, axis=1)
    y *= np.sqrt(e_in / e_out)[:, None]
    return x.replace(samples=y)
