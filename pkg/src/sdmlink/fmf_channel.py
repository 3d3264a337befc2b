"""
Linear model of the 130 km multi-mode link.

The link is a cascade of ``n_sections`` identical-length sections. Each
section applies, in order,

1. a random unitary: Haar mixing inside every mode group (both
   polarizations included) followed by a weak Hermitian-generated coupling
   between adjacent groups, with per-section leakage ``inter_group_xt_db``;
2. per-mode gain offsets ``10**(alpha * g / 20)`` with ``g ~ N(0, 1)`` fixed
   by the seed; the scalar ``alpha`` is searched so the composite response
   reaches ``target_mdl_db``;
3. per-group delay (mode-group delay relative to the middle of the spread).

Chromatic dispersion is common to all modes and applied once. The composite
response is normalized to unit mean power gain, so propagation loss lives
entirely in the noise model (:func:`add_noise`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.optimize import brentq

from . import metrics
from .serialization import matrix_from_json, matrix_to_json
from .sigkit import MODE_GROUPS, MODE_ORDER, ComplexFrame

PLANCK = 6.62607015e-34


class LinkConfig(BaseModel):
    """Parametric description of the fiber link and its noise."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_modes_link: int = Field(6, ge=1, le=len(MODE_ORDER))
    n_sections: int = Field(100, ge=1)
    target_mdl_db: float = Field(11.0, ge=0)
    mdl_tolerance_db: float = Field(0.1, gt=0)
    mode_group_map: dict[str, int] = Field(default_factory=lambda: dict(MODE_GROUPS))
    inter_group_xt_db: float = -12.0
    # differential group delay per mode group (index 0 = group 1)
    dmgd_ps_per_km: tuple[float, ...] = (0.0, 1.0, 2.0)
    cd_ps2_per_km: float = 20.0
    length_km: float = Field(130.0, gt=0)
    span_loss_db: float = Field(32.0, ge=0)
    amp_noise_figure_db: float = Field(5.0, ge=0)
    carrier_hz: float = Field(193.4e12, gt=0)
    snr_ceiling_db: Optional[float] = 20.0
    nl_threshold_dbm: Optional[float] = 16.0
    n_freq: int = Field(256, ge=1)
    grid_halfwidth_hz: float = Field(15e9, ge=0)
    seed: int = Field(2020, ge=0)

    @field_validator("inter_group_xt_db")
    @classmethod
    def _xt(cls, v):
        if v > 0:
            raise ValueError("inter_group_xt_db must be <= 0 dB")
        return v

    @model_validator(mode="after")
    def _groups(self):
        modes = MODE_ORDER[: self.n_modes_link]
        missing = [m for m in modes if m not in self.mode_group_map]
        if missing:
            raise ValueError(f"mode_group_map lacks {missing}")
        n_groups = max(self.mode_group_map[m] for m in modes)
        if len(self.dmgd_ps_per_km) < n_groups:
            raise ValueError(f"dmgd_ps_per_km needs {n_groups} entries, got {len(self.dmgd_ps_per_km)}")
        return self

    @property
    def modes(self) -> tuple[str, ...]:
        return MODE_ORDER[: self.n_modes_link]

    @property
    def dim(self) -> int:
        return 2 * self.n_modes_link

    def tributary_groups(self) -> np.ndarray:
        return np.repeat([self.mode_group_map[m] for m in self.modes], 2)


@dataclass
class ChannelRealization:
    """Frozen channel: section matrices, delays and its response on a grid.

    Attributes
    ----------
    sections : ndarray (S, D, D)
        Gain-times-mixing matrix of each section (``D = 2 * n_modes``).
    section_delays_s : ndarray (D,)
        Delay each tributary accrues per section.
    beta2_l_s2 : float
        Accumulated GVD ``beta2 * L`` in s^2.
    scale : float
        Amplitude normalization applied after the cascade.
    grid_freqs, H_grid : ndarray
        Composite response ``H(f)`` (rows: outputs) on the calibration grid.
    """

    sections: np.ndarray
    section_delays_s: np.ndarray
    beta2_l_s2: float
    scale: float
    grid_freqs: np.ndarray
    H_grid: np.ndarray
    gain_alpha: float = 0.0
    mdl_db: float = 0.0
    labels: tuple[str, ...] = field(default_factory=tuple)

    @property
    def dim(self) -> int:
        return self.sections.shape[1]

    def response(self, freqs) -> np.ndarray:
        """Composite ``H(f)`` of shape ``(F, D, D)``."""
        return _cascade(self.sections, self.section_delays_s, np.asarray(freqs, float),
                        self.beta2_l_s2) * self.scale

    # -- structured text ----------------------------------------------------

    def to_json(self) -> str:
        return json.dumps({
            "format": "sdmlink-channel-v1",
            "labels": list(self.labels),
            "sections": matrix_to_json(self.sections),
            "section_delays_s": self.section_delays_s.tolist(),
            "beta2_l_s2": self.beta2_l_s2,
            "scale": self.scale,
            "gain_alpha": self.gain_alpha,
            "mdl_db": self.mdl_db,
            "grid_freqs": self.grid_freqs.tolist(),
            "H_grid": matrix_to_json(self.H_grid),
        }, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ChannelRealization":
        d = json.loads(text)
        return cls(
            sections=matrix_from_json(d["sections"]),
            section_delays_s=np.asarray(d["section_delays_s"]),
            beta2_l_s2=d["beta2_l_s2"], scale=d["scale"],
            grid_freqs=np.asarray(d["grid_freqs"]), H_grid=matrix_from_json(d["H_grid"]),
            gain_alpha=d["gain_alpha"], mdl_db=d["mdl_db"], labels=tuple(d["labels"]),
        )


class ChannelSynthesisError(RuntimeError):
    pass


def _cascade(sections, delays, freqs, beta2_l):
    D = sections.shape[1]
    H = np.broadcast_to(np.eye(D, dtype=complex), (freqs.size, D, D)).copy()
    phase = np.exp(-2j * np.pi * freqs[:, None] * delays[None, :])  # (F, D)
    for M in sections:
        H = phase[:, :, None] * (M @ H)
    w = 2 * np.pi * freqs
    return H * np.exp(0.5j * beta2_l * w**2)[:, None, None]


def _haar(rng, n):
    z = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diagonal(r)
    return q * (d / np.abs(d))


def _draw_sections(cfg: LinkConfig, rng):
    """Unitary mixing matrices and unscaled gain offsets for every section."""
    D = cfg.dim
    groups = cfg.tributary_groups()
    gids = sorted(set(groups.tolist()))
    eps = 0.0 if not np.isfinite(cfg.inter_group_xt_db) else 10 ** (cfg.inter_group_xt_db / 20)

    unitaries = np.empty((cfg.n_sections, D, D), dtype=complex)
    offsets = rng.standard_normal((cfg.n_sections, cfg.n_modes_link))
    for k in range(cfg.n_sections):
        B = np.zeros((D, D), dtype=complex)
        for g in gids:
            idx = np.flatnonzero(groups == g)
            B[np.ix_(idx, idx)] = _haar(rng, idx.size)
        X = np.zeros((D, D), dtype=complex)
        for g in gids[:-1]:
            a = np.flatnonzero(groups == g)
            b = np.flatnonzero(groups == g + 1)
            blk = (rng.standard_normal((b.size, a.size)) + 1j * rng.standard_normal((b.size, a.size))) / np.sqrt(2)
            # unit expected leakage from each tributary of either group
            blk /= np.sqrt(np.sqrt(a.size * b.size))
            X[np.ix_(b, a)] = blk
            X[np.ix_(a, b)] = blk.conj().T
        w, V = np.linalg.eigh(X)
        C = (V * np.exp(1j * eps * w)) @ V.conj().T
        unitaries[k] = C @ B
    return unitaries, offsets


def _gains(offsets, alpha):
    g = 10 ** (alpha * offsets / 20)
    return np.repeat(g, 2, axis=1)  # same gain for both polarizations of a mode


def synthesize_channel(cfg: LinkConfig) -> ChannelRealization:
    """Draw a channel realization whose MDL on the calibration grid equals the target.

    Raises
    ------
    ChannelSynthesisError
        When no gain scaling within the search bounds reaches the target.
    """
    rng = np.random.default_rng(cfg.seed)
    unitaries, offsets = _draw_sections(cfg, rng)

    groups = cfg.tributary_groups()
    dmgd = np.array([cfg.dmgd_ps_per_km[g - 1] for g in groups]) * 1e-12  # s/km
    dmgd = dmgd - 0.5 * (dmgd.max() + dmgd.min())
    delays = dmgd * cfg.length_km / cfg.n_sections
    # anomalous dispersion: beta2 = -cd
    beta2_l = -cfg.cd_ps2_per_km * 1e-24 * cfg.length_km
    freqs = np.linspace(-cfg.grid_halfwidth_hz, cfg.grid_halfwidth_hz, cfg.n_freq) if cfg.n_freq > 1 \
        else np.zeros(1)

    def build(alpha):
        return _gains(offsets, alpha)[:, :, None] * unitaries

    def mdl_at(alpha):
        return metrics.compute_mdl(_cascade(build(alpha), delays, freqs, 0.0))

    target = cfg.target_mdl_db
    alpha = 0.0
    # below the tolerance the lossless draw already meets the target
    if target > min(cfg.mdl_tolerance_db, 1e-6):
        hi, alpha_max = 0.25, 64.0
        while mdl_at(hi) < target:
            hi *= 2
            if hi > alpha_max:
                raise ChannelSynthesisError(
                    f"target MDL {target} dB unreachable; reached {mdl_at(alpha_max):.2f} dB at alpha={alpha_max}"
                )
        alpha = brentq(lambda a: mdl_at(a) - target, 0.0, hi, xtol=1e-10, rtol=1e-10)

    sections = build(alpha)
    H = _cascade(sections, delays, freqs, beta2_l)
    lam = metrics.mean_eigenvalues(H)
    scale = 1.0 / np.sqrt(lam.mean())
    H = H * scale
    achieved = metrics.compute_mdl(H)
    if abs(achieved - target) > cfg.mdl_tolerance_db:
        raise ChannelSynthesisError(f"MDL calibration missed: target {target} dB, achieved {achieved:.3f} dB")

    labels = tuple(f"{m}{p}" for m in cfg.modes for p in "XY")
    return ChannelRealization(sections, delays, beta2_l, scale, freqs, H, alpha, achieved, labels)


def apply_channel(x: ComplexFrame, ch: ChannelRealization, pad_modes: int = 0) -> ComplexFrame:
    """Propagate a frame through the channel (circular, frequency domain).

    The input's channels are the first ``x.channels`` link tributaries; the
    trailing ``pad_modes`` spatial modes are launched dark.
    """
    D = ch.dim
    if x.channels + 2 * pad_modes != D:
        raise ValueError(f"{x.channels} channels + 2*{pad_modes} padding != link dimension {D}")
    X = np.zeros((D, x.n), dtype=complex)
    X[: x.channels] = np.fft.fft(x.samples, axis=1)
    f = np.fft.fftfreq(x.n, 1.0 / x.sample_rate)
    phase = np.exp(-2j * np.pi * ch.section_delays_s[:, None] * f[None, :])
    for M in ch.sections:
        X = M @ X
        X *= phase
    w = 2 * np.pi * f
    X *= np.exp(0.5j * ch.beta2_l_s2 * w**2)[None, :] * ch.scale
    return x.replace(samples=np.fft.ifft(X, axis=1))


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------


def effective_snr_db(launch_power_dbm: float, cfg: LinkConfig, n_launched: int, baud: float) -> float:
    """Per-tributary SNR (signal power over noise in a ``baud``-wide band).

    Single-amplifier ASE limit ``P_rx / (NF h nu baud)``, a nonlinear term
    growing as ``(P / P_nl)**2`` relative to ASE, and a transceiver ceiling.
    """
    p_trib_mw = 10 ** ((launch_power_dbm - cfg.span_loss_db) / 10) / n_launched
    n_ase_mw = 10 ** (cfg.amp_noise_figure_db / 10) * PLANCK * cfg.carrier_hz * baud * 1e3
    inv = n_ase_mw / p_trib_mw
    if cfg.nl_threshold_dbm is not None:
        inv *= 1 + 10 ** ((launch_power_dbm - cfg.nl_threshold_dbm) / 5)
    if cfg.snr_ceiling_db is not None:
        inv += 10 ** (-cfg.snr_ceiling_db / 10)
    return float(-10 * np.log10(inv))


def add_noise(
    x: ComplexFrame,
    launch_power_dbm: float,
    cfg: LinkConfig,
    *,
    baud: float,
    n_launched: int | None = None,
    noise_bandwidth_hz: float | None = None,
    seed: int | np.random.SeedSequence = 0,
) -> ComplexFrame:
    """Add circular Gaussian noise for a given total launch power.

    The reference signal power is the frame's total power divided by
    ``n_launched`` (the number of lit tributaries). Noise is white over
    ``noise_bandwidth_hz`` centred on the carrier (full sample rate if
    None), scaled so the in-band SNR over ``baud`` equals
    :func:`effective_snr_db`.
    """
    n_launched = n_launched or x.channels
    snr = 10 ** (effective_snr_db(launch_power_dbm, cfg, n_launched, baud) / 10)
    p_ref = np.sum(x.power()) / n_launched
    rng = np.random.default_rng(seed)
    w = (rng.standard_normal(x.samples.shape) + 1j * rng.standard_normal(x.samples.shape)) / np.sqrt(2)

    if noise_bandwidth_hz is None or noise_bandwidth_hz >= x.sample_rate:
        bw = x.sample_rate
    else:
        f = np.fft.fftfreq(x.n, 1.0 / x.sample_rate)
        mask = np.abs(f) <= noise_bandwidth_hz / 2
        w = np.fft.ifft(np.fft.fft(w, axis=1) * mask, axis=1) * np.sqrt(x.n / mask.sum())
        bw = noise_bandwidth_hz
    var = p_ref / snr * bw / baud
    return x.replace(samples=x.samples + np.sqrt(var) * w)
