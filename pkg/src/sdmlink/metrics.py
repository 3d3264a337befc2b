"""
Figures of merit: GMI, FEC-thresholded net rate, MDL and crosstalk matrices.

Conventions
-----------
* MDL is the ratio of the largest to the smallest frequency-averaged
  eigenvalue of ``H^H H`` (squared singular values), in dB. The same
  statistic is used for synthesized channels and for equalizer-derived
  estimates.
* Spatial-mode GMI is the mean of the mode's two polarization streams.
* Crosstalk matrices are oriented like a channel: rows are received modes,
  columns transmitted modes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import brentq
from scipy.special import logsumexp

from .serialization import matrix_from_json, matrix_to_json
from .sigkit import MODE_GROUPS, Constellation, decide, map_symbols

XT_FLOOR_DB = -60.0


class AlignmentError(ValueError):
    """Received stream does not line up with the reference bits."""


class MdlError(ValueError):
    """Transfer matrix is rank deficient, MDL undefined."""


class FecModel(BaseModel):
    """Assumed FEC: threshold on normalized GMI plus a code rate."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    code_rate: float = Field(0.8402, gt=0, lt=1)
    ngmi_threshold: float = Field(0.8798, gt=0, le=1)

    @property
    def overhead_pct(self) -> float:
        return (1.0 / self.code_rate - 1.0) * 100.0


# ---------------------------------------------------------------------------
# GMI
# ---------------------------------------------------------------------------


def bit_llrs(rx: np.ndarray, c: Constellation, noise_var: float) -> np.ndarray:
    """Exact (log-sum-exp) bitwise LLRs ``log P(b=0)/P(b=1)`` under a Gaussian channel law.

    Returns an ``(n, m)`` array.
    """
    metric = -np.abs(rx[:, None] - c.points[None, :]) ** 2 / noise_var
    out = np.empty((rx.size, c.m))
    for i in range(c.m):
        zero = c.bit_labels[:, i] == 0
        out[:, i] = logsumexp(metric[:, zero], axis=1) - logsumexp(metric[:, ~zero], axis=1)
    return out


def compute_gmi(rx_symbols, ref_bits, c: Constellation, noise_var: float | None = None) -> float:
    """Memoryless AWGN-decoder GMI in bits/symbol.

    The noise variance is estimated from the data as the mean squared
    distance to the transmitted symbols unless given.

    Raises
    ------
    AlignmentError
        When the stream is clean (decision-directed SNR above 10 dB) but its
        hard decisions disagree with ``ref_bits`` on more than 40 % of bits.
    """
    rx = np.asarray(rx_symbols, dtype=complex).ravel()
    bits = np.asarray(ref_bits, dtype=np.int64).ravel()
    if bits.size != rx.size * c.m:
        raise ValueError(f"{rx.size} symbols need {rx.size * c.m} bits, got {bits.size}")
    tx = map_symbols(bits, c)
    bits = bits.reshape(-1, c.m)

    hard = c.bit_labels[decide(rx, c)]
    ber = np.mean(hard != bits)
    if ber > 0.4:
        dd_err = np.mean(np.abs(rx - c.points[decide(rx, c)]) ** 2) / np.mean(np.abs(rx) ** 2)
        if dd_err < 0.1:
            raise AlignmentError(f"hard-decision BER {ber:.3f} on a clean stream; references misaligned")

    if noise_var is None:
        noise_var = float(np.mean(np.abs(rx - tx) ** 2))
    noise_var = max(noise_var, 1e-30)
    llr = bit_llrs(rx, c, noise_var)
    sign = 1.0 - 2.0 * bits
    loss = np.logaddexp(0.0, -sign * llr).sum(axis=1) / np.log(2.0)
    return float(np.clip(c.m - loss.mean(), 0.0, c.m))


@dataclass(frozen=True)
class RateSummary:
    line_rate_gbps: float
    ngmi: float
    net_rate_gbps: float
    below_threshold: bool


def net_rate(gmi_per_mode: Sequence[float], baud: float, fec: FecModel, n_streams: int, m: int = 3) -> RateSummary:
    """Line rate, normalized GMI and post-FEC net rate.

    ``net_rate_gbps`` is 0 and ``below_threshold`` set when the mean NGMI
    misses the FEC threshold.
    """
    line = n_streams * baud * m / 1e9
    ngmi = float(np.mean(gmi_per_mode)) / m
    ok = ngmi >= fec.ngmi_threshold
    return RateSummary(line, ngmi, line * fec.code_rate if ok else 0.0, not ok)


# ---------------------------------------------------------------------------
# MDL
# ---------------------------------------------------------------------------


def mean_eigenvalues(H) -> np.ndarray:
    """Frequency-averaged, descending eigenvalues of ``H^H H``.

    ``H`` has shape ``(F, rows, cols)`` or ``(rows, cols)``.
    """
    H = np.asarray(H)
    if H.ndim == 2:
        H = H[None]
    if H.ndim != 3 or H.shape[0] < 1:
        raise ValueError("H must be (F, rows, cols) with at least one frequency")
    if H.shape[2] > H.shape[1]:
        raise ValueError(f"need cols <= rows, got {H.shape[1:]}")
    s = np.linalg.svd(H, compute_uv=False)
    return np.mean(s**2, axis=0)


def compute_mdl(H) -> float:
    """MDL in dB: ``10 log10(max/min)`` of the frequency-averaged ``H^H H`` eigenvalues."""
    lam = mean_eigenvalues(H)
    if not lam[-1] > lam[0] * 1e-13:
        raise MdlError(f"transfer matrix is rank deficient (eigenvalue ratio {lam[-1] / lam[0]:.3g})")
    return float(10 * np.log10(lam[0] / lam[-1]))


def taps_response(taps, nfft: int | None = None, band: float = 0.45, sps: int = 2):
    """Frequency response of a tap tensor restricted to the signal band.

    Parameters
    ----------
    taps : ndarray (out, in, L)
    band : float
        Keep ``|f| <= band * symbol_rate``.

    Returns
    -------
    freqs : ndarray
        In units of the symbol rate.
    W : ndarray (F, out, in)
    """
    taps = np.asarray(taps)
    L = taps.shape[-1]
    nfft = nfft or max(256, 1 << int(np.ceil(np.log2(L))))
    # centre tap at zero delay
    centered = np.roll(np.pad(taps, ((0, 0), (0, 0), (0, nfft - L))), -(L // 2), axis=-1)
    W = np.fft.fft(centered, axis=-1)
    f = np.fft.fftfreq(nfft) * sps
    keep = np.abs(f) <= band
    return f[keep], np.moveaxis(W[..., keep], -1, 0)


def _unshrink(w: np.ndarray, rho: float) -> np.ndarray:
    # invert w = s / (s^2 + rho) on the high-SNR branch (s^2 >= rho)
    return (1 + np.sqrt(np.clip(1 - 4 * w**2 * rho, 0.0, None))) / (2 * w)


def mmse_noise_ratio(w: np.ndarray, output_mse: float) -> float:
    """Noise-to-signal ratio consistent with MMSE taps and their output error.

    For a Wiener equalizer the singular values of the tap response are
    ``s / (s**2 + rho)`` and the error covariance has eigenvalues
    ``rho / (s**2 + rho)``. Given the tap singular values ``w`` and the
    measured mean output MSE (unit-energy symbols), solve for ``rho``.
    """
    rho_max = 1.0 / (4 * np.max(w) ** 2)

    def excess(rho):
        s = _unshrink(w, rho)
        return np.mean(rho / (s**2 + rho)) - output_mse

    if output_mse <= 0:
        return 0.0
    if excess(rho_max) <= 0:
        return rho_max
    return brentq(excess, 0.0, rho_max, xtol=1e-12 * rho_max)


def mdl_from_taps(taps, band: float = 0.45, sps: int = 2, output_mse: float | None = None) -> float:
    """MDL of the channel implied by converged equalizer taps.

    The equalizer approximates the channel inverse, so the channel estimate
    at each in-band frequency is the pseudo-inverse of the tap response.

    Parameters
    ----------
    output_mse : float, optional
        Mean squared error of the equalized symbols against the reference.
        LMS converges to the MMSE solution, whose regularization lifts the
        weak eigenvalues and biases the plain pseudo-inverse estimate low.
        When given, the singular values are mapped back through the MMSE
        shrinkage before the MDL is computed.
    """
    _, W = taps_response(taps, band=band, sps=sps)
    U, w, Vh = np.linalg.svd(W, full_matrices=False)
    if not np.all(w[:, -1] > w[:, 0] * 1e-12):
        raise MdlError("equalizer response is singular at some in-band frequency")
    if output_mse is None:
        s = 1.0 / w
    else:
        s = _unshrink(w, mmse_noise_ratio(w, output_mse))
    H = np.einsum("fji,fj,fkj->fik", Vh.conj(), s, U.conj())
    return compute_mdl(H)


# ---------------------------------------------------------------------------
# Crosstalk
# ---------------------------------------------------------------------------


def _group_ids(modes: Sequence[str], group_map) -> list[int]:
    return [group_map[m] for m in modes]


@dataclass(frozen=True)
class Crosstalk:
    """Linear transfer matrices; rows received modes, columns transmitted modes."""

    spatial: np.ndarray
    group: np.ndarray
    rx_modes: tuple[str, ...]
    tx_modes: tuple[str, ...]
    rx_groups: tuple[int, ...]
    tx_groups: tuple[int, ...]

    @staticmethod
    def to_db(a: np.ndarray) -> np.ndarray:
        mx = a.max()
        with np.errstate(divide="ignore"):
            out = 10 * np.log10(a / mx) if mx > 0 else np.full(a.shape, -np.inf)
        return np.maximum(out, XT_FLOOR_DB)

    @property
    def spatial_db(self) -> np.ndarray:
        return self.to_db(self.spatial)

    @property
    def group_db(self) -> np.ndarray:
        return self.to_db(self.group)


def crosstalk_matrices(
    taps,
    tx_modes: Sequence[str],
    rx_modes: Sequence[str],
    group_map=MODE_GROUPS,
) -> Crosstalk:
    """Polarization- and mode-group-averaged transfer matrices from taps.

    ``taps`` is ``(2*len(tx_modes), 2*len(rx_modes), L)`` as produced by the
    equalizer (outputs are transmitted streams). Entry ``(i, j)`` is
    ``(sum_l |tap(i, j, l)|)**2``; the four polarization combinations of a
    mode pair are averaged, then all mode pairs within a group pair.
    """
    taps = np.asarray(taps)
    M, N = len(tx_modes), len(rx_modes)
    if taps.shape[:2] != (2 * M, 2 * N):
        raise ValueError(f"taps shape {taps.shape[:2]} does not match {2 * M}x{2 * N} streams")
    e = np.sum(np.abs(taps), axis=-1) ** 2
    per_mode = e.reshape(M, 2, N, 2).mean(axis=(1, 3))  # (tx, rx)
    spatial = per_mode.T  # rows rx, cols tx

    rg = _group_ids(rx_modes, group_map)
    tg = _group_ids(tx_modes, group_map)
    rgu = tuple(sorted(set(rg)))
    tgu = tuple(sorted(set(tg)))
    group = np.empty((len(rgu), len(tgu)))
    for a, ga in enumerate(rgu):
        for b, gb in enumerate(tgu):
            rows = [i for i, g in enumerate(rg) if g == ga]
            cols = [j for j, g in enumerate(tg) if g == gb]
            group[a, b] = spatial[np.ix_(rows, cols)].mean()
    return Crosstalk(spatial, group, tuple(rx_modes), tuple(tx_modes), rgu, tgu)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

CSV_COLUMNS = (
    "seed", "power_dbm", "k_rx", "capture", "mode", "gmi", "ngmi",
    "line_rate_gbps", "net_rate_gbps", "below_threshold", "mdl_db", "snr_db", "status",
)


@dataclass
class MetricsReport:
    """Measured figures of merit for one (launch power, receiver subset, capture).

    ``capture`` is the capture index, or ``"mean"`` for an average.
    """

    power_dbm: float
    k_rx: int
    capture: int | str
    tx_modes: tuple[str, ...]
    gmi_per_stream: np.ndarray
    gmi_per_mode: np.ndarray
    ngmi: float
    line_rate_gbps: float
    net_rate_gbps: float
    below_threshold: bool
    mdl_db: float
    crosstalk: Crosstalk | None = None
    snr_db: float = float("nan")
    seed: int = 0
    n_captures: int = 1
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_streams(cls, gmi_per_stream, tx_modes, baud, fec: FecModel, m=3, **kw) -> "MetricsReport":
        g = np.asarray(gmi_per_stream, dtype=float)
        per_mode = g.reshape(-1, 2).mean(axis=1)
        r = net_rate(per_mode, baud, fec, n_streams=g.size, m=m)
        return cls(
            tx_modes=tuple(tx_modes), gmi_per_stream=g, gmi_per_mode=per_mode, ngmi=r.ngmi,
            line_rate_gbps=r.line_rate_gbps, net_rate_gbps=r.net_rate_gbps,
            below_threshold=r.below_threshold, **kw,
        )

    def config_key(self):
        return (self.power_dbm, self.k_rx, self.tx_modes, self.gmi_per_stream.size, self.seed)

    # -- structured text ----------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "power_dbm": self.power_dbm, "k_rx": self.k_rx, "capture": self.capture,
            "tx_modes": list(self.tx_modes), "gmi_per_stream": self.gmi_per_stream.tolist(),
            "gmi_per_mode": self.gmi_per_mode.tolist(), "ngmi": self.ngmi,
            "line_rate_gbps": self.line_rate_gbps, "net_rate_gbps": self.net_rate_gbps,
            "below_threshold": self.below_threshold, "mdl_db": self.mdl_db,
            "snr_db": self.snr_db, "seed": self.seed, "n_captures": self.n_captures,
            "extra": self.extra,
        }
        if self.crosstalk is not None:
            x = self.crosstalk
            d["crosstalk"] = {
                "rx_modes": list(x.rx_modes), "tx_modes": list(x.tx_modes),
                "rx_groups": list(x.rx_groups), "tx_groups": list(x.tx_groups),
                "spatial": matrix_to_json(x.spatial), "group": matrix_to_json(x.group),
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        xt = None
        if d.get("crosstalk"):
            x = d["crosstalk"]
            xt = Crosstalk(
                matrix_from_json(x["spatial"]).real, matrix_from_json(x["group"]).real,
                tuple(x["rx_modes"]), tuple(x["tx_modes"]), tuple(x["rx_groups"]), tuple(x["tx_groups"]),
            )
        return cls(
            power_dbm=d["power_dbm"], k_rx=d["k_rx"], capture=d["capture"], tx_modes=tuple(d["tx_modes"]),
            gmi_per_stream=np.array(d["gmi_per_stream"]), gmi_per_mode=np.array(d["gmi_per_mode"]),
            ngmi=d["ngmi"], line_rate_gbps=d["line_rate_gbps"], net_rate_gbps=d["net_rate_gbps"],
            below_threshold=d["below_threshold"], mdl_db=d["mdl_db"], crosstalk=xt,
            snr_db=d.get("snr_db", float("nan")), seed=d.get("seed", 0),
            n_captures=d.get("n_captures", 1), extra=d.get("extra", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def csv_rows(self, status: str = "ok") -> list[dict]:
        """One flat row per transmitted spatial mode."""
        return [
            {
                "seed": self.seed, "power_dbm": self.power_dbm, "k_rx": self.k_rx,
                "capture": self.capture, "mode": mode, "gmi": float(g), "ngmi": self.ngmi,
                "line_rate_gbps": self.line_rate_gbps, "net_rate_gbps": self.net_rate_gbps,
                "below_threshold": int(self.below_threshold), "mdl_db": self.mdl_db,
                "snr_db": self.snr_db, "status": status,
            }
            for mode, g in zip(self.tx_modes, self.gmi_per_mode)
        ]


def rows_to_csv(rows: Iterable[dict], columns=CSV_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def average_captures(reports: Sequence[MetricsReport], fec: FecModel | None = None, baud: float | None = None,
                     m: int = 3) -> MetricsReport:
    """Average reports of repeated captures of one operating point.

    GMI, NGMI and MDL are averaged arithmetically; crosstalk matrices in the
    linear domain. The net rate is re-derived from the mean NGMI when ``fec``
    and ``baud`` are given, otherwise the mean net rate is reported.
    """
    if not reports:
        raise ValueError("no reports to average")
    keys = {r.config_key() for r in reports}
    if len(keys) != 1:
        raise ValueError(f"cannot average reports from different configurations: {sorted(map(str, keys))}")
    r0 = reports[0]
    gs = np.mean([r.gmi_per_stream for r in reports], axis=0)
    gm = np.mean([r.gmi_per_mode for r in reports], axis=0)
    ngmi = float(np.mean([r.ngmi for r in reports]))
    if fec is not None and baud is not None:
        rate = net_rate(gm, baud, fec, gs.size, m)
        net, below = rate.net_rate_gbps, rate.below_threshold
    else:
        net = float(np.mean([r.net_rate_gbps for r in reports]))
        below = all(r.below_threshold for r in reports)
    xt = None
    if all(r.crosstalk is not None for r in reports):
        x0 = r0.crosstalk
        xt = Crosstalk(
            np.mean([r.crosstalk.spatial for r in reports], axis=0),
            np.mean([r.crosstalk.group for r in reports], axis=0),
            x0.rx_modes, x0.tx_modes, x0.rx_groups, x0.tx_groups,
        )
    return MetricsReport(
        power_dbm=r0.power_dbm, k_rx=r0.k_rx, capture="mean", tx_modes=r0.tx_modes,
        gmi_per_stream=gs, gmi_per_mode=gm, ngmi=ngmi, line_rate_gbps=r0.line_rate_gbps,
        net_rate_gbps=net, below_threshold=below,
        mdl_db=float(np.mean([r.mdl_db for r in reports])), crosstalk=xt,
        snr_db=float(np.mean([r.snr_db for r in reports])), seed=r0.seed,
        n_captures=sum(r.n_captures for r in reports),
    )


__all__ = [
    "AlignmentError", "Crosstalk", "FecModel", "MdlError", "MetricsReport", "RateSummary",
    "average_captures", "bit_llrs", "compute_gmi", "compute_mdl", "crosstalk_matrices",
    "mdl_from_taps", "mean_eigenvalues", "net_rate", "rows_to_csv", "taps_response",
]
