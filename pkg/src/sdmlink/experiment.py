"""
Experiment orchestration: launch-power sweeps over captures and receiver subsets.

The channel is synthesized and applied once. Each capture is a window of
the periodic received field sampled at the ADC instants; each
(capture, launch power) work unit adds its own noise, runs the KK front
end once and then equalizes every receiver subset ``k``, so the subsets
see identical noise.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import metrics
from .config import ExperimentSpec, derive_seed, power_key
from .fmf_channel import ChannelRealization, add_noise, apply_channel, effective_snr_db, synthesize_channel
from .kk_rx import adc_capture, adc_ratio, photodetect, restore_and_reconstruct
from .metrics import MetricsReport
from .mimo_dsp import (
    EqualizerState,
    RxSelection,
    align_timing,
    compensate_dispersion,
    estimate_frequency_offset,
    mimo_equalize,
    remove_frequency_offset,
    select_receivers,
    shift_samples,
    to_symbol_grid,
)
from .sigkit import ComplexFrame, fractional_delay, frequency_shift
from .txchain import TxReference, assemble_spatial_frame

log = logging.getLogger(__name__)

RESULTS_CSV = "results.csv"
REPORTS_JSON = "reports.json"
CONFIG_JSON = "config.resolved.json"
FAILURES_JSON = "failures.json"


class StageError(RuntimeError):
    """A pipeline stage failed for one operating point."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class Failure:
    power_dbm: float
    k_rx: int
    capture: int
    stage: str
    message: str

    def to_dict(self) -> dict:
        return {"power_dbm": self.power_dbm, "k_rx": self.k_rx, "capture": self.capture,
                "stage": self.stage, "message": self.message}


@dataclass
class LinkSetup:
    """Everything shared by all work units of a run."""

    spec: ExperimentSpec
    reference: TxReference
    channel: ChannelRealization
    received: ComplexFrame  # noiseless, at the transmitter rate, all link tributaries


@dataclass
class Capture:
    index: int
    field: ComplexFrame  # noiseless, ADC rate
    reference: TxReference  # symbol s of the capture sits at 2 sps sample 2 s
    start_symbol: int


@dataclass
class ResultSet:
    spec: ExperimentSpec
    reports: list[MetricsReport] = field(default_factory=list)
    averages: list[MetricsReport] = field(default_factory=list)
    failures: list[Failure] = field(default_factory=list)
    taps: dict = field(default_factory=dict)
    channel: Optional[ChannelRealization] = None

    # -- tables -------------------------------------------------------------

    def csv_rows(self) -> list[dict]:
        rows = []
        failed = {(f.power_dbm, f.k_rx, f.capture): f for f in self.failures}
        for p in self.spec.sweep:
            for k in self.spec.subsets:
                for c in range(self.spec.n_captures):
                    rep = self._find(self.reports, p, k, c)
                    if rep is not None:
                        rows += rep.csv_rows()
                    else:
                        rows += _failed_rows(self.spec, p, k, c, failed.get((p, k, c)))
                avg = self._find(self.averages, p, k, "mean")
                if avg is not None:
                    rows += avg.csv_rows()
                else:
                    rows += _failed_rows(self.spec, p, k, "mean", None)
        return rows

    def csv_text(self) -> str:
        return metrics.rows_to_csv(self.csv_rows())

    @staticmethod
    def _find(reports, p, k, c):
        for r in reports:
            if r.power_dbm == p and r.k_rx == k and r.capture == c:
                return r
        return None

    def average(self, p: float, k: int) -> Optional[MetricsReport]:
        return self._find(self.averages, p, k, "mean")

    # -- persistence --------------------------------------------------------

    def write(self, out_dir, dump_matrices: bool = False) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / RESULTS_CSV).write_text(self.csv_text())
        payload = {
            "format": "sdmlink-results-v1",
            "reports": [r.to_dict() for r in self.reports],
            "averages": [r.to_dict() for r in self.averages],
            "failures": [f.to_dict() for f in self.failures],
        }
        (out / REPORTS_JSON).write_text(json.dumps(payload, indent=1, sort_keys=True))
        (out / CONFIG_JSON).write_text(self.spec.to_json())
        (out / FAILURES_JSON).write_text(json.dumps([f.to_dict() for f in self.failures], indent=1))
        if dump_matrices:
            mdir = out / "matrices"
            mdir.mkdir(exist_ok=True)
            if self.channel is not None:
                (mdir / "channel.json").write_text(self.channel.to_json())
            for (p, k, c), st in sorted(self.taps.items()):
                name = f"taps_p{p:+.2f}dBm_k{k}_c{c}.json"
                (mdir / name).write_text(json.dumps(st.to_json_dict(), sort_keys=True))
        return out


def _failed_rows(spec: ExperimentSpec, p, k, c, failure: Optional[Failure]) -> list[dict]:
    status = f"failed:{failure.stage}" if failure is not None else "failed"
    nan = float("nan")
    return [
        {"seed": spec.seeds.base, "power_dbm": p, "k_rx": k, "capture": c, "mode": mode, "gmi": nan,
         "ngmi": nan, "line_rate_gbps": nan, "net_rate_gbps": nan, "below_threshold": 1, "mdl_db": nan,
         "snr_db": nan, "status": status}
        for mode in spec.tx.active_modes
    ]


def load_results(path) -> ResultSet:
    """Read a results directory written by :meth:`ResultSet.write`."""
    from .config import ExperimentSpec as _Spec

    d = Path(path)
    spec = _Spec.model_validate_json((d / CONFIG_JSON).read_text())
    raw = json.loads((d / REPORTS_JSON).read_text())
    return ResultSet(
        spec,
        [MetricsReport.from_dict(r) for r in raw["reports"]],
        [MetricsReport.from_dict(r) for r in raw["averages"]],
        [Failure(**f) for f in raw["failures"]],
    )


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def prepare_link(spec: ExperimentSpec) -> LinkSetup:
    """Transmit and propagate once (noiseless)."""
    frame, ref = assemble_spatial_frame(spec.tx)
    ch = synthesize_channel(spec.link)
    pad = spec.link.n_modes_link - spec.n_tx_modes
    return LinkSetup(spec, ref, ch, apply_channel(frame, ch, pad_modes=pad))


def take_capture(setup: LinkSetup, index: int) -> Capture:
    """Noiseless ADC capture ``index`` with its carrier and timing offsets."""
    spec = setup.spec
    n_sym = spec.tx.n_symbols
    rng = np.random.default_rng(derive_seed(spec.seeds.base, "capture", index))
    start = int(rng.integers(n_sym))
    first = start - spec.capture.guard_symbols
    count = spec.capture_symbols
    r = adc_ratio(spec.tx.sample_rate, spec.kk.adc_rate_hz)
    n_adc = int(np.ceil(count * spec.tx.samples_per_symbol * r))
    x = adc_capture(setup.received, spec.kk, first * spec.tx.samples_per_symbol, n_adc)
    if spec.capture.timing_offset_samples:
        x = fractional_delay(x, spec.capture.timing_offset_samples)
    if spec.capture.carrier_offset_hz:
        x = frequency_shift(x, spec.capture.carrier_offset_hz)
    return Capture(index, x, setup.reference.take(first % n_sym, count), start)


def _stage(name: str, fn: Callable, *args, **kw):
    try:
        return fn(*args, **kw)
    except Exception as e:  # noqa: BLE001 - any stage error is recorded per point
        raise StageError(name, e) from e


def receive(spec: ExperimentSpec, setup: LinkSetup, cap: Capture, power_dbm: float):
    """Noise, KK front end, rate conversion, CD, carrier and timing recovery.

    Returns the conditioned 2 sps frame of all link tributaries and a dict
    of diagnostics.
    """
    seed = derive_seed(spec.seeds.base, "noise", cap.index, power_key(power_dbm))
    noisy = add_noise(cap.field, power_dbm, spec.link, baud=spec.tx.baud, n_launched=2 * spec.n_tx_modes,
                      noise_bandwidth_hz=spec.tx.baud * (1 + spec.tx.rrc.roll_off), seed=seed)
    pc = _stage("kk", photodetect, noisy, spec.kk)
    field_, biases = _stage("kk", restore_and_reconstruct, pc, spec.kk)
    y = _stage("frontend", to_symbol_grid, field_, spec.tx.baud, spec.tx.rrc)
    y = compensate_dispersion(y, setup.channel.beta2_l_s2)
    ref = cap.reference.symbols[: 2 * spec.n_tx_modes]
    g = spec.capture.guard_symbols
    lag = _stage("frontend", align_timing, y, ref, spec.tx.baud, start_symbol=g, max_lag_symbols=16,
                 n_symbols=2**12)
    y = shift_samples(y, lag)
    foe = _stage("frontend", estimate_frequency_offset, y, ref, spec.tx.baud, start_symbol=g)
    if not foe.reliable:
        raise StageError("frontend", RuntimeError(f"carrier-offset peak only {foe.peak_ratio_db:.1f} dB"))
    y = remove_frequency_offset(y, foe.hz)
    diag = {
        "lag_samples": int(lag), "carrier_offset_hz": foe.hz,
        "bias_rel": (biases / pc.nominal_dc).tolist(),
    }
    return y, diag


def equalize_subset(spec: ExperimentSpec, y: ComplexFrame, cap: Capture, k: int, power_dbm: float, diag: dict):
    """Equalize the first ``k`` received modes and measure; returns (report, state)."""
    M = spec.n_tx_modes
    sel = RxSelection(transmitted_modes=M, received_modes=k)
    ref = cap.reference.subset(range(2 * M))
    c = spec.tx.const()
    st = EqualizerState.initial(2 * M, 2 * k, spec.eq)
    res = _stage("equalizer", mimo_equalize, select_receivers(y, sel), ref.symbols, st, c)

    g = spec.capture.guard_symbols
    lo = g + spec.eq.n_train_symbols
    keep = (res.index >= lo) & (res.index < lo + spec.capture.measured_symbols)
    idx = res.index[keep]
    z = res.symbols[:, keep]
    bidx = (idx[:, None] * c.m + np.arange(c.m)).ravel()

    def measure():
        gmis = [metrics.compute_gmi(z[o], ref.bits[o][bidx], c) for o in range(2 * M)]
        mse = float(np.mean(np.abs(z - ref.symbols[:, idx]) ** 2))
        mdl = metrics.mdl_from_taps(res.state.taps, output_mse=mse)
        xt = metrics.crosstalk_matrices(res.state.taps, sel.tx_modes, sel.rx_modes)
        return gmis, mse, mdl, xt

    gmis, mse, mdl, xt = _stage("metrics", measure)
    report = MetricsReport.from_streams(
        gmis, sel.tx_modes, spec.tx.baud, spec.fec, m=c.m,
        power_dbm=power_dbm, k_rx=k, capture=cap.index, mdl_db=mdl, crosstalk=xt,
        snr_db=effective_snr_db(power_dbm, spec.link, 2 * M, spec.tx.baud), seed=spec.seeds.base,
        extra={**diag, "output_mse": mse, "n_symbols": int(idx.size)},
    )
    return report, res.state


def run_point(spec: ExperimentSpec, setup: LinkSetup, cap: Capture, power_dbm: float):
    """One (capture, power) work unit over all receiver subsets."""
    reports, failures, states = [], [], {}
    try:
        y, diag = receive(spec, setup, cap, power_dbm)
    except StageError as e:
        return [], [Failure(power_dbm, k, cap.index, e.stage, str(e)) for k in spec.subsets], {}
    for k in spec.subsets:
        try:
            rep, st = equalize_subset(spec, y, cap, k, power_dbm, diag)
        except StageError as e:
            failures.append(Failure(power_dbm, k, cap.index, e.stage, str(e)))
            continue
        reports.append(rep)
        states[(power_dbm, k, cap.index)] = st
    return reports, failures, states


def run_experiment(spec: ExperimentSpec, *, jobs: int = 1, keep_taps: bool = False,
                   progress: Optional[Callable[[str], None]] = None) -> ResultSet:
    """Run every (launch power, receiver subset, capture) of ``spec``.

    Stage errors are recorded per point and the sweep continues. Results do
    not depend on ``jobs``.
    """
    spec = spec.resolved()
    setup = prepare_link(spec)
    caps = [take_capture(setup, c) for c in range(spec.n_captures)]
    units = [(c, p) for c in range(spec.n_captures) for p in spec.sweep]
    lock = threading.Lock()
    done = [0]

    def work(unit):
        c, p = unit
        out = run_point(spec, setup, caps[c], p)
        with lock:
            done[0] += 1
            if progress:
                progress(f"[{done[0]}/{len(units)}] capture {c} at {p:+.1f} dBm: "
                         f"{len(out[0])} ok, {len(out[1])} failed")
        return out

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(work, units))
    else:
        outs = [work(u) for u in units]

    rs = ResultSet(spec, channel=setup.channel)
    for reps, fails, states in outs:
        rs.reports += reps
        rs.failures += fails
        if keep_taps:
            rs.taps.update(states)
    order = {p: i for i, p in enumerate(spec.sweep)}
    rs.reports.sort(key=lambda r: (order[r.power_dbm], r.k_rx, r.capture))
    rs.failures.sort(key=lambda f: (order[f.power_dbm], f.k_rx, f.capture))
    for p in spec.sweep:
        for k in spec.subsets:
            group = [r for r in rs.reports if r.power_dbm == p and r.k_rx == k]
            if group:
                rs.averages.append(metrics.average_captures(group, spec.fec, spec.tx.baud, spec.tx.const().m))
    return rs


__all__ = [
    "Capture", "Failure", "LinkSetup", "ResultSet", "StageError", "equalize_subset", "load_results",
    "prepare_link", "receive", "run_experiment", "run_point", "take_capture",
]
