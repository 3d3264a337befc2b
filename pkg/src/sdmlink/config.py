"""
Experiment configuration: schema, presets and validation.

A config file is TOML (or JSON, chosen by suffix). Its keys override a
preset, named by the optional top-level ``preset`` key, which itself
overrides the library defaults. An empty file therefore yields the
``paper6`` experiment.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .fmf_channel import LinkConfig
from .kk_rx import KkConfig, adc_ratio
from .metrics import FecModel
from .mimo_dsp import EqualizerConfig
from .sigkit import MODE_ORDER
from .txchain import TxConfig


class ConfigError(ValueError):
    """Invalid experiment configuration; ``errors`` lists every violation."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


class CaptureConfig(BaseModel):
    """Layout and impairments of one capture.

    A capture holds ``guard_symbols`` on each side of the equalizer's
    training prefix plus ``measured_symbols`` evaluated ones.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    measured_symbols: int = Field(40_000, ge=1000)
    guard_symbols: int = Field(256, ge=0)
    # residual carrier offset between signal and LO, compensated downstream
    carrier_offset_hz: float = 150e6
    # extra delay of every receiver, in ADC samples (may be fractional)
    timing_offset_samples: float = 0.0


class SeedConfig(BaseModel):
    """Base seed; every random axis derives its own stream from it.

    The stream for an axis is ``SeedSequence([base, axis_id, *indices])``,
    so adding captures or powers leaves existing points untouched.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    base: int = Field(1, ge=0)
    rule: Literal["seedsequence"] = "seedsequence"


AXIS_IDS = {"tx": 1, "link": 2, "capture": 3, "noise": 4}


def derive_seed(base: int, axis: str, *indices: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([base, AXIS_IDS[axis], *indices])


def derive_int(base: int, axis: str, *indices: int) -> int:
    return int(derive_seed(base, axis, *indices).generate_state(1)[0])


def power_key(p_dbm: float) -> int:
    """Nonnegative integer identifying a launch power to 1 mdB."""
    return int(round(p_dbm * 1000)) + 2**31


class ExperimentSpec(BaseModel):
    """Everything needed to reproduce a sweep."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "paper6"
    description: str = ""
    tx: TxConfig = TxConfig()
    link: LinkConfig = LinkConfig()
    kk: KkConfig = KkConfig()
    eq: EqualizerConfig = EqualizerConfig()
    fec: FecModel = FecModel()
    capture: CaptureConfig = CaptureConfig()
    sweep: list[float] = Field(default_factory=lambda: [float(p) for p in range(-6, 15, 2)])
    # receiver subsets k (received spatial modes); None means k = transmitted modes
    rx_subsets: Optional[list[int]] = None
    n_captures: int = Field(5, ge=1)
    seeds: SeedConfig = SeedConfig()
    output_dir: str = "results"

    @field_validator("sweep")
    @classmethod
    def _sweep(cls, v):
        if not v:
            raise ValueError("sweep needs at least one launch power")
        if len({power_key(p) for p in v}) != len(v):
            raise ValueError("sweep contains duplicate launch powers")
        return v

    @property
    def n_tx_modes(self) -> int:
        return len(self.tx.active_modes)

    @property
    def subsets(self) -> list[int]:
        return list(self.rx_subsets) if self.rx_subsets else [self.n_tx_modes]

    @property
    def capture_symbols(self) -> int:
        return self.eq.n_train_symbols + self.capture.measured_symbols + 2 * self.capture.guard_symbols

    def resolved(self) -> "ExperimentSpec":
        """Copy with derived seeds written into the tx and link sections."""
        b = self.seeds.base
        return self.model_copy(update={
            "tx": self.tx.model_copy(update={"seed": derive_int(b, "tx") % 2**31}),
            "link": self.link.model_copy(update={"seed": derive_int(b, "link") % 2**31}),
            "rx_subsets": self.subsets,
        })

    def to_json(self) -> str:
        return self.model_dump_json(indent=1)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

PRESETS: dict[str, dict] = {
    "paper6": {
        "name": "paper6",
        "description": "six modes launched and received over the 130 km link, MDL 11 dB",
    },
    "paper3": {
        "name": "paper3",
        "description": "lower three modes launched, 3 to 6 modes received, MDL 5.5 dB",
        "tx": {"active_modes": list(MODE_ORDER[:3])},
        "link": {"target_mdl_db": 5.5},
        "rx_subsets": [3, 4, 5, 6],
    },
    "paper3-calibrated": {
        "name": "paper3-calibrated",
        "description": "paper3 with weaker inter-group coupling, sized for a 4 dB launch-power saving with k=6",
        "tx": {"active_modes": list(MODE_ORDER[:3])},
        "link": {"target_mdl_db": 5.5, "inter_group_xt_db": -23.0},
        "rx_subsets": [3, 4, 5, 6],
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def preset(name: str) -> ExperimentSpec:
    return validate_spec({"preset": name})


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def parse_text(text: str, fmt: str = "toml") -> dict:
    """Parse config text; syntax errors become a ConfigError with line/column."""
    if fmt == "json":
        try:
            raw = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as e:
            raise ConfigError([f"syntax error at line {e.lineno}, column {e.colno}: {e.msg}"]) from None
    else:
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            line, col = getattr(e, "lineno", None), getattr(e, "colno", None)
            where = f" at line {line}, column {col}" if line is not None else ""
            raise ConfigError([f"syntax error{where}: {getattr(e, 'msg', str(e))}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a table"])
    return raw


def _semantic_errors(s: ExperimentSpec) -> list[str]:
    errs = []
    M, N = s.n_tx_modes, s.link.n_modes_link
    if M > N:
        errs.append(f"tx.active_modes: {M} transmitted modes exceed link.n_modes_link={N}")
    if tuple(s.tx.active_modes) != MODE_ORDER[:M]:
        errs.append(f"tx.active_modes: must be the first {M} modes {list(MODE_ORDER[:M])} (lantern port order)")
    for k in s.subsets:
        if not M <= k <= N:
            errs.append(f"rx_subsets: k={k} outside [{M}, {N}] (transmitted modes to link modes)")
    if len(set(s.subsets)) != len(s.subsets):
        errs.append("rx_subsets: duplicate entries")
    if s.capture_symbols > s.tx.n_symbols:
        errs.append(
            f"capture: {s.capture_symbols} symbols per capture (training + measured + guards) exceed "
            f"tx.n_symbols={s.tx.n_symbols}"
        )
    r = adc_ratio(s.tx.sample_rate, s.kk.adc_rate_hz)
    if abs(float(r) * s.tx.sample_rate - s.kk.adc_rate_hz) > 1e-3 * s.kk.adc_rate_hz:
        errs.append(f"kk.adc_rate_hz: {s.kk.adc_rate_hz:g} is not a small-denominator multiple of the tx rate")
    occupied = s.tx.baud * (1 + s.tx.rrc.roll_off)
    if s.kk.signal_bandwidth_hz < 0.999 * occupied:
        errs.append(f"kk.signal_bandwidth_hz: {s.kk.signal_bandwidth_hz:g} below the occupied {occupied:g}")
    if s.kk.lo_offset_hz <= occupied / 2:
        errs.append(f"kk.lo_offset_hz: {s.kk.lo_offset_hz:g} inside the signal band (needs > {occupied / 2:g})")
    return errs


def _loc(loc) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def _interval(loc) -> str:
    """Allowed range of a numeric field, e.g. ``[0, 1]``, or '' if unbounded."""
    model, info = ExperimentSpec, None
    for part in loc:
        fields = getattr(model, "model_fields", {})
        if part not in fields:
            return ""
        info = fields[part]
        model = info.annotation
    if info is None:
        return ""
    lo = hi = None
    lo_br, hi_br = "(", ")"
    for m in info.metadata:
        for attr, side, br in (("ge", "lo", "["), ("gt", "lo", "("), ("le", "hi", "]"), ("lt", "hi", ")")):
            v = getattr(m, attr, None)
            if v is not None:
                if side == "lo":
                    lo, lo_br = v, br
                else:
                    hi, hi_br = v, br
    if lo is None and hi is None:
        return ""
    fmt = lambda v, inf: inf if v is None else f"{v:g}"  # noqa: E731
    return f" (allowed {lo_br}{fmt(lo, '-inf')}, {fmt(hi, 'inf')}{hi_br})"


def validate_spec(raw: str | dict, fmt: str = "toml") -> ExperimentSpec:
    """Parse, layer over the preset, and check a config.

    Raises
    ------
    ConfigError
        Listing every violation with its field path.
    """
    data = parse_text(raw, fmt) if isinstance(raw, str) else dict(raw)
    name = data.pop("preset", "paper6")
    if name not in PRESETS:
        raise ConfigError([f"preset: unknown preset {name!r}; choose from {sorted(PRESETS)}"])
    merged = _merge(PRESETS[name], data)
    tx_in = merged.get("tx", {})
    kk_in = merged.setdefault("kk", {})
    if isinstance(tx_in, dict) and isinstance(kk_in, dict) and "signal_bandwidth_hz" not in kk_in:
        # follow the transmitter unless set explicitly
        try:
            t = TxConfig(**tx_in)
            kk_in["signal_bandwidth_hz"] = t.baud * (1 + t.rrc.roll_off)
        except (ValidationError, TypeError):
            pass
    try:
        spec = ExperimentSpec(**merged)
    except ValidationError as e:
        raise ConfigError([
            f"{_loc(err['loc'])}: {err['msg']}{_interval(err['loc'])}" for err in e.errors()
        ]) from None
    errs = _semantic_errors(spec)
    if errs:
        raise ConfigError(errs)
    return spec


def load_spec(path: str | Path) -> ExperimentSpec:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError([f"cannot read {p}: {e.strerror}"]) from None
    return validate_spec(text, "json" if p.suffix.lower() == ".json" else "toml")


__all__ = [
    "AXIS_IDS", "PRESETS", "CaptureConfig", "ConfigError", "ExperimentSpec", "SeedConfig",
    "derive_int", "derive_seed", "load_spec", "parse_text", "power_key", "preset", "validate_spec",
]
