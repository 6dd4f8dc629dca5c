"""Run configuration: a flat INI document with fixed sections.

Grammar (``configparser`` syntax, ``#`` or ``;`` comments)::

    [run]
    mode = me | sme | sweep | robustness | regime-check
    j = 25                      # integer or half-integer, "1/2" allowed
    j_list = 5, 10, 15, 20, 25, 30, 40
    m = 1.0                     # measurement strength, only rescales time
    master_seed = 1234          # unsigned 64-bit
    n_trajectories = 1000
    threads = 1

    [grid]                      # all times in units of 1/M
    t_end = 3.0
    dt = auto                   # auto: stiffness-aware 1e-3 (ME), 1e-4 (SME)
    record_stride = auto        # SME observables every k steps (auto: 0.01/M)
    snapshot_stride = auto      # stored states every k steps (auto: 0.1/M)

    [gain]
    type = ensemble | analytic | conditioned | zero | tabulated
    epsilon = 0.0               # perturbation: lambda -> (1 + epsilon) lambda
    table_path =                # two-column (t, lambda) file for tabulated

    [output]
    dir = results
    analytic_curve = true       # add the closed-form xi^2 column (ME mode)
    analytic_gain_curve = false # also integrate with the closed-form gain

    [regime]
    g = ...  kappa = ...  gamma = ...  delta = ...  chi = ...
    beta_sq = ...  n_atoms = ...  threshold = 10

Unknown sections or keys are rejected.  ``gain.type`` defaults per mode:
ensemble (me), conditioned (sme), analytic (sweep, robustness); robustness
uses ``epsilon = 0.2`` unless set.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .spin_algebra import SpinQuantumNumber

MODES = ("me", "sme", "sweep", "robustness", "regime-check")
GAIN_TYPES = ("ensemble", "analytic", "conditioned", "zero", "tabulated")
DEFAULT_J_LIST = (5, 10, 15, 20, 25, 30, 40)
REGIME_KEYS = ("g", "kappa", "gamma", "delta", "chi", "beta_sq", "n_atoms")

_DEFAULT_GAIN = {"me": "ensemble", "sme": "conditioned", "sweep": "analytic",
                 "robustness": "analytic", "regime-check": "analytic"}


@dataclass
class SimulationConfig:
    mode: str = "me"
    two_j: int = 50
    two_j_list: tuple = tuple(2 * j for j in DEFAULT_J_LIST)
    m: float = 1.0
    master_seed: int = 1234
    n_trajectories: int = 1000
    threads: int = 1
    t_end: float = 3.0
    dt: float | None = None
    record_stride: int | None = None
    snapshot_stride: int | None = None
    gain_type: str | None = None
    epsilon: float | None = None
    table_path: str = ""
    out_dir: str = "results"
    analytic_curve: bool = True
    analytic_gain_curve: bool = False
    regime: dict = field(default_factory=dict)
    regime_threshold: float = 10.0

    def __post_init__(self):
        if self.gain_type is None:
            self.gain_type = _DEFAULT_GAIN.get(self.mode, "analytic")
        if self.epsilon is None:
            self.epsilon = 0.2 if self.mode == "robustness" else 0.0
        self.validate()

    @property
    def j(self) -> SpinQuantumNumber:
        return SpinQuantumNumber(self.two_j)

    @property
    def j_list(self) -> list[SpinQuantumNumber]:
        return [SpinQuantumNumber(t) for t in self.two_j_list]

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.gain_type not in GAIN_TYPES:
            raise ConfigError(f"gain.type must be one of {GAIN_TYPES}, got {self.gain_type!r}")
        if self.two_j < 1 or any(t < 1 for t in self.two_j_list):
            raise ConfigError("J must be at least 1/2")
        if not self.two_j_list and self.mode in ("sweep", "robustness"):
            raise ConfigError("run.j_list must not be empty")
        if not self.m > 0:
            raise ConfigError("run.m must be positive")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("run.master_seed must be an unsigned 64-bit integer")
        if self.n_trajectories < 1:
            raise ConfigError("run.n_trajectories must be >= 1")
        if self.threads < 1:
            raise ConfigError("run.threads must be >= 1")
        if not self.t_end > 0:
            raise ConfigError("grid.t_end must be positive")
        if self.dt is not None and not 0 < self.dt <= self.t_end:
            raise ConfigError("grid.dt must lie in (0, t_end]")
        for name in ("record_stride", "snapshot_stride"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"grid.{name} must be >= 1")
        if not -1 < self.epsilon:
            raise ConfigError("gain.epsilon must exceed -1")
        if self.gain_type == "tabulated" and not self.table_path:
            raise ConfigError("gain.table_path is required for tabulated gains")
        if self.mode == "sme" and self.gain_type == "ensemble":
            raise ConfigError("sme mode needs a conditioned, analytic, tabulated or zero gain")
        if self.mode == "regime-check":
            missing = [k for k in REGIME_KEYS if k not in self.regime]
            if missing:
                raise ConfigError(f"regime-check needs [regime] keys: {', '.join(missing)}")
        if self.regime_threshold <= 0:
            raise ConfigError("regime.threshold must be positive")


# key -> (section, attribute, reader, writer)
def _read_bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _read_auto(cast):
    def read(text):
        return None if text.strip().lower() in ("auto", "") else cast(text)
    return read


def _write_auto(value):
    return "auto" if value is None else repr(value) if isinstance(value, float) else str(value)


def _read_two_j(text):
    return SpinQuantumNumber.from_j(text).two_j


def _read_two_j_list(text):
    return tuple(_read_two_j(part) for part in text.replace(";", ",").split(",") if part.strip())


def _j_text(two_j):
    return str(SpinQuantumNumber(two_j))


_FIELDS = {
    ("run", "mode"): ("mode", str.strip, str),
    ("run", "j"): ("two_j", _read_two_j, _j_text),
    ("run", "j_list"): ("two_j_list", _read_two_j_list, lambda v: ", ".join(_j_text(t) for t in v)),
    ("run", "m"): ("m", float, repr),
    ("run", "master_seed"): ("master_seed", int, str),
    ("run", "n_trajectories"): ("n_trajectories", int, str),
    ("run", "threads"): ("threads", int, str),
    ("grid", "t_end"): ("t_end", float, repr),
    ("grid", "dt"): ("dt", _read_auto(float), _write_auto),
    ("grid", "record_stride"): ("record_stride", _read_auto(int), _write_auto),
    ("grid", "snapshot_stride"): ("snapshot_stride", _read_auto(int), _write_auto),
    ("gain", "type"): ("gain_type", str.strip, str),
    ("gain", "epsilon"): ("epsilon", float, repr),
    ("gain", "table_path"): ("table_path", str.strip, str),
    ("output", "dir"): ("out_dir", str.strip, str),
    ("output", "analytic_curve"): ("analytic_curve", _read_bool, lambda v: str(v).lower()),
    ("output", "analytic_gain_curve"): ("analytic_gain_curve", _read_bool, lambda v: str(v).lower()),
    ("regime", "threshold"): ("regime_threshold", float, repr),
}
_SECTIONS = ("run", "grid", "gain", "output", "regime")


def parse_config(text: str, overrides: dict | None = None) -> SimulationConfig:
    """Parse INI text; ``overrides`` maps "section.key" to raw string values."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    raw = {(s, k): v for s in parser.sections() for k, v in parser.items(s)}
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        raw[(section, key)] = str(value)

    kwargs = {}
    regime = {}
    for (section, key), value in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        if section == "regime" and key in REGIME_KEYS:
            try:
                regime[key] = float(value)
            except ValueError as exc:
                raise ConfigError(f"regime.{key}: {exc}") from exc
            continue
        if (section, key) not in _FIELDS:
            raise ConfigError(f"unknown key {section}.{key}")
        attr, reader, _ = _FIELDS[(section, key)]
        try:
            kwargs[attr] = reader(value)
        except (ValueError, ConfigError, ArithmeticError) as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from exc
    if regime:
        kwargs["regime"] = regime
    try:
        return SimulationConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, overrides: dict | None = None) -> SimulationConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


def config_to_text(cfg: SimulationConfig) -> str:
    """Serialize with every default written out explicitly."""
    lines = []
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        for (sec, key), (attr, _, writer) in _FIELDS.items():
            if sec == section:
                lines.append(f"{key} = {writer(getattr(cfg, attr))}")
        if section == "regime":
            for key in REGIME_KEYS:
                if key in cfg.regime:
                    lines.append(f"{key} = {cfg.regime[key]!r}")
        lines.append("")
    return "\n".join(lines)


def replace(cfg: SimulationConfig, **changes) -> SimulationConfig:
    return dataclasses.replace(cfg, **changes)
