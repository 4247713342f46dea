"""Scenario configuration files.

Sections hold one ``key = value`` per line; arrays are comma separated and
waypoints are numbered keys (``waypoint.0``, ``waypoint.1``, ...). Per-meld
sampling boxes and per-output gain rows use dotted keys as well.
"""

from __future__ import annotations

import configparser
import hashlib
from importlib.resources import files
from dataclasses import dataclass, field

import numpy as np

from .control import GainProfile
from .melds import Choice
from .models import DOUBLE_INTEGRATOR_OUTPUTS, MANIPULATOR_OUTPUTS, ManipulatorParams, build_model
from .references import JointPath, ReferenceBundle
from .schedule import SwitchSchedule

MODES = ("explicit", "auto-certified")
HOLDS = ("stage", "zoh")


class ConfigError(ValueError):
    """The configuration text cannot be turned into a scenario."""


def _floats(text: str, key: str) -> np.ndarray:
    try:
        vals = np.array([float(v) for v in text.split(",") if v.strip()], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {text!r}") from exc
    if not np.all(np.isfinite(vals)):
        raise ConfigError(f"{key}: values must be finite")
    return vals


def _names(text: str) -> tuple:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _join(values) -> str:
    return ", ".join(repr(float(v)) for v in np.asarray(values, dtype=float).reshape(-1))


@dataclass
class ScenarioConfig:
    model: str = "manipulator-3r"
    lengths: tuple = (0.5, 0.4, 0.3)
    masses: tuple = (4.0, 3.0, 2.0)
    inertias: tuple | None = None
    outputs: tuple = MANIPULATOR_OUTPUTS
    p: int = 3
    operating_point: np.ndarray = None
    gain_default: np.ndarray = field(default_factory=lambda: np.array([15.0, 15.0]))
    gain_rows: dict = field(default_factory=dict)
    waypoints: np.ndarray = None
    starts: np.ndarray = None
    durations: np.ndarray = None
    offsets: np.ndarray | None = None
    mode: str = "explicit"
    instants: np.ndarray = None
    melds: tuple = ()
    x0: np.ndarray = None
    dt: float = 1e-3
    t_end: float | None = None
    hold: str = "stage"
    epsilon: float = 1e-2
    samples: int = 10_000
    seed: int = 42
    n_step: float = 1e-2
    box_lo: np.ndarray | None = None
    box_hi: np.ndarray | None = None
    boxes: dict = field(default_factory=dict)
    out_dir: str = "out"

    # --- derived objects ---

    def build_model(self):
        if self.model == "manipulator-3r":
            return build_model(self.model, params=ManipulatorParams(self.lengths, self.masses, self.inertias), outputs=self.outputs)
        return build_model(self.model, outputs=self.outputs)

    def gains(self, degrees) -> GainProfile:
        rows = [self.gain_rows.get(name, self.gain_default) for name in self.outputs]
        for name, row, r in zip(self.outputs, rows, degrees):
            if len(row) != r:
                raise ConfigError(f"gain row of {name} has {len(row)} entries, its relative degree is {r}")
        return GainProfile(tuple(np.asarray(r, dtype=float) for r in rows))

    def path(self) -> JointPath:
        return JointPath(self.waypoints, self.starts, self.durations)

    def references(self, model, degrees) -> ReferenceBundle:
        return ReferenceBundle(model, self.path(), degrees, self.offsets)

    def schedule(self) -> SwitchSchedule:
        return SwitchSchedule(self.instants, [Choice.parse(b) for b in self.melds])

    def end_time(self) -> float:
        return float(self.t_end) if self.t_end is not None else float(self.instants[-1])

    def sampling_boxes(self, n: int) -> dict:
        """Bit string (or "default") -> (lo, hi) state box."""
        out = {k: (np.asarray(lo), np.asarray(hi)) for k, (lo, hi) in self.boxes.items()}
        if self.box_lo is not None:
            out["default"] = (np.asarray(self.box_lo), np.asarray(self.box_hi))
        for key, (lo, hi) in out.items():
            if lo.shape != (n,) or hi.shape != (n,):
                raise ConfigError(f"sampling box {key} must have {n} entries per corner")
            if np.any(hi < lo):
                raise ConfigError(f"sampling box {key} has an upper corner below the lower one")
        return out

    def fingerprint(self) -> str:
        """Hash of everything that fixes the plant, deck and gains."""
        text = "|".join(
            [self.model, repr(self.lengths), repr(self.masses), repr(self.inertias), ",".join(self.outputs), str(self.p)]
            + [f"{k}:{_join(v)}" for k, v in sorted(self._all_gain_rows().items())]
        )
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def _all_gain_rows(self) -> dict:
        return {name: self.gain_rows.get(name, self.gain_default) for name in self.outputs}

    # --- text form ---

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["model"] = {"name": self.model}
        if self.model == "manipulator-3r":
            cp["model"]["lengths"] = _join(self.lengths)
            cp["model"]["masses"] = _join(self.masses)
            if self.inertias is not None:
                cp["model"]["inertias"] = _join(self.inertias)
        cp["deck"] = {"outputs": ", ".join(self.outputs), "p": str(self.p)}
        if self.operating_point is not None:
            cp["deck"]["operating_point"] = _join(self.operating_point)
        cp["gains"] = {"default": _join(self.gain_default)}
        for name in sorted(self.gain_rows):
            cp["gains"][f"row.{name}"] = _join(self.gain_rows[name])
        cp["reference"] = {f"waypoint.{k}": _join(w) for k, w in enumerate(self.waypoints)}
        cp["reference"]["starts"] = _join(self.starts)
        cp["reference"]["durations"] = _join(self.durations)
        if self.offsets is not None:
            cp["reference"]["offsets"] = _join(self.offsets)
        cp["schedule"] = {"mode": self.mode, "instants": _join(self.instants), "melds": ", ".join(self.melds)}
        cp["simulation"] = {"x0": _join(self.x0), "dt": repr(float(self.dt)), "hold": self.hold}
        if self.t_end is not None:
            cp["simulation"]["t_end"] = repr(float(self.t_end))
        cp["certificate"] = {
            "epsilon": repr(float(self.epsilon)),
            "samples": str(self.samples),
            "seed": str(self.seed),
            "n_step": repr(float(self.n_step)),
        }
        if self.box_lo is not None:
            cp["certificate"]["box_lo"] = _join(self.box_lo)
            cp["certificate"]["box_hi"] = _join(self.box_hi)
        for key in sorted(self.boxes):
            lo, hi = self.boxes[key]
            cp["certificate"][f"box_lo.{key}"] = _join(lo)
            cp["certificate"][f"box_hi.{key}"] = _join(hi)
        cp["output"] = {"dir": self.out_dir}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)


def _get(cp, section, key, default=None, required=False):
    if cp.has_option(section, key):
        return cp.get(section, key)
    if required:
        raise ConfigError(f"missing [{section}] {key}")
    return default


def parse_config(text: str) -> ScenarioConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = ScenarioConfig()
    try:
        cfg.model = _get(cp, "model", "name", cfg.model)
        if cfg.model not in ("manipulator-3r", "double-integrator"):
            raise ConfigError(f"unknown model {cfg.model!r}")
        if cfg.model == "double-integrator":
            cfg.outputs, cfg.p = DOUBLE_INTEGRATOR_OUTPUTS, 1
        else:
            cfg.lengths = tuple(_floats(_get(cp, "model", "lengths", _join(cfg.lengths)), "lengths"))
            cfg.masses = tuple(_floats(_get(cp, "model", "masses", _join(cfg.masses)), "masses"))
            inertias = _get(cp, "model", "inertias")
            cfg.inertias = tuple(_floats(inertias, "inertias")) if inertias else None
        cfg.outputs = _names(_get(cp, "deck", "outputs", ", ".join(cfg.outputs)))
        cfg.p = int(_get(cp, "deck", "p", str(cfg.p)))
        op = _get(cp, "deck", "operating_point")
        cfg.operating_point = _floats(op, "operating_point") if op else None

        cfg.gain_default = _floats(_get(cp, "gains", "default", _join(cfg.gain_default)), "gains default")
        if cp.has_section("gains"):
            for key, value in cp.items("gains"):
                if key.startswith("row."):
                    name = key[4:]
                    if name not in cfg.outputs:
                        raise ConfigError(f"gain row for unknown output {name!r}")
                    cfg.gain_rows[name] = _floats(value, key)

        if not cp.has_section("reference"):
            raise ConfigError("missing [reference] section")
        numbered = sorted(
            ((int(k.split(".", 1)[1]), v) for k, v in cp.items("reference") if k.startswith("waypoint.")),
            key=lambda kv: kv[0],
        )
        if [k for k, _ in numbered] != list(range(len(numbered))) or len(numbered) < 2:
            raise ConfigError("waypoints must be numbered waypoint.0, waypoint.1, ... (at least two)")
        cfg.waypoints = np.array([_floats(v, f"waypoint.{k}") for k, v in numbered])
        cfg.starts = _floats(_get(cp, "reference", "starts", required=True), "starts")
        cfg.durations = np.broadcast_to(_floats(_get(cp, "reference", "durations", required=True), "durations"), cfg.starts.shape).copy()
        offsets = _get(cp, "reference", "offsets")
        cfg.offsets = _floats(offsets, "offsets") if offsets else None

        cfg.mode = _get(cp, "schedule", "mode", cfg.mode)
        if cfg.mode not in MODES:
            raise ConfigError(f"schedule mode must be one of {MODES}")
        cfg.instants = _floats(_get(cp, "schedule", "instants", required=True), "instants")
        cfg.melds = _names(_get(cp, "schedule", "melds", required=True))
        for bits in cfg.melds:
            if len(bits) != len(cfg.outputs) or set(bits) - {"0", "1"} or bits.count("1") != cfg.p:
                raise ConfigError(f"meld {bits!r} is not a {cfg.p}-of-{len(cfg.outputs)} bit string")
        if len(cfg.melds) != len(cfg.instants):
            raise ConfigError("one meld per schedule instant")

        cfg.x0 = _floats(_get(cp, "simulation", "x0", required=True), "x0")
        cfg.dt = float(_get(cp, "simulation", "dt", repr(cfg.dt)))
        t_end = _get(cp, "simulation", "t_end")
        cfg.t_end = float(t_end) if t_end else None
        cfg.hold = _get(cp, "simulation", "hold", cfg.hold)
        if cfg.hold not in HOLDS:
            raise ConfigError(f"hold must be one of {HOLDS}")

        cfg.epsilon = float(_get(cp, "certificate", "epsilon", repr(cfg.epsilon)))
        cfg.samples = int(_get(cp, "certificate", "samples", str(cfg.samples)))
        cfg.seed = int(_get(cp, "certificate", "seed", str(cfg.seed)))
        cfg.n_step = float(_get(cp, "certificate", "n_step", repr(cfg.n_step)))
        lo, hi = _get(cp, "certificate", "box_lo"), _get(cp, "certificate", "box_hi")
        if (lo is None) != (hi is None):
            raise ConfigError("box_lo and box_hi come in pairs")
        if lo is not None:
            cfg.box_lo, cfg.box_hi = _floats(lo, "box_lo"), _floats(hi, "box_hi")
        if cp.has_section("certificate"):
            for key, value in cp.items("certificate"):
                if key.startswith("box_lo."):
                    bits = key.split(".", 1)[1]
                    hi_text = _get(cp, "certificate", f"box_hi.{bits}", required=True)
                    cfg.boxes[bits] = (_floats(value, key), _floats(hi_text, f"box_hi.{bits}"))
                elif key.startswith("box_hi.") and not cp.has_option("certificate", "box_lo." + key.split(".", 1)[1]):
                    raise ConfigError(f"{key} without matching box_lo")
        cfg.out_dir = _get(cp, "output", "dir", cfg.out_dir)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    _check(cfg)
    return cfg


def _check(cfg: ScenarioConfig):
    if not cfg.dt > 0:
        raise ConfigError("dt must be positive")
    if not cfg.epsilon > 0:
        raise ConfigError("epsilon must be positive")
    if cfg.samples < 1:
        raise ConfigError("samples must be at least 1")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    if not 1 <= cfg.p < len(cfg.outputs):
        raise ConfigError("p must lie between 1 and the deck size minus one")
    if np.any(np.diff(cfg.instants) <= 0):
        raise ConfigError("schedule instants must be strictly increasing")
    if cfg.t_end is not None and cfg.t_end < cfg.instants[-1]:
        raise ConfigError("t_end precedes the last schedule instant")
    if len(cfg.waypoints) != len(cfg.starts) + 1:
        raise ConfigError("need one more waypoint than reference starts")
    if cfg.offsets is not None and cfg.offsets.shape != (len(cfg.outputs),):
        raise ConfigError("one reference offset per deck output")


def load_config(path) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text)


def same_scenario(a: ScenarioConfig, b: ScenarioConfig) -> bool:
    """Semantic equality: every field equal, arrays compared by value."""
    for name in a.__dataclass_fields__:
        va, vb = getattr(a, name), getattr(b, name)
        if isinstance(va, dict):
            if va.keys() != vb.keys() or any(not _equal(va[k], vb[k]) for k in va):
                return False
        elif not _equal(va, vb):
            return False
    return True


def _equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    if isinstance(a, str) or isinstance(b, str):
        return a == b
    if isinstance(a, tuple) and a and isinstance(a[0], str):
        return tuple(a) == tuple(b)
    if isinstance(a, tuple) and a and isinstance(a[0], np.ndarray):
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def fixture_path(name: str) -> str:
    """Path of a scenario file shipped with the package."""
    return str(files("meldctl") / "fixtures" / name)
