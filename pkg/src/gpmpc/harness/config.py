"""Scenario configuration read from flat INI files.

Each module gets its own section (``[scenario]``, ``[quad]``, ``[mpc]``,
``[gp]``, ``[wind]``, ``[reference]``). Unknown keys are rejected so that a
typo never silently falls back to a default.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from ..dynamics import QuadParams
from ..smpc import MpcConfig
from ..ssgp import Hyperparams


class ConfigError(ValueError):
    """Invalid or inconsistent scenario configuration."""


@dataclass(frozen=True)
class GpSettings:
    order: int = 6
    batch_size: int = 50
    eta: tuple = (0.03, 0.01, 0.005)
    init_signal_var: float = 1.0
    init_length_scale: float = 1.0
    init_noise_var: float = 0.1
    steps_per_interval: int = 1
    switch_after: int = 50

    def initial_hyper(self) -> Hyperparams:
        return Hyperparams(self.init_signal_var, self.init_length_scale, self.init_noise_var)


@dataclass(frozen=True)
class WindSettings:
    mean: tuple = (22.0, 0.0, 0.0)
    variance: float = 24.0
    time_constant: float = 2.0
    gain: float = 0.15


@dataclass(frozen=True)
class ReferenceSettings:
    kind: str = "circuit"
    start: tuple = (0.0, 0.0, 3.0)
    side: float = 10.0
    corner_radius: float = 2.0
    speed: float = 1.5
    ramp_time: float = 2.0
    hold_time: float = 8.0


@dataclass(frozen=True)
class ScenarioConfig:
    controller: str = "gp"
    duration: float = 36.0
    seed: int = 0
    dt_sim: float = 1.0 / 600.0
    control_rate: float = 30.0
    metric_start: float | None = None
    quad: QuadParams = field(default_factory=QuadParams)
    mpc: MpcConfig = field(default_factory=lambda: MpcConfig(u_hover=QuadParams().hover_thrust))
    gp: GpSettings = field(default_factory=GpSettings)
    wind: WindSettings = field(default_factory=WindSettings)
    reference: ReferenceSettings = field(default_factory=ReferenceSettings)

    def __post_init__(self):
        if self.controller not in ("gp", "nominal"):
            raise ConfigError(f"controller must be 'gp' or 'nominal', got {self.controller!r}")
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        if self.control_rate < 1.0 / self.mpc.dt - 1e-9:
            raise ConfigError("control rate must be at least the predictor rate")
        for name, period in (("control period", 1.0 / self.control_rate),
                             ("predictor step", self.mpc.dt)):
            ratio = period / self.dt_sim
            if abs(ratio - round(ratio)) > 1e-6:
                raise ConfigError(f"{name} is not a multiple of dt_sim")
        ratio = self.mpc.dt * self.control_rate
        if abs(ratio - round(ratio)) > 1e-6:
            raise ConfigError("predictor step is not a multiple of the control period")
        if self.gp.switch_after < 0 or self.gp.steps_per_interval < 1:
            raise ConfigError("invalid GP training schedule")
        if self.wind.variance < 0 or self.wind.time_constant <= 0 or self.wind.gain < 0:
            raise ConfigError("invalid wind settings")
        if self.reference.kind not in ("circuit", "hover"):
            raise ConfigError(f"unknown reference kind {self.reference.kind!r}")

    @property
    def ticks_per_control(self) -> int:
        return int(round(1.0 / (self.control_rate * self.dt_sim)))

    @property
    def controls_per_interval(self) -> int:
        return int(round(self.mpc.dt * self.control_rate))

    @property
    def metric_window_start(self) -> float:
        if self.metric_start is not None:
            return self.metric_start
        return self.reference.hold_time if self.reference.kind == "circuit" else 0.0


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _parse(section, schema: dict) -> dict:
    out = {}
    for key, raw in section.items():
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in [{section.name}]")
        kind = schema[key]
        try:
            if kind is tuple:
                out[key] = _floats(raw)
            elif kind is bool:
                out[key] = section.getboolean(key)
            elif kind == "optfloat":
                out[key] = None if raw.strip().lower() in ("", "none") else float(raw)
            elif kind is float:
                out[key] = float(eval_number(raw))
            else:
                out[key] = kind(raw.strip())
        except ValueError as exc:
            raise ConfigError(f"[{section.name}] {key}: {exc}") from None
    return out


def eval_number(text: str) -> float:
    """Parse a float, also accepting ``a/b`` fractions such as ``1/600``."""
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _spec_of(cls, overrides=None) -> dict:
    schema = {}
    for f in fields(cls):
        t = f.type
        if t in ("float", float):
            schema[f.name] = float
        elif t in ("int", int):
            schema[f.name] = int
        elif t in ("str", str):
            schema[f.name] = str
        elif t in ("tuple", tuple):
            schema[f.name] = tuple
    schema.update(overrides or {})
    return schema


_MPC_KEYS = {"horizon": int, "q_diag": tuple, "r_diag": tuple, "state_bounds": tuple,
             "u_hover": "optfloat", "p_x": float, "p_u": float, "dt": float}


def config_from_parser(parser: configparser.ConfigParser) -> ScenarioConfig:
    known = {"scenario", "quad", "mpc", "gp", "wind", "reference"}
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"unknown section [{name}]")

    scen = {}
    if parser.has_section("scenario"):
        scen = _parse(parser["scenario"], {"controller": str, "duration": float, "seed": int,
                                           "dt_sim": float, "control_rate": float,
                                           "metric_start": "optfloat"})
    try:
        quad = QuadParams(**(_parse(parser["quad"], _spec_of(QuadParams))
                             if parser.has_section("quad") else {}))
        mpc_raw = _parse(parser["mpc"], _MPC_KEYS) if parser.has_section("mpc") else {}
        mpc_kwargs = {}
        if "horizon" in mpc_raw:
            mpc_kwargs["horizon"] = mpc_raw["horizon"]
        if "q_diag" in mpc_raw:
            mpc_kwargs["Q"] = np.diag(mpc_raw["q_diag"])
        if "r_diag" in mpc_raw:
            mpc_kwargs["R"] = np.diag(mpc_raw["r_diag"])
        if "state_bounds" in mpc_raw:
            mpc_kwargs["state_bounds"] = np.array(mpc_raw["state_bounds"])
        for key in ("p_x", "p_u", "dt"):
            if key in mpc_raw:
                mpc_kwargs[key] = mpc_raw[key]
        # trim thrust defaults to the model's own hover value
        u_hover = mpc_raw.get("u_hover")
        mpc_kwargs["u_hover"] = quad.hover_thrust if u_hover is None else u_hover
        mpc = MpcConfig(**mpc_kwargs)
        if mpc.Q.shape != (12, 12) or mpc.R.shape != (4, 4) or mpc.state_bounds.shape != (12,):
            raise ConfigError("q_diag needs 12 entries, r_diag 4 and state_bounds 12")
        gp_raw = _parse(parser["gp"], _spec_of(GpSettings)) if parser.has_section("gp") else {}
        if "eta" in gp_raw and len(gp_raw["eta"]) != 3:
            raise ConfigError("gp eta needs three step sizes")
        gp = GpSettings(**gp_raw)
        gp.initial_hyper()
        wind = WindSettings(**(_parse(parser["wind"], _spec_of(WindSettings))
                               if parser.has_section("wind") else {}))
        if len(wind.mean) != 3:
            raise ConfigError("wind mean needs three components")
        ref = ReferenceSettings(**(_parse(parser["reference"], _spec_of(ReferenceSettings))
                                   if parser.has_section("reference") else {}))
        if len(ref.start) != 3:
            raise ConfigError("reference start needs three components")
        return ScenarioConfig(quad=quad, mpc=mpc, gp=gp, wind=wind, reference=ref, **scen)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ScenarioConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return config_from_parser(parser)


def parse_config(text: str) -> ScenarioConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return config_from_parser(parser)


def default_config(**overrides) -> ScenarioConfig:
    quad = overrides.pop("quad", QuadParams())
    mpc = overrides.pop("mpc", None) or MpcConfig(u_hover=quad.hover_thrust)
    return ScenarioConfig(quad=quad, mpc=mpc, **overrides)


def _fmt(value) -> str:
    if isinstance(value, (tuple, list, np.ndarray)):
        return " ".join(repr(float(v)) for v in np.ravel(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(cfg: ScenarioConfig) -> str:
    """Round-trippable INI rendering of a configuration."""
    lines = ["[scenario]"]
    for key in ("controller", "duration", "seed", "dt_sim", "control_rate"):
        lines.append(f"{key} = {_fmt(getattr(cfg, key))}")
    lines.append(f"metric_start = {'none' if cfg.metric_start is None else _fmt(cfg.metric_start)}")
    lines += ["", "[quad]"] + [f"{k} = {_fmt(v)}" for k, v in asdict(cfg.quad).items()]
    m = cfg.mpc
    lines += ["", "[mpc]", f"horizon = {m.horizon}", f"q_diag = {_fmt(np.diag(m.Q))}",
              f"r_diag = {_fmt(np.diag(m.R))}", f"state_bounds = {_fmt(m.state_bounds)}",
              f"u_hover = {_fmt(float(m.u_hover))}", f"p_x = {_fmt(m.p_x)}",
              f"p_u = {_fmt(m.p_u)}", f"dt = {_fmt(m.dt)}"]
    for name in ("gp", "wind", "reference"):
        lines += ["", f"[{name}]"]
        lines += [f"{k} = {_fmt(v)}" for k, v in asdict(getattr(cfg, name)).items()]
    return "\n".join(lines) + "\n"


def with_seed(cfg: ScenarioConfig, seed: int) -> ScenarioConfig:
    return replace(cfg, seed=int(seed))

