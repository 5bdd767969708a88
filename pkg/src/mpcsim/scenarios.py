"""Scenario files and the built-in experiment scenarios.

A scenario is a YAML mapping::

    n: 3
    inductor_style: middle-branches   # optional
    synchronous: true                 # false -> derive the diode variant
    inductance: 0.72e-3               # scalar or per-branch list
    capacitance: 560.0e-6
    attachments:
      - {span: T3..G, kind: voltage-source, value: 40}
      - {span: [1, 4], kind: resistive-load, value: 50}
    duties: [0.35, 0.25, 0.40]
    f_sw: 30000
    sim: {steps_per_period: 1000}     # any SimConfig field except f_sw
    outputs: [report, trace]
"""

from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from mpcsim.pwm import DutyError, DutyVector
from mpcsim.simulator import SimConfig
from mpcsim.topology import (
    Attachment,
    AttachmentKind,
    InductorStyle,
    PortSpan,
    TopologyDescriptor,
    TopologyError,
)

OUTPUT_KINDS = ("report", "trace", "netlist")
_TOP_KEYS = {"name", "n", "inductor_style", "synchronous", "inductance", "capacitance",
             "attachments", "duties", "f_sw", "sim", "outputs"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    descriptor: TopologyDescriptor
    duties: DutyVector
    f_sw: float
    sim: SimConfig
    outputs: tuple[str, ...] = ("report",)
    name: str = "scenario"

    def with_overrides(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def _number(value, what: str) -> float:
    # YAML 1.1 reads "1e6" as a string
    if isinstance(value, bool):
        raise ConfigError(f"{what}: expected a number, got {value!r}")
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{what}: expected a number, got {value!r}") from None
    if not math.isfinite(x):
        raise ConfigError(f"{what}: must be finite")
    return x


_SPAN_RE = re.compile(r"^\s*T(\d+)\s*\.\.\s*(?:T(\d+)|G)\s*$")


def parse_span(value, n: int) -> PortSpan:
    """``"T2..G"``, ``"T1..T3"`` or a ``[top, bottom]`` pair."""
    if isinstance(value, str):
        m = _SPAN_RE.match(value)
        if not m:
            raise ConfigError(f"bad span {value!r}; use 'Ta..Tb' or 'Ta..G'")
        top = int(m.group(1))
        bottom = int(m.group(2)) if m.group(2) else n + 1
    elif isinstance(value, (list, tuple)) and len(value) == 2:
        top, bottom = (int(_number(v, "span")) for v in value)
    else:
        raise ConfigError(f"bad span {value!r}")
    try:
        span = PortSpan(top, bottom)
        span.check(n)
    except TopologyError as exc:
        raise ConfigError(str(exc)) from None
    return span


def _sim_config(raw: Mapping[str, Any] | None, f_sw: float) -> SimConfig:
    raw = dict(raw or {})
    names = {f.name: f for f in dataclasses.fields(SimConfig)}
    if "f_sw" in raw:
        raise ConfigError("set f_sw at the top level, not under sim")
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"unknown sim keys: {', '.join(unknown)}")
    kwargs: dict[str, Any] = {"f_sw": f_sw}
    for key, value in raw.items():
        default = names[key].default
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"sim.{key}: expected true/false")
            kwargs[key] = value
        elif isinstance(default, int):
            x = _number(value, f"sim.{key}")
            if x != int(x):
                raise ConfigError(f"sim.{key}: expected an integer")
            kwargs[key] = int(x)
        elif isinstance(default, float):
            kwargs[key] = _number(value, f"sim.{key}")
        else:
            kwargs[key] = str(value)
    try:
        return SimConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"sim: {exc}") from None


def parse_config(data: Mapping[str, Any], name: str = "scenario") -> ScenarioConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("config must be a mapping at the top level")
    unknown = sorted(set(data) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key in ("n", "attachments", "duties", "f_sw"):
        if key not in data:
            raise ConfigError(f"missing required key {key!r}")
    n_raw = _number(data["n"], "n")
    if n_raw != int(n_raw) or n_raw < 2:
        raise ConfigError("n must be an integer >= 2")
    n = int(n_raw)

    atts = []
    if not isinstance(data["attachments"], list):
        raise ConfigError("attachments must be a list")
    for i, raw in enumerate(data["attachments"]):
        if not isinstance(raw, Mapping) or "span" not in raw or "kind" not in raw:
            raise ConfigError(f"attachment {i}: needs span and kind")
        try:
            kind = AttachmentKind(raw["kind"])
        except ValueError:
            choices = ", ".join(k.value for k in AttachmentKind)
            raise ConfigError(f"attachment {i}: unknown kind {raw['kind']!r} (choose from {choices})") from None
        value = _number(raw.get("value", 0.0), f"attachment {i} value")
        try:
            atts.append(Attachment(parse_span(raw["span"], n), kind, value))
        except TopologyError as exc:
            raise ConfigError(f"attachment {i}: {exc}") from None

    def per_item(key, default):
        raw = data.get(key, default)
        if isinstance(raw, list):
            return tuple(_number(v, key) for v in raw)
        return _number(raw, key)

    try:
        desc = TopologyDescriptor(
            n,
            tuple(atts),
            synchronous=bool(data.get("synchronous", True)),
            inductor_style=InductorStyle(data.get("inductor_style", InductorStyle.MIDDLE_BRANCHES.value)),
            inductance=per_item("inductance", 0.72e-3),
            capacitance=per_item("capacitance", 560e-6),
        )
    except (TopologyError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    if not isinstance(data["duties"], list) or len(data["duties"]) != n:
        raise ConfigError(f"duties must be a list of {n} numbers")
    try:
        duties = DutyVector(tuple(_number(d, "duties") for d in data["duties"]))
    except DutyError as exc:
        raise ConfigError(str(exc)) from None
    f_sw = _number(data["f_sw"], "f_sw")
    if f_sw <= 0:
        raise ConfigError("f_sw must be positive")
    sim = _sim_config(data.get("sim"), f_sw)
    outputs = tuple(data.get("outputs", ["report"]))
    bad = [o for o in outputs if o not in OUTPUT_KINDS]
    if bad:
        raise ConfigError(f"unknown outputs {bad}; choose from {list(OUTPUT_KINDS)}")
    return ScenarioConfig(desc, duties, f_sw, sim, outputs, str(data.get("name", name)))


def load_config(path: str | Path) -> ScenarioConfig:
    """Read and validate a scenario file.  OSError propagates for I/O problems."""
    path = Path(path)
    text = path.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return parse_config(data, name=path.stem)


def dump_config(cfg: ScenarioConfig) -> dict:
    """Plain-data form of ``cfg`` that :func:`parse_config` reads back."""
    d = cfg.descriptor
    sim = {f.name: getattr(cfg.sim, f.name) for f in dataclasses.fields(SimConfig) if f.name != "f_sw"}
    return {
        "name": cfg.name,
        "n": d.n,
        "inductor_style": d.inductor_style.value,
        "synchronous": d.synchronous,
        "inductance": list(d.inductance),
        "capacitance": list(d.capacitance),
        "attachments": [
            {"span": a.span.label(d.n), "kind": a.kind.value, "value": a.value} for a in d.attachments
        ],
        "duties": list(cfg.duties.d),
        "f_sw": cfg.f_sw,
        "sim": sim,
        "outputs": list(cfg.outputs),
    }


_FIG10_COMMON = {
    "n": 3,
    "inductance": 0.72e-3,
    "capacitance": 560e-6,
    "duties": [0.35, 0.25, 0.40],
    "f_sw": 30e3,
    "outputs": ["report", "trace"],
}

BUILTIN: dict[str, dict] = {
    # single input (40 V on the bottom port), two 50 ohm outputs
    "sido-fig10a": {
        **_FIG10_COMMON,
        "name": "sido-fig10a",
        "attachments": [
            {"span": "T3..G", "kind": "voltage-source", "value": 40.0},
            {"span": "T1..G", "kind": "resistive-load", "value": 50.0},
            {"span": "T2..G", "kind": "resistive-load", "value": 50.0},
        ],
    },
    # 50 V across the whole stack and 20 V on the bottom port feed one load
    "diso-fig10b": {
        **_FIG10_COMMON,
        "name": "diso-fig10b",
        "attachments": [
            {"span": "T1..G", "kind": "voltage-source", "value": 50.0},
            {"span": "T3..G", "kind": "voltage-source", "value": 20.0},
            {"span": "T2..G", "kind": "resistive-load", "value": 50.0},
        ],
    },
}


def builtin(name: str) -> ScenarioConfig:
    try:
        data = BUILTIN[name]
    except KeyError:
        raise ConfigError(f"unknown scenario {name!r}; built-ins: {', '.join(sorted(BUILTIN))}") from None
    return parse_config(data, name=name)
