"""``mpcsim`` command line.

Exit codes: 0 ok, 1 I/O error, 2 invalid input, 3 inconsistent sources,
4 simulation did not converge, 5 no nonsynchronous derivation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from mpcsim.analysis import AnalysisError, InconsistentSourcesError, steady_state
from mpcsim.pwm import DutyError, DutyVector, make_schedule
from mpcsim.scenarios import ConfigError, ScenarioConfig, builtin, load_config
from mpcsim.simulator import SimConfig, SimResult, SimulationError, measure, mode_means, run_to_steady_state
from mpcsim.spice import export_netlist
from mpcsim.topology import (
    FIG2_LABELS,
    AttachmentKind,
    ElementKind,
    NoDerivationError,
    TopologyError,
    build_universalized,
    classify_switches,
    derive_nonsynchronous,
    enumerate_port_assignments,
)

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_INCONSISTENT, EXIT_NONCONVERGED, EXIT_NO_DERIVATION = range(6)


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load(args) -> ScenarioConfig:
    if bool(args.config) == bool(args.scenario):
        raise CliError("give exactly one of --config or --scenario", EXIT_INVALID)
    return load_config(args.config) if args.config else builtin(args.scenario)


def _write(path: str | Path, text: str) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise CliError(f"output directory does not exist: {path.parent}", EXIT_IO)
    path.write_text(text)


def _emit(text: str, out: str | None) -> None:
    if out:
        _write(out, text)
    else:
        sys.stdout.write(text)


def _dumps(data) -> str:
    return json.dumps(data, indent=2, sort_keys=False) + "\n"


def _netlist(cfg: ScenarioConfig):
    """Netlist for ``cfg``; the diode variant when the scenario asks for it."""
    netlist = build_universalized(cfg.descriptor)
    if cfg.descriptor.synchronous:
        return netlist
    return derive_nonsynchronous(netlist, steady_state(cfg.descriptor, cfg.duties, cfg.f_sw))


# ---------------------------------------------------------------------------
# enumerate

def cmd_enumerate(args) -> int:
    if args.n < 2:
        raise CliError("need n >= 2 (at least two ports besides ground)", EXIT_INVALID)
    if args.n > 24:
        raise CliError("n above 24 would list more than 16 million assignments", EXIT_INVALID)
    rows = enumerate_port_assignments(args.n)
    if args.inputs is not None:
        rows = [a for a in rows if a.k == args.inputs]
    total = 2 ** args.n - 2
    if args.json:
        payload = {
            "n": args.n,
            "total": total,
            "assignments": [
                {"inputs": sorted(a.inputs), "outputs": sorted(a.outputs), "k": a.k, "p": a.p,
                 **({"figure": FIG2_LABELS[a.inputs]} if args.n == 3 else {})}
                for a in rows
            ],
        }
        _emit(_dumps(payload), args.out)
        return EXIT_OK
    lines = []
    for a in rows:
        tag = f"  Fig. 2({FIG2_LABELS[a.inputs]})" if args.n == 3 else ""
        lines.append(f"k={a.k} p={a.p}  {a}{tag}")
    if args.inputs is not None:
        lines.append(f"rows: {len(rows)}")
    lines.append(f"total: {total} = 2^{args.n} − 2")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze

def cmd_analyze(args) -> int:
    cfg = _load(args)
    try:
        report = steady_state(cfg.descriptor, cfg.duties, cfg.f_sw)
    except InconsistentSourcesError as exc:
        implied = ", ".join(f"{v:.9g} V" for v in exc.implied_v0)
        raise CliError(f"inconsistent sources: implied stack voltages {implied}", EXIT_INCONSISTENT) from None
    data = {"scenario": cfg.name, "consistent": True, **report.to_dict()}
    if args.json or args.out:
        _emit(_dumps(data), args.out)
        return EXIT_OK
    n = cfg.descriptor.n
    lines = [f"scenario {cfg.name}: n={n}, duties {list(cfg.duties.d)}",
             f"v0 = {report.v0:.6g} V (sources consistent)"]
    for i, v in enumerate(report.port_voltages, 1):
        lines.append(f"  V{i} = {v:.6g} V")
    for att in data["attachments"]:
        lines.append(f"  {att['label']:<8} {att['kind']:<15} {att['voltage']:>10.5g} V {att['current']:>10.5g} A")
    for name, i in report.branch_currents.inductors.items():
        lines.append(f"  I({name}) = {i:.6g} A")
    lines.append(f"switch voltage stress: {report.switch_voltage_stress:.6g} V")
    lines.append("switch currents by mode (rows: mode, columns: S1..Sn):")
    for row in report.stress_table.rows:
        lines.append("  " + " ".join(f"{x:>10.4g}" for x in row))
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate

def simulation_summary(cfg: ScenarioConfig, netlist, result: SimResult) -> dict:
    trace = result.trace
    n = cfg.descriptor.n
    ports = []
    for i in range(1, n + 1):
        bottom = "G" if i == n else f"T{i + 1}"
        ports.append(measure(trace, f"v(T{i}..{bottom})")["mean"])
    spans = {}
    for i in range(1, n + 1):
        label = f"T{i}..G"
        spans[label] = measure(trace, f"v({label})")
    attachments = []
    by_kind = {AttachmentKind.VOLTAGE_SOURCE: "V", AttachmentKind.RESISTIVE_LOAD: "R",
               AttachmentKind.CURRENT_LOAD: "I"}
    counters: dict[str, int] = {}
    for att in cfg.descriptor.attachments:
        if att.kind is AttachmentKind.OPEN:
            continue
        prefix = by_kind[att.kind]
        counters[prefix] = counters.get(prefix, 0) + 1
        label = att.span.label(n)
        v = measure(trace, f"v({label})")["mean"]
        i = measure(trace, f"i({prefix}{counters[prefix]})")["mean"]
        attachments.append({"label": label, "kind": att.kind.value, "value": att.value,
                            "voltage": v, "current": i})
    inductors = {}
    capacitors = {}
    switches = {}
    for e in netlist.elements:
        if e.kind is ElementKind.INDUCTOR:
            inductors[e.id] = {k: measure(trace, f"i({e.id})")[k] for k in ("mean", "rms", "p2p")}
            inductors[e.id]["v_mean"] = measure(trace, f"v({e.id})")["mean"]
        elif e.kind is ElementKind.CAPACITOR:
            capacitors[e.id] = {k: measure(trace, f"v({e.id})")[k] for k in ("mean", "p2p")}
            capacitors[e.id]["i_mean"] = measure(trace, f"i({e.id})")["mean"]
        elif e.kind in (ElementKind.SWITCH, ElementKind.DIODE):
            switches[e.id] = {
                "v_max": measure(trace, f"v({e.id})")["max"],
                "v_min": measure(trace, f"v({e.id})")["min"],
                "i_rms": measure(trace, f"i({e.id})")["rms"],
                "mode_means": {str(k): v for k, v in mode_means(trace, f"i({e.id})").items()},
            }
    return {
        "scenario": cfg.name,
        "duties": list(cfg.duties.d),
        "f_sw": cfg.f_sw,
        "periods_used": result.periods_used,
        "converged": result.converged,
        "port_voltages": ports,
        "spans": spans,
        "attachments": attachments,
        "inductors": inductors,
        "capacitors": capacitors,
        "switches": switches,
    }


def _simulate(cfg: ScenarioConfig):
    netlist = _netlist(cfg)
    schedule = make_schedule(cfg.duties, cfg.f_sw)
    result = run_to_steady_state(netlist, schedule, cfg.sim, cfg.descriptor)
    return netlist, result


def _apply_sweep(cfg: ScenarioConfig, key: str, raw: str) -> ScenarioConfig:
    sim_fields = {f.name for f in dataclasses.fields(SimConfig)} - {"f_sw"}
    try:
        if key == "f_sw":
            f = float(raw)
            return cfg.with_overrides(f_sw=f, sim=dataclasses.replace(cfg.sim, f_sw=f))
        if key == "duties":
            return cfg.with_overrides(duties=DutyVector(tuple(float(x) for x in raw.split(":"))))
        if key in sim_fields:
            default = getattr(cfg.sim, key)
            value = type(default)(float(raw)) if isinstance(default, (int, float)) and not isinstance(default, bool) else raw
            return cfg.with_overrides(sim=dataclasses.replace(cfg.sim, **{key: value}))
        if key.startswith("attachment") and key[len("attachment"):].isdigit():
            idx = int(key[len("attachment"):]) - 1
            atts = list(cfg.descriptor.attachments)
            atts[idx] = dataclasses.replace(atts[idx], value=float(raw))
            return cfg.with_overrides(descriptor=dataclasses.replace(cfg.descriptor, attachments=tuple(atts)))
    except (ValueError, IndexError, DutyError, TopologyError) as exc:
        raise CliError(f"bad sweep value {key}={raw}: {exc}", EXIT_INVALID) from None
    raise CliError(
        f"cannot sweep {key!r}; use f_sw, duties (a:b:c), attachment<i> or a sim field", EXIT_INVALID
    )


def _sweep(cfg: ScenarioConfig, spec: str, args) -> int:
    if "=" not in spec:
        raise CliError("--sweep expects KEY=V1,V2,...", EXIT_INVALID)
    key, values = spec.split("=", 1)
    variants = [(v, _apply_sweep(cfg, key.strip(), v.strip())) for v in values.split(",") if v.strip()]
    workers = int(os.environ.get("MPCSIM_THREADS", "0") or 0) or min(len(variants), os.cpu_count() or 1)

    def one(item):
        value, variant = item
        netlist, result = _simulate(variant)
        return {"key": key, "value": value, **simulation_summary(variant, netlist, result)}

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        summaries = list(pool.map(one, variants))
    _emit(_dumps(summaries), args.out)
    return EXIT_OK if all(s["converged"] for s in summaries) else EXIT_NONCONVERGED


def cmd_simulate(args) -> int:
    cfg = _load(args)
    if args.sweep:
        return _sweep(cfg, args.sweep, args)
    netlist, result = _simulate(cfg)
    summary = simulation_summary(cfg, netlist, result)
    if args.out:
        out = Path(args.out)
        if not out.parent.is_dir():
            raise CliError(f"output directory does not exist: {out.parent}", EXIT_IO)
        result.trace.to_csv(out)
        summary_path = Path(args.summary) if args.summary else out.with_suffix(".summary.json")
        _write(summary_path, _dumps(summary))
    elif args.summary:
        _write(args.summary, _dumps(summary))
    if args.json or not args.out:
        sys.stdout.write(_dumps(summary) if args.json else _summary_text(summary))
    if not result.converged:
        print(f"warning: not converged after {result.periods_used} periods", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _summary_text(s: dict) -> str:
    lines = [f"scenario {s['scenario']}: {s['periods_used']} periods, converged={s['converged']}"]
    for label, st in s["spans"].items():
        lines.append(f"  mean({label}) = {st['mean']:.6g} V  p2p {st['p2p']:.4g} V")
    for name, st in s["inductors"].items():
        lines.append(f"  I({name}) mean {st['mean']:.6g} A  p2p {st['p2p']:.4g} A")
    for name, st in s["switches"].items():
        lines.append(f"  {name}: v_max {st['v_max']:.6g} V  i_rms {st['i_rms']:.4g} A")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# derive

def cmd_derive(args) -> int:
    cfg = _load(args)
    report = steady_state(cfg.descriptor, cfg.duties, cfg.f_sw)
    netlist = build_universalized(cfg.descriptor)
    verdicts = classify_switches(report)
    lines = []
    for v in verdicts:
        peaks = v.peaks or (None,) * len(v.modes)
        detail = ", ".join(
            f"mode {m}: {c:+.4g} A" + ("" if p is None else f" (max {p:+.4g} A)")
            for m, c, p in zip(v.modes, v.currents, peaks)
        )
        if v.replaceable:
            lines.append(f"S{v.index} -> D{v.index}: conducts only in its body-diode direction ({detail})")
        else:
            lines.append(f"S{v.index} kept: transistor-direction current ({detail})")
    try:
        derived = derive_nonsynchronous(netlist, report)
    except NoDerivationError as exc:
        raise CliError(str(exc), EXIT_NO_DERIVATION) from None
    swapped = [e.id for e in derived.elements if e.kind is ElementKind.DIODE]
    lines.append(f"substitutions: {len(swapped)} ({', '.join(swapped)})")
    text = export_netlist(derived, cfg.duties, cfg.f_sw, r_on=cfg.sim.r_on, r_off=cfg.sim.r_off,
                          title=f"{cfg.name} (nonsynchronous)")
    if args.out:
        _write(args.out, text)
    if args.json:
        payload = {
            "scenario": cfg.name,
            "substitutions": swapped,
            "switches": [dataclasses.asdict(v) for v in verdicts],
            "netlist": text,
        }
        sys.stdout.write(_dumps(payload))
    else:
        sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# export

def cmd_export(args) -> int:
    cfg = _load(args)
    text = export_netlist(_netlist(cfg), cfg.duties, cfg.f_sw, r_on=cfg.sim.r_on, r_off=cfg.sim.r_off,
                          title=cfg.name)
    _emit(text, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpcsim", description="Multiport n-switch converter toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("--config", help="scenario YAML file")
            p.add_argument("--scenario", help="built-in scenario: sido-fig10a, diso-fig10b")
        p.add_argument("--out", help="output file")
        p.add_argument("--json", action="store_true", help="JSON on stdout")

    p = sub.add_parser("enumerate", help="list common-ground port assignments")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--inputs", type=int, help="only assignments with this many input ports")
    common(p, scenario=False)
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("analyze", help="closed-form steady state")
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="switched simulation to periodic steady state")
    common(p)
    p.add_argument("--summary", help="summary JSON path (default: next to --out)")
    p.add_argument("--sweep", help="KEY=V1,V2,... run variants in parallel threads")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("derive", help="nonsynchronous (diode) variant")
    common(p)
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("export", help="SPICE netlist")
    common(p)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except InconsistentSourcesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCONSISTENT
    except NoDerivationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_DERIVATION
    except (ConfigError, DutyError, TopologyError, AnalysisError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
