"""Command-line front end.

Every workflow is a subcommand driven by a flat ``section.key = value``
configuration. A run writes its CSV files and a manifest (the resolved
configuration, CSV headers and content hashes) into a staging directory
that is moved into place only when the task succeeds.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 non-convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from ._io import write_csv
from .analysis import (
    basin_grid, classify_attractor, attractor_points, measure_control, reference_attractors,
    stroboscopic_sweep, trajectory_psd, average_velocity,
)
from .chain import ChainConfig, compare_with_dde, lift_state
from .continuation import (
    ContinuationError, ContinuationSettings, continue_branch, continue_grazing_locus,
    continue_pd_locus, orbit_from_dde, orbit_from_simulation,
)
from .integrator import IntegrationError, IntegrationSettings, integrate, switch_on_control
from .model import Params

log = logging.getLogger("capsule_dfc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_NONCONVERGENCE = 4

SCHEMA_VERSION = 1
TASKS = ("simulate", "sweep", "basin", "measure", "psd", "chain-compare", "continue", "locus")


class ConfigError(ValueError):
    pass


class NonConvergence(RuntimeError):
    pass


# --------------------------------------------------------------------------- value types


class _Type:
    def __init__(self, name, parse, render):
        self.name, self.parse, self.render = name, parse, render


def _parse_float(s):
    v = float(s)
    if math.isnan(v):
        raise ValueError("nan")
    return v


def _parse_bool(s):
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    return tuple(_parse_float(x) for x in s.split(",") if x.strip())


def _rf(v):
    return repr(float(v))


def _state(s):
    v = _floats(s)
    if len(v) != 4:
        raise ValueError("a state needs four comma-separated numbers")
    return v


def _states(s):
    out = tuple(_state(x) for x in s.split(";") if x.strip())
    if not out:
        raise ValueError("at least one state required")
    return out


def _pair(s):
    v = _floats(s)
    if len(v) != 2:
        raise ValueError("expected two comma-separated numbers")
    return v


def _ints(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


FLOAT = _Type("float", _parse_float, _rf)
INT = _Type("int", int, str)
BOOL = _Type("bool", _parse_bool, lambda v: "true" if v else "false")
STR = _Type("str", str.strip, str)
FLOATS = _Type("floats", _floats, lambda v: ",".join(_rf(x) for x in v))
INTS = _Type("ints", _ints, lambda v: ",".join(str(x) for x in v))
STATE = _Type("state", _state, lambda v: ",".join(_rf(x) for x in v))
STATES = _Type("states", _states, lambda v: ";".join(",".join(_rf(x) for x in s) for s in v))
PAIR = _Type("pair", _pair, lambda v: ",".join(_rf(x) for x in v))


def _choice(*options):
    def parse(s):
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    return _Type("choice", parse, str)


def _dataclass_section(cls, overrides=None):
    out = {}
    for f in fields(cls):
        t = {float: FLOAT, int: INT, "float": FLOAT, "int": INT}[f.type]
        out[f.name] = (t, (overrides or {}).get(f.name, f.default))
    return out


ZERO = (0.0, 0.0, 0.0, 0.0)

SECTIONS = {
    "params": _dataclass_section(Params),
    "numerics": _dataclass_section(IntegrationSettings),
    "chain": {"N": (INT, 30)},
    "continuation": _dataclass_section(ContinuationSettings),
    "output": {"formats": (_choice("csv"), "csv")},
}

TASK_KEYS = {
    "simulate": {
        "state": (STATE, ZERO),
        "cycles": (INT, 350),
        "switch_cycle": (INT, 0),
        "strobe_cycles": (INT, 50),
        "n_p": (INT, 1),
        "samples_per_period": (INT, 64),
        "record_from_cycle": (INT, 0),
    },
    "sweep": {
        "axis": (STR, "omega"),
        "range": (PAIR, (0.93, 0.98)),
        "grid": (INT, 200),
        "seeding": (_choice("zero", "forward", "backward", "both", "all", "local"), "local"),
        "seeds": (STATES, (ZERO,)),
        "seed_cycles": (INT, 0),
        "transient_cycles": (INT, 300),
        "record_cycles": (INT, 50),
        "tol": (FLOAT, 1e-5),
        "attractor_tol": (FLOAT, 1e-2),
        "lock_delay": (BOOL, False),
    },
    "basin": {
        "plane": (_Type("plane", lambda s: tuple(x.strip() for x in s.split(",")),
                        lambda v: ",".join(v)), ("x_r", "y1")),
        "x_range": (PAIR, (-2.0, 2.0)),
        "y_range": (PAIR, (-2.0, 2.0)),
        "resolution": (INTS, (51, 51)),
        "references": (STATES, (ZERO, (-2.0, 0.0, 0.0, 0.0))),
        "tol": (FLOAT, 1e-2),
        "max_blocks": (INT, 3),
    },
    "measure": {
        "state": (STATE, (-2.0, 0.0, 0.0, 0.0)),
        "switch_cycle": (INT, 81),
        "stab_cycles": (INT, 100),
        "measure_cycles": (INT, 200),
        "eps_b": (FLOAT, 1e-3),
        "n_p": (INT, 1),
        "gains": (FLOATS, ()),
        "delay_fractions": (FLOATS, ()),
    },
    "psd": {
        "state": (STATE, ZERO),
        "cycles": (INT, 350),
        "component": (_choice("x_r", "y1", "y2", "v_r"), "y2"),
        "samples_per_period": (INT, 64),
        "n_samples": (INT, 2 ** 14),
    },
    "chain-compare": {
        "tau_d": (FLOATS, (0.6, 2.1, 4.4)),
        "N": (INTS, (30,)),
        "horizon": (INT, 300),
        "compare_periods": (INT, 12),
        "state": (STATE, ZERO),
    },
    "continue": {
        "free": (_choice("omega", "tau_d", "gain_K"), "tau_d"),
        "range": (PAIR, (0.45, 2.3)),
        "direction": (_choice("1", "-1", "both"), "both"),
        "seed": (_choice("dde", "chain"), "dde"),
        "seed_state": (STATE, ZERO),
        "seed_transient": (INT, 200),
    },
    "locus": {
        "kind": (_choice("grazing", "pd"), "grazing"),
        "seed_range": (PAIR, (1.9, 2.1)),
        "K_range": (PAIR, (0.4, 0.62)),
        "tau_range": (PAIR, (0.3, 4.0)),
        "ds": (FLOAT, 0.02),
        "seed_state": (STATE, ZERO),
    },
}


# --------------------------------------------------------------------------- configuration


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings from ``key = value`` lines."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        k, v = (x.strip() for x in line.split("=", 1))
        if not k:
            raise ConfigError(f"{source}:{n}: empty key")
        if k in out:
            raise ConfigError(f"{source}:{n}: duplicate key {k!r}")
        out[k] = v
    return out


def resolve_config(task: str, raw: dict[str, str]) -> dict[str, object]:
    """Validate raw entries against the task schema and fill in defaults.

    Keys are ``section.name``; the sections are ``params``, ``numerics``,
    ``chain``, ``continuation``, ``output`` and ``task``. Unknown keys are
    an error. ``manifest.*`` entries (written by a previous run) are
    ignored so that a manifest can be fed back as a configuration.
    """
    if task not in TASK_KEYS:
        raise ConfigError(f"unknown task {task!r}")
    schema = {f"{sec}.{k}": v for sec, keys in SECTIONS.items() for k, v in keys.items()}
    schema["task.name"] = (STR, task)
    schema.update({f"task.{k}": v for k, v in TASK_KEYS[task].items()})
    resolved = {k: d for k, (_, d) in schema.items()}
    for k, v in raw.items():
        if k.startswith("manifest."):
            continue
        if k not in schema:
            raise ConfigError(f"unknown configuration key {k!r}")
        try:
            resolved[k] = schema[k][0].parse(v)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {k}: {v!r} ({exc})") from None
    if resolved["task.name"] != task:
        raise ConfigError(f"configuration is for task {resolved['task.name']!r}, not {task!r}")
    try:
        _params(resolved)
        _numerics(resolved)
        ChainConfig(N=resolved["chain.N"])
        _cont_settings(resolved)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return resolved


def render_config(task: str, cfg: dict[str, object]) -> str:
    schema = {f"{sec}.{k}": v for sec, keys in SECTIONS.items() for k, v in keys.items()}
    schema["task.name"] = (STR, task)
    schema.update({f"task.{k}": v for k, v in TASK_KEYS[task].items()})
    return "".join(f"{k} = {schema[k][0].render(cfg[k])}\n" for k in sorted(cfg))


def _section(cfg, sec):
    n = len(sec) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(sec + ".")}


def _params(cfg) -> Params:
    return Params(**_section(cfg, "params"))


def _numerics(cfg) -> IntegrationSettings:
    return IntegrationSettings(**_section(cfg, "numerics"))


def _cont_settings(cfg) -> ContinuationSettings:
    return ContinuationSettings(**_section(cfg, "continuation"))


# --------------------------------------------------------------------------- output staging


class Outputs:
    """Files of one run, collected in a staging directory."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.out_dir.parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=f".{self.out_dir.name}.", suffix=".part",
                                           dir=self.out_dir.parent))
        self.files: list[str] = []
        self.summary: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        p = self.stage / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def csv(self, name, header, rows):
        return write_csv(self.path(name), header, rows)

    def note(self, line: str):
        self.summary.append(line)

    def write_summary(self):
        if self.summary:
            (self.stage / "summary.txt").write_text("\n".join(self.summary) + "\n")

    def commit(self, manifest_text: str):
        (self.stage / "manifest.txt").write_text(manifest_text)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for p in sorted(self.stage.rglob("*")):
            if p.is_file():
                dst = self.out_dir / p.relative_to(self.stage)
                dst.parent.mkdir(parents=True, exist_ok=True)
                os.replace(p, dst)
        shutil.rmtree(self.stage, ignore_errors=True)

    def abandon(self, task: str):
        """Keep whatever was written under a hidden name for inspection."""
        if not any(self.stage.rglob("*")):
            shutil.rmtree(self.stage, ignore_errors=True)
            return None
        dst = self.out_dir.parent / f".{self.out_dir.name}.incomplete-{task}"
        shutil.rmtree(dst, ignore_errors=True)
        os.replace(self.stage, dst)
        return dst


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_manifest(task: str, cfg: dict, outs: Outputs) -> str:
    text = render_config(task, cfg)
    lines = [text.rstrip("\n")]
    lines.append(f"manifest.version = {__version__}")
    lines.append(f"manifest.schema_version = {SCHEMA_VERSION}")
    lines.append(f"manifest.config_sha256 = {hashlib.sha256(text.encode()).hexdigest()}")
    names = list(outs.files) + (["summary.txt"] if outs.summary else [])
    h = hashlib.sha256()
    for name in sorted(set(names)):
        p = outs.stage / name
        if name.endswith(".csv"):
            header = p.open().readline().strip()
            lines.append(f"manifest.columns.{name} = {header.replace(',', ';')}")
        d = _sha256(p)
        lines.append(f"manifest.sha256.{name} = {d}")
        h.update(f"{name}:{d}\n".encode())
    lines.append(f"manifest.content_sha256 = {h.hexdigest()}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- tasks


def _strobe_label(traj, count, tol=1e-5):
    return classify_attractor(attractor_points(traj, count), tol) if count >= 30 else "unknown"


def run_simulate(cfg, outs: Outputs, jobs: int):
    p, st = _params(cfg), _numerics(cfg)
    T = p.period
    state, cycles, sw = cfg["task.state"], cfg["task.cycles"], cfg["task.switch_cycle"]
    if sw > 0 and p.gain_K > 0:
        free = integrate(p.replace(gain_K=0.0), state, (0.0, sw * T), st)
        tr = switch_on_control(free, sw * T, p.gain_K, cycles * T, p.tau_d, st)
    else:
        tr = integrate(p, state, (0.0, cycles * T), st)
    tr.to_csv(outs.path("trajectory.csv"), cfg["task.samples_per_period"],
              start=cfg["task.record_from_cycle"] * T)
    tr.events_to_csv(outs.path("events.csv"))
    times = tr.strobe_times()
    s = tr.evaluate(times)
    outs.csv("strobe.csv", ["n", "tau", "x1", "y1", "x2", "y2"],
             ([i, t, *row] for i, (t, row) in enumerate(zip(times, s))))
    count = min(cfg["task.strobe_cycles"], len(times) - 1)
    label = _strobe_label(tr, count)
    n_p = cfg["task.n_p"]
    v = average_velocity(tr, n_p, start=(cycles - count) * T)
    impacts = sum(1 for e in tr.events if e.surface == "impact" and e.tau > (cycles - 1) * T)
    outs.note(f"attractor: {label}")
    outs.note(f"v_avg: {v:.6g}")
    outs.note(f"impacts_last_period: {impacts}")


def run_sweep(cfg, outs: Outputs, jobs: int):
    p, st = _params(cfg), _numerics(cfg)
    axis = cfg["task.axis"]
    if axis not in {f.name for f in fields(Params)}:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    seeds = cfg["task.seeds"]
    if cfg["task.seed_cycles"] > 0:
        # free runs handed over as history
        free = p.replace(gain_K=0.0)
        seeds = [integrate(free, s, (0.0, cfg["task.seed_cycles"] * free.period), st) for s in seeds]
    res = stroboscopic_sweep(p, axis, cfg["task.range"], cfg["task.grid"],
                             cfg["task.transient_cycles"], cfg["task.record_cycles"],
                             cfg["task.seeding"], seeds, st, cfg["task.tol"],
                             cfg["task.lock_delay"], jobs, cfg["task.attractor_tol"])
    res.to_csv(outs.path("sweep.csv"))
    tol = cfg["task.attractor_tol"]
    rows, prev, start = [], None, None
    for i, v in enumerate(res.grid):
        labels = tuple(sorted(q.label for q in res.attractors(i, tol)))
        rows.append([v, len(labels), ";".join(labels)])
        if labels != prev:
            if prev is not None:
                outs.note(f"{axis} [{start:.6g}, {res.grid[i - 1]:.6g}]: {len(prev)} {' '.join(prev)}")
            prev, start = labels, v
    outs.note(f"{axis} [{start:.6g}, {res.grid[-1]:.6g}]: {len(prev)} {' '.join(prev)}")
    outs.csv("attractors.csv", [axis, "count", "labels"], rows)
    failed = [q for q in res.points if q.error]
    if failed:
        outs.note(f"failed runs: {len(failed)}")
    # smallest grid value from which every run ends on period-1
    ok = [all(q.label == "period-1" for q in res.at(i)) for i in range(len(res.grid))]
    k = len(ok)
    while k > 0 and ok[k - 1]:
        k -= 1
    if k < len(ok):
        outs.note(f"period-1 for all {axis} >= {res.grid[k]:.6g}")


def run_basin(cfg, outs: Outputs, jobs: int):
    p, st = _params(cfg), _numerics(cfg)
    res = cfg["task.resolution"]
    if len(res) == 1:
        res = (res[0], res[0])
    if len(res) != 2 or min(res) < 2:
        raise ConfigError("task.resolution needs one or two integers >= 2")
    plane = cfg["task.plane"]
    if len(plane) != 2:
        raise ConfigError("task.plane needs two coordinate names")
    refs = reference_attractors(p, cfg["task.references"], st)
    rows = [[name, i, *row] for name, pts in refs.items() for i, row in enumerate(pts)]
    outs.csv("references.csv", ["label", "strobe_index", "x_r", "y1", "y2"], rows)
    try:
        grid = basin_grid(p, refs, (cfg["task.x_range"], cfg["task.y_range"]), tuple(res), plane,
                          st, cfg["task.tol"], cfg["task.max_blocks"], jobs)
    except KeyError as exc:
        raise ConfigError(f"unknown plane coordinate {exc}") from None
    grid.to_csv(outs.path("basin.csv"))
    for k, v in sorted(grid.fractions().items()):
        outs.note(f"{k}: {v:.4f}")


def run_measure(cfg, outs: Outputs, jobs: int):
    p, st = _params(cfg), _numerics(cfg)
    T = p.period
    gains = cfg["task.gains"] or (p.gain_K,)
    # without an explicit delay the feedback compares with one forcing period ago
    fracs = cfg["task.delay_fractions"] or ((p.tau_d / T) if p.tau_d > 0 else 1.0,)
    rows = []
    for K in gains:
        for r in fracs:
            q = p.replace(gain_K=K, tau_d=r * T)
            m, tr = measure_control(q, cfg["task.state"], cfg["task.switch_cycle"],
                                    cfg["task.stab_cycles"], cfg["task.measure_cycles"],
                                    cfg["task.eps_b"], cfg["task.n_p"], settings=st)
            label = _strobe_label(tr, min(50, cfg["task.measure_cycles"]))
            d = m.as_dict()
            rows.append([K, r * T, r, d["E_u"], d["T_conv"], d["mvd"], d["q_c"], d["v_avg"],
                         d["eps_b"], label])
            outs.note(f"K={K:.6g} tau_d={r:.6g}T: {label} E_u={m.E_u:.6g} T_conv={d['T_conv']:.6g} "
                      f"mvd={m.mvd:.3g} q_c={m.q_c:.6g} v_avg={m.v_avg:.6g}")
    outs.csv("measures.csv", ["gain_K", "tau_d", "tau_d_over_T", "E_u", "T_conv", "mvd", "q_c",
                              "v_avg", "eps_b", "label"], rows)


def run_psd(cfg, outs: Outputs, jobs: int):
    p, st = _params(cfg), _numerics(cfg)
    tr = integrate(p, cfg["task.state"], (0.0, cfg["task.cycles"] * p.period), st)
    f, P = trajectory_psd(tr, cfg["task.component"], cfg["task.samples_per_period"], cfg["task.n_samples"])
    outs.csv("psd.csv", ["frequency", "power"], zip(f, P))
    outs.note(f"drive frequency: {p.omega / (2 * math.pi):.6g}")
    outs.note(f"dominant peak: {f[1 + np.argmax(P[1:])]:.6g}")


def run_chain_compare(cfg, outs: Outputs, jobs: int):
    p, st = _params(cfg), _numerics(cfg)
    rows = []
    for td in cfg["task.tau_d"]:
        for N in cfg["task.N"]:
            r = compare_with_dde(p.replace(tau_d=td), ChainConfig(N=N), cfg["task.horizon"],
                                 cfg["task.compare_periods"], settings=st,
                                 initial_state=cfg["task.state"])
            rows.append([r.tau_d, r.N, r.sup_distance, r.periods_compared, r.dde_period, r.chain_period])
            outs.note(f"tau_d={td:.6g} N={N}: discrepancy {r.sup_distance:.6g}")
    outs.csv("discrepancy.csv", ["tau_d", "N", "sup_distance", "periods_compared",
                                 "dde_period", "chain_period"], rows)


def _seed_orbit(cfg, p):
    chain = ChainConfig(N=cfg["chain.N"])
    transient = cfg.get("task.seed_transient", 200)
    if cfg.get("task.seed") == "chain":
        z0 = lift_state(cfg["task.seed_state"], chain, p)
        return orbit_from_simulation(p, chain, z0, transient=transient)
    return orbit_from_dde(p, chain, cfg["task.seed_state"], transient=transient)


def _note_specials(outs, branch):
    for q in branch.points:
        if q.tag:
            vals = " ".join(f"{k}={v:.6g}" for k, v in q.values.items())
            outs.note(f"{q.tag}: {vals} impacts={q.orbit.impacts}")
    outs.note(f"status: {branch.status}")


def run_continue(cfg, outs: Outputs, jobs: int):
    p = _params(cfg)
    free = cfg["task.free"]
    if p.tau_d <= 0:
        raise ConfigError("params.tau_d must be positive (it scales the chain time)")
    lo, hi = cfg["task.range"]
    x0 = getattr(p, free)
    if not lo <= x0 <= hi:
        raise ConfigError(f"params.{free}={x0} lies outside task.range")
    seed = _seed_orbit(cfg, p)
    s = _cont_settings(cfg)
    d = cfg["task.direction"]
    dirs = (-1, 1) if d == "both" else (int(d),)
    points, status = [], []
    for k in dirs:
        br = continue_branch(seed, free, (lo, hi), s, direction=k)
        pts = br.points if k == dirs[0] or not points else br.points[1:]
        points = (pts[::-1] + points) if k < 0 else (points + pts)
        status.append(br.status)
        last = br
    last.points = points
    last.status = "ok" if all(x == "ok" for x in status) else "; ".join(x for x in status if x != "ok")
    last.to_csv(outs.path("branch.csv"))
    outs.csv("multipliers.csv", [free, "index", "re", "im"],
             ([q.values[free], i, m.real, m.imag] for q in points for i, m in enumerate(q.multipliers)))
    _note_specials(outs, last)
    if last.status != "ok":
        raise NonConvergence(last.status)


def run_locus(cfg, outs: Outputs, jobs: int):
    p = _params(cfg)
    if p.tau_d <= 0 or p.gain_K <= 0:
        raise ConfigError("params.tau_d and params.gain_K must be positive")
    lo, hi = cfg["task.seed_range"]
    seed = _seed_orbit(cfg, p)
    kind = cfg["task.kind"]
    tag = "GR" if kind == "grazing" else "PD"
    s = _cont_settings(cfg)
    found = None
    for d in (1, -1):
        br = continue_branch(seed, "tau_d", (lo, hi), s, direction=d)
        hits = br.special(tag)
        if hits:
            found = hits[0]
            break
    if found is None:
        raise NonConvergence(f"no {tag} point on the tau_d branch in [{lo}, {hi}]")
    outs.note(f"seed {tag}: tau_d={found.values['tau_d']:.6g} gain_K={p.gain_K:.6g}")
    if kind == "grazing":
        loc = continue_grazing_locus(found.orbit, cfg["task.K_range"], cfg["task.tau_range"],
                                     ContinuationSettings(ds=cfg["task.ds"], ds_max=2 * cfg["task.ds"]))
    else:
        loc = continue_pd_locus(found.orbit, cfg["task.K_range"], cfg["task.tau_range"], ds=cfg["task.ds"])
    loc.points.sort(key=lambda q: q.values["gain_K"])
    for q in loc.points:
        q.tag = tag
    loc.locus_csv(outs.path("locus.csv"))
    outs.note(f"{tag} locus: {len(loc.points)} points, gain_K in "
              f"[{loc.points[0].values['gain_K']:.6g}, {loc.points[-1].values['gain_K']:.6g}]")
    outs.note(f"status: {loc.status}")


RUNNERS = {
    "simulate": run_simulate, "sweep": run_sweep, "basin": run_basin, "measure": run_measure,
    "psd": run_psd, "chain-compare": run_chain_compare, "continue": run_continue, "locus": run_locus,
}


# --------------------------------------------------------------------------- presets


def _presets() -> dict[str, list[tuple[str, str, dict[str, str]]]]:
    """Figure id -> runs ``(subdirectory, task, raw config)``."""
    T95 = repr(2 * math.pi / 0.95)
    p3 = "-2,0,0,0"
    return {
        "fig2": [
            ("sweep", "sweep", {"task.range": "0.93,0.98", "task.grid": "200",
                                "task.seeds": f"0,0,0,0;{p3}", "task.seeding": "local"}),
            ("psd_0.935", "psd", {"params.omega": "0.935"}),
            ("psd_0.98", "psd", {"params.omega": "0.98"}),
        ],
        "fig3": [
            ("basin", "basin", {"params.omega": "0.95", "task.resolution": "31,31"}),
        ],
        "fig4": [
            ("ksweep", "sweep", {"params.omega": "0.95", "params.tau_d": T95, "task.axis": "gain_K",
                                 "task.range": "0,0.3", "task.grid": "301", "task.seeding": "zero",
                                 "task.seeds": p3, "task.seed_cycles": "81", "task.lock_delay": "true"}),
            ("measures", "measure", {"params.omega": "0.95", "params.tau_d": T95, "params.gain_K": "0.11",
                                     "task.gains": "0.001,0.01,0.05,0.11,0.2,0.24,0.3",
                                     "task.delay_fractions": "1"}),
        ],
        "fig5": [
            ("transition", "simulate", {"params.omega": "0.95", "params.gain_K": "0.11",
                                        "params.tau_d": T95, "task.state": p3, "task.switch_cycle": "81",
                                        "task.cycles": "381", "task.record_from_cycle": "60"}),
        ],
        "fig6": [
            ("delays", "measure", {"params.omega": "0.95", "params.gain_K": "0.11", "params.tau_d": T95,
                                   "task.delay_fractions": "0.0227,0.068,0.0832,0.3175,0.8316,1"}),
        ],
        "fig7": [
            ("branch", "continue", {"params.omega": "0.935", "params.tau_d": "1", "task.free": "omega",
                                    "task.range": "0.93,0.98", "task.seed": "chain",
                                    "task.seed_transient": "100", "continuation.ds": "0.01",
                                    "continuation.ds_max": "0.02"}),
        ],
        "fig8": [
            ("branch", "continue", {"params.omega": "0.97", "params.gain_K": "0.5", "params.tau_d": "0.6",
                                    "task.free": "tau_d", "task.range": "0.45,2.3",
                                    "continuation.ds_max": "0.1"}),
        ],
        "fig9": [
            ("compare", "chain-compare", {"params.omega": "0.97", "params.gain_K": "0.5",
                                          "task.tau_d": "0.6,2.1,4.4", "task.N": "30"}),
        ],
        "fig10": [
            ("grazing", "locus", {"params.omega": "0.97", "params.gain_K": "0.5", "params.tau_d": "2.0",
                                  "task.kind": "grazing", "task.seed_range": "1.9,2.1",
                                  "continuation.ds_max": "0.05"}),
            ("pd", "locus", {"params.omega": "0.97", "params.gain_K": "0.5", "params.tau_d": "0.6",
                             "task.kind": "pd", "task.seed_range": "0.5,0.6", "task.ds": "0.03"}),
        ] + [
            (f"P{i}", "simulate", {"params.omega": "0.97", "params.gain_K": K, "params.tau_d": td,
                                   "task.cycles": "1000"})
            for i, td, K in ((1, "0.5", "0.5"), (2, "0.57", "0.49"), (3, "1.9", "0.53"), (6, "2.1", "0.55"))
        ],
    }


FIGURES = tuple(_presets())


# --------------------------------------------------------------------------- driver


def execute(task: str, raw: dict[str, str], out_dir: Path, jobs: int) -> int:
    """Resolve, run and commit one task; returns the exit code."""
    try:
        cfg = resolve_config(task, raw)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    outs = Outputs(out_dir)
    try:
        RUNNERS[task](cfg, outs, jobs)
    except ConfigError as exc:
        shutil.rmtree(outs.stage, ignore_errors=True)
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (NonConvergence, ContinuationError) as exc:
        where = outs.abandon(task)
        log.error("no convergence: %s%s", exc, f" (partial output in {where})" if where else "")
        return EXIT_NONCONVERGENCE
    except (IntegrationError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        where = outs.abandon(task)
        log.error("numerical failure: %s%s", exc, f" (partial output in {where})" if where else "")
        return EXIT_NUMERICAL
    except BaseException:
        shutil.rmtree(outs.stage, ignore_errors=True)
        raise
    try:
        outs.write_summary()
        outs.commit(build_manifest(task, cfg, outs))
    except BaseException:
        shutil.rmtree(outs.stage, ignore_errors=True)
        raise
    for line in outs.summary:
        print(line)
    return EXIT_OK


def reproduce(figure: str, out_dir: Path, jobs: int, overrides: dict[str, str]) -> int:
    presets = _presets()
    if figure not in presets:
        log.error("unknown figure %r (choose from %s)", figure, ", ".join(presets))
        return EXIT_CONFIG
    runs = presets[figure]
    for name, task, raw in runs:
        try:
            resolve_config(task, {**raw, **overrides})
        except ConfigError as exc:
            log.error("configuration error in %s/%s: %s", figure, name, exc)
            return EXIT_CONFIG
    worst = EXIT_OK
    lines = []
    for name, task, raw in runs:
        print(f"== {figure}/{name} ({task})")
        code = execute(task, {**raw, **overrides}, out_dir / name, jobs)
        worst = max(worst, code)
        summary = out_dir / name / "summary.txt"
        if code == EXIT_OK and summary.exists():
            lines += [f"[{name}] {s}" for s in summary.read_text().splitlines()]
        else:
            lines.append(f"[{name}] failed with exit code {code}")
    (out_dir).mkdir(parents=True, exist_ok=True)
    tmp = out_dir / ".summary.txt.part"
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, out_dir / "summary.txt")
    return worst


def _read_raw(args) -> dict[str, str]:
    raw = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc}") from None
        raw.update(parse_config_text(text, args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (x.strip() for x in item.split("=", 1))
        raw[k] = v
    return raw


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="capsule-dfc", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value configuration file (a manifest works too)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key (repeatable)")
        sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="worker processes (1 = serial, deterministic ordering)")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seedless", action="store_true",
                        help="refuse tasks that need random numbers (none of the built-in ones do)")
        sp.add_argument("-v", "--verbose", action="store_true")

    for t in TASKS:
        common(sub.add_parser(t, help=f"run the {t} task"))
    rp = sub.add_parser("reproduce", help="run the bundled preset for one figure")
    rp.add_argument("figure", choices=FIGURES)
    common(rp)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        log.error("--jobs must be at least 1")
        return EXIT_CONFIG
    try:
        raw = _read_raw(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    if args.command == "reproduce":
        out = Path(args.out or f"out/{args.figure}")
        return reproduce(args.figure, out, args.jobs, raw)
    out = Path(args.out or f"out/{args.command}")
    return execute(args.command, raw, out, args.jobs)


if __name__ == "__main__":
    sys.exit(main())
