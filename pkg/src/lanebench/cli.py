"""Batch command-line entry point: train, eval, compare, sweep, export.

Every option lives in one flat config document (JSON). A config file is read
first, command-line flags override it, and the fully resolved document is
written into ``manifest.json`` next to the outputs. A manifest is itself a
valid ``--config``, so ``<cmd> --config out/manifest.json --out other`` repeats
a run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from . import harness
from .mpc import MpcConfig
from .nn import CheckpointError
from .pasac import NetworkBundle, PasacHyper, train, write_curve
from .sim import SimConfig, SimError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_BAD_CONFIG = 3
EXIT_UNREADABLE = 4
EXIT_CHECKPOINT = 5

COMMANDS = ("train", "eval", "compare", "sweep", "export")
MANIFEST = "manifest.json"
CHECKPOINT = "pasac.ckpt"

_SIM = SimConfig()
_HYP = PasacHyper()
_MPC = MpcConfig()

log = logging.getLogger("lanebench")


class UsageError(Exception):
    pass


class RunConfig(BaseModel):
    """Flat run configuration; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # simulator
    road_length: float = Field(_SIM.road_length, gt=0)
    lane_width: float = Field(_SIM.lane_width, gt=0)
    dt: float = Field(_SIM.dt, gt=0)
    a_min: float = Field(_SIM.a_min, lt=0)
    a_max: float = Field(_SIM.a_max, gt=0)
    v_safe: float = Field(_SIM.v_safe, gt=0)
    d_safe: float = Field(_SIM.d_safe, gt=0)
    r_collision: float = Field(_SIM.r_collision, le=0)
    w0: float = Field(_SIM.w0, ge=0)
    w1: float = Field(_SIM.w1, ge=0)
    w2: float = Field(_SIM.w2, ge=0)
    w3: float = Field(_SIM.w3, ge=0)
    w4: float = Field(_SIM.w4, ge=0)
    flow_density: float = Field(_SIM.flow_density, ge=0)
    sensing_range: float = Field(_SIM.sensing_range, gt=0)
    vehicle_length: float = Field(_SIM.vehicle_length, gt=0)
    ego_init_speed: float = Field(_SIM.ego_init_speed, ge=0)
    leader_init_speed: float = Field(_SIM.leader_init_speed, ge=0)
    leader_init_gap: float = Field(_SIM.leader_init_gap, ge=0)
    spawn_buffer: float = Field(_SIM.spawn_buffer, ge=0)
    max_steps: int = Field(_SIM.max_steps, ge=1)
    idm_headway: float = Field(_SIM.idm_headway, gt=0)
    idm_min_gap: float = Field(_SIM.idm_min_gap, ge=0)
    idm_comfort_brake: float = Field(_SIM.idm_comfort_brake, gt=0)
    idm_max_accel: float = Field(_SIM.idm_max_accel, gt=0)
    idm_exponent: float = Field(_SIM.idm_exponent, gt=0)
    safe_speed_guard: bool = _SIM.safe_speed_guard
    lane_change_guard: bool = _SIM.lane_change_guard
    guard_tau: float = Field(_SIM.guard_tau, gt=0)
    guard_min_gap: float = Field(_SIM.guard_min_gap, ge=0)

    # agent
    gamma: float = Field(_HYP.gamma, ge=0, le=1)
    tau: float = Field(_HYP.tau, gt=0, le=1)
    alpha: float = Field(_HYP.alpha, ge=0)
    actor_lr: float = Field(_HYP.actor_lr, ge=0)
    critic_lr: float = Field(_HYP.critic_lr, ge=0)
    batch_size: int = Field(_HYP.batch_size, ge=1)
    learning_starts: int = Field(_HYP.learning_starts, ge=0)
    total_steps: int = Field(_HYP.total_steps, ge=1)
    buffer_size: int = Field(_HYP.buffer_size, ge=1)
    hidden: list[int] = Field(default_factory=lambda: list(_HYP.hidden))
    activation: Literal["relu", "tanh"] = "relu"

    # mpc
    horizon: int = Field(_MPC.horizon, ge=1)
    j_th: float = Field(_MPC.j_th, gt=0)
    k_p: float = Field(_MPC.k_p, ge=0)
    seed_levels: int = Field(_MPC.seed_levels, ge=2)
    init_step: float = Field(_MPC.init_step, gt=0)
    max_sweeps: int = Field(_MPC.max_sweeps, ge=0)
    tol: float = Field(_MPC.tol, gt=0)
    literal_model: bool = _MPC.literal_model

    # harness
    seed: int = Field(0, ge=0)
    episodes: int = Field(100, ge=1)
    densities: list[float] = Field(default_factory=lambda: list(harness.DEFAULT_DENSITIES))
    controller: Literal["pasac", "mpc"] = "mpc"
    checkpoint: Optional[str] = None
    traces: bool = False
    trace_dir: Optional[str] = None
    charts: bool = True

    @field_validator("hidden")
    @classmethod
    def _hidden_positive(cls, v):
        if not v or any(n < 1 for n in v):
            raise ValueError("hidden sizes must be a non-empty list of positive integers")
        return v

    @field_validator("densities")
    @classmethod
    def _densities_valid(cls, v):
        if not v or any(d < 0 for d in v):
            raise ValueError("densities must be a non-empty list of non-negative numbers")
        return v

    def sim_config(self, density: float | None = None) -> SimConfig:
        names = {f.name for f in fields(SimConfig)}
        values = {k: v for k, v in self.model_dump().items() if k in names}
        if density is not None:
            values["flow_density"] = density
        return SimConfig(**values).validate()

    def hyper(self) -> PasacHyper:
        names = {f.name for f in fields(PasacHyper)}
        values = {k: v for k, v in self.model_dump().items() if k in names}
        values["hidden"] = tuple(self.hidden)
        return PasacHyper(**values).validate()

    def mpc_config(self) -> MpcConfig:
        return MpcConfig.from_sim(
            self.sim_config(), horizon=self.horizon, j_th=self.j_th, k_p=self.k_p,
            seed_levels=self.seed_levels, init_step=self.init_step, max_sweeps=self.max_sweeps,
            tol=self.tol, literal_model=self.literal_model,
        )


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, indent=2, allow_nan=False) + "\n"


def dump_config(cfg: RunConfig) -> str:
    """Canonical serialisation; parsing it back and dumping again is byte-identical."""
    return canonical_json(cfg.model_dump())


def _config_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        if err["type"] == "extra_forbidden":
            parts.append(f"unknown config key '{key}'")
        else:
            parts.append(f"invalid value for '{key}': {err['msg']}")
    return "; ".join(parts)


class ConfigError(Exception):
    pass


def parse_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_config_error(exc)) from None


def read_config_file(path) -> dict:
    """Load a config file or a manifest (whose ``config`` section is used)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise OSError(f"cannot parse config {path}: {exc.msg} at line {exc.lineno}") from None
    if isinstance(data, dict) and "manifest_version" in data:
        data = data.get("config", {})
    return data


# flag name -> config key; flags default to None so only explicit ones override
_FLAG_KEYS = {
    "seed": "seed",
    "steps": "total_steps",
    "density": "flow_density",
    "episodes": "episodes",
    "controller": "controller",
    "pasac": "checkpoint",
    "checkpoint": "checkpoint",
    "hidden": "hidden",
    "densities": "densities",
    "horizon": "horizon",
    "traces": "traces",
    "trace_dir": "trace_dir",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lanebench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lanebench {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True

    def common(p):
        p.add_argument("--config", help="JSON config file or a previous manifest.json")
        p.add_argument("--out", default=None, help="output directory (default: runs/<command>)")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key; VALUE is parsed as JSON when possible")
        p.add_argument("-v", "--verbose", action="store_true")

    def parallel(p):
        p.add_argument("--jobs", type=int, default=None, help="worker processes (default: CPU count)")

    p = sub.add_parser("train", help="train a PASAC agent")
    common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--density", type=float)
    p.add_argument("--hidden", type=int, nargs="+")

    p = sub.add_parser("eval", help="evaluate one controller")
    common(p)
    parallel(p)
    p.add_argument("--controller", choices=("pasac", "mpc"))
    p.add_argument("--checkpoint")
    p.add_argument("--density", type=float)
    p.add_argument("--episodes", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--traces", action="store_true", default=None, help="write per-step traces")

    p = sub.add_parser("compare", help="PASAC against the MPC baseline on identical seeds")
    common(p)
    parallel(p)
    p.add_argument("--pasac", help="PASAC checkpoint")
    p.add_argument("--density", type=float)
    p.add_argument("--episodes", type=int)
    p.add_argument("--horizon", type=int)

    p = sub.add_parser("sweep", help="compare across traffic densities")
    common(p)
    parallel(p)
    p.add_argument("--pasac", help="PASAC checkpoint")
    p.add_argument("--densities", type=float, nargs="+")
    p.add_argument("--episodes", type=int)
    p.add_argument("--horizon", type=int)

    p = sub.add_parser("export", help="time series and charts from per-step traces")
    common(p)
    p.add_argument("--trace-dir", dest="trace_dir", help="directory holding per-step trace CSVs")
    return parser


def _parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_config(args) -> RunConfig:
    data = read_config_file(args.config) if args.config else {}
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    data = dict(data)
    for item in args.set:
        key, value = _parse_override(item)
        data[key] = value
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    if args.command == "train":
        data.setdefault("controller", "pasac")
    return parse_config(data)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import numba
    import pydantic

    return {
        "lanebench": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
        "pydantic": pydantic.__version__,
    }


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, outputs, argv, extra=None) -> Path:
    out_dir = Path(out_dir)
    hashes = {}
    for p in sorted(outputs, key=lambda q: str(q)):
        p = Path(p)
        hashes[p.relative_to(out_dir).as_posix() if p.is_relative_to(out_dir) else str(p)] = sha256_file(p)
    manifest = {
        "manifest_version": 1,
        "command": command,
        "argv": list(argv),
        "seed": cfg.seed,
        "config": cfg.model_dump(),
        "versions": _versions(),
        "outputs": hashes,
    }
    if extra:
        manifest.update(extra)
    path = out_dir / MANIFEST
    path.write_text(canonical_json(manifest))
    return path


def _load_bundle(path) -> NetworkBundle:
    if not path:
        raise CheckpointError("a PASAC checkpoint is required (--pasac/--checkpoint or config key 'checkpoint')")
    try:
        return NetworkBundle.load(path)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except IsADirectoryError:
        raise CheckpointError(f"checkpoint is a directory: {path}") from None


def _jobs(args) -> int:
    jobs = getattr(args, "jobs", None)
    if jobs is None:
        return harness.default_jobs()
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    return jobs


def cmd_train(cfg: RunConfig, args, out: Path):
    sim_cfg, hyper = cfg.sim_config(), cfg.hyper()
    result = train(sim_cfg, hyper, cfg.seed, bundle=NetworkBundle.create(hyper.hidden, cfg.seed, cfg.activation),
                   diagnostic_path=out / "diverged.ckpt")
    ckpt = out / CHECKPOINT
    result.bundle.save(ckpt)
    curve = out / "training_curve.csv"
    with open(curve, "w", newline="") as fh:
        write_curve(result.curve, fh)
    return [ckpt, curve], {"wall_seconds": round(result.wall_seconds, 3), "gradient_updates": result.updates}


def _controller_spec(cfg: RunConfig, controller: str):
    if controller == "mpc":
        return ("mpc", cfg.mpc_config())
    _load_bundle(cfg.checkpoint)  # fail early with a clear diagnostic
    return ("pasac", str(cfg.checkpoint))


def cmd_eval(cfg: RunConfig, args, out: Path):
    spec = _controller_spec(cfg, cfg.controller)
    trace_dir = out / "traces" if cfg.traces else None
    agg, rows = harness.evaluate(spec, cfg.sim_config(), cfg.episodes, cfg.seed, _jobs(args), trace_dir)
    episodes, aggregate = out / "episodes.csv", out / "aggregate.csv"
    harness.write_csv(episodes, harness.EPISODE_COLUMNS, rows)
    harness.write_csv(aggregate, harness.AGGREGATE_COLUMNS, [agg])
    outputs = [episodes, aggregate]
    if trace_dir is not None:
        outputs += sorted(trace_dir.glob("*.csv"))
    return outputs, None


def cmd_compare(cfg: RunConfig, args, out: Path):
    _load_bundle(cfg.checkpoint)
    table, rows = harness.compare(cfg.checkpoint, cfg.sim_config(),
                                  cfg.mpc_config(), cfg.episodes, cfg.seed, _jobs(args))
    outputs = [out / "compare.csv"]
    harness.write_csv(outputs[0], harness.AGGREGATE_COLUMNS, table)
    for name in ("pasac", "mpc"):
        path = out / f"episodes_{name}.csv"
        harness.write_csv(path, harness.EPISODE_COLUMNS, rows[name])
        outputs.append(path)
    return outputs, None


def cmd_sweep(cfg: RunConfig, args, out: Path):
    _load_bundle(cfg.checkpoint)
    table, per_density = harness.sweep(cfg.checkpoint, cfg.sim_config(), cfg.mpc_config(),
                                       cfg.densities, cfg.episodes, cfg.seed, _jobs(args))
    outputs = [out / "sweep.csv"]
    harness.write_csv(outputs[0], harness.AGGREGATE_COLUMNS, table)
    for density, rows in per_density.items():
        for name in ("pasac", "mpc"):
            path = out / f"episodes_{name}_{density!r}.csv"
            harness.write_csv(path, harness.EPISODE_COLUMNS, rows[name])
            outputs.append(path)
    trend = out / "lane_change_trend.json"
    trend.write_text(canonical_json(harness.lane_change_trend(table)))
    outputs.append(trend)
    return outputs, None


def cmd_export(cfg: RunConfig, args, out: Path):
    if not cfg.trace_dir:
        raise UsageError("export needs --trace-dir (or config key 'trace_dir')")
    if not Path(cfg.trace_dir).is_dir():
        raise FileNotFoundError(f"trace directory not found: {cfg.trace_dir}")
    written = harness.export_traces(cfg.trace_dir, out, cfg.lane_width, cfg.dt, charts=cfg.charts)
    return written, None


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "compare": cmd_compare, "sweep": cmd_sweep, "export": cmd_export}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed its message
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    def fail(code, msg):
        print(f"lanebench {args.command}: error: {msg}", file=sys.stderr)
        return code

    try:
        cfg = resolve_config(args)
        cfg.sim_config()
        if args.command in ("train",):
            cfg.hyper()
        else:
            cfg.mpc_config()
    except OSError as exc:
        return fail(EXIT_UNREADABLE, str(exc))
    except ConfigError as exc:
        return fail(EXIT_BAD_CONFIG, str(exc))
    except (SimError, ValueError) as exc:
        return fail(EXIT_BAD_CONFIG, str(exc))

    out = Path(args.out) if args.out else Path("runs") / args.command
    try:
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        outputs, extra = HANDLERS[args.command](cfg, args, out)
        extra = dict(extra or {})
        extra.setdefault("wall_seconds", round(time.perf_counter() - t0, 3))
        write_manifest(out, args.command, cfg, outputs, argv, extra)
    except UsageError as exc:
        return fail(EXIT_USAGE, str(exc))
    except CheckpointError as exc:
        return fail(EXIT_CHECKPOINT, str(exc))
    except FileNotFoundError as exc:
        return fail(EXIT_UNREADABLE, str(exc))
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic for anything else
        log.debug("failure", exc_info=True)
        return fail(EXIT_FAILURE, f"{type(exc).__name__}: {exc}")
    print(out / MANIFEST)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
