"""Matched-condition evaluation of the learned policy and the MPC baseline."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import sim as simulator
from .mpc import DecisionLog, MpcConfig, tlacc_decide
from .pasac import NetworkBundle, select_action
from .sim import HybridAction, SimConfig, TraceWriter

EPISODE_COLUMNS = ("episode", "seed", "return", "mean_speed", "lane_changes", "collided", "steps")
AGGREGATE_COLUMNS = (
    "controller", "density", "episodes", "collision_rate", "mean_speed",
    "lane_changes_total", "mean_return", "reward_diff_pct",
)
SERIES = ("speed", "acceleration", "jerk", "lateral_position", "gap_to_leader")
DEFAULT_DENSITIES = (0.05, 0.11, 0.20)


@dataclass(frozen=True)
class EpisodeMetrics:
    episode: int
    seed: int
    ret: float
    mean_speed: float
    lane_changes: int
    collided: bool
    steps: int

    def row(self):
        return [self.episode, self.seed, repr(self.ret), repr(self.mean_speed), self.lane_changes,
                int(self.collided), self.steps]


@dataclass(frozen=True)
class AggregateMetrics:
    controller: str
    density: float
    episodes: int
    collision_rate: float
    mean_speed: float
    lane_changes_total: int
    mean_return: float
    reward_diff_pct: float | None = None

    def row(self):
        diff = "" if self.reward_diff_pct is None else f"{self.reward_diff_pct:.2f}"
        return [self.controller, repr(self.density), self.episodes, repr(self.collision_rate),
                repr(self.mean_speed), self.lane_changes_total, repr(self.mean_return), diff]


class PasacController:
    name = "pasac"

    def __init__(self, bundle: NetworkBundle, sim_config: SimConfig):
        self.bundle = bundle
        self.sim_config = sim_config

    def act(self, obs, state):
        return select_action(self.bundle, obs, True, None, self.sim_config)


class TlaccController:
    name = "mpc"

    def __init__(self, mpc_config: MpcConfig):
        self.config = mpc_config
        self.last = None

    def act(self, obs, state):
        ego = state.ego
        self.last = tlacc_decide(obs, ego.a, simulator.ego_jerk(state), self.config)
        if self.last.lane_switch:
            return HybridAction.change(self.last.u_d)
        return HybridAction.keep(self.last.u_d)


def episode_seeds(master_seed: int, episodes: int) -> list[int]:
    """Per-episode simulator seeds; identical for every controller given the master seed."""
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(episodes)]


def run_episode(controller, sim_config: SimConfig, seed: int, episode: int = 0,
                trace=None, decision_log=None) -> EpisodeMetrics:
    state = simulator.reset(sim_config, seed)
    obs = simulator.observe(state)
    tracer = TraceWriter(trace) if trace is not None else None
    dlog = DecisionLog(decision_log) if decision_log is not None else None
    total, speed_sum, collided = 0.0, 0.0, False
    while not state.done:
        action = controller.act(obs, state)
        if dlog is not None and getattr(controller, "last", None) is not None:
            dlog.write(state.steps, controller.last)
        result = simulator.step(state, action)
        total += result.reward.total
        speed_sum += state.ego.v
        collided = result.collided
        if tracer is not None:
            tracer.write(state, result)
        obs = result.observation
    # executed flips only; a guarded simulator may refuse a requested change
    return EpisodeMetrics(episode, seed, total, speed_sum / state.steps, state.lane_changes, collided, state.steps)


def aggregate(name, density, rows, baseline_return=None) -> AggregateMetrics:
    n = len(rows)
    mean_ret = float(np.mean([r.ret for r in rows]))
    diff = None
    if baseline_return is not None:
        diff = reward_difference(mean_ret, baseline_return)
    return AggregateMetrics(
        controller=name,
        density=density,
        episodes=n,
        collision_rate=sum(r.collided for r in rows) / n,
        mean_speed=float(np.mean([r.mean_speed for r in rows])),
        lane_changes_total=sum(r.lane_changes for r in rows),
        mean_return=mean_ret,
        reward_diff_pct=diff,
    )


def reward_difference(r_test: float, r_base: float) -> float:
    """Percentage by which the test cost magnitude undercuts the baseline's."""
    if r_base == 0:
        raise ValueError("baseline return must be non-zero")
    return 100.0 * (abs(r_base) - abs(r_test)) / abs(r_base)


def _make_controller(spec):
    kind, payload, sim_config = spec
    if kind == "mpc":
        return TlaccController(payload)
    return PasacController(NetworkBundle.load(payload) if isinstance(payload, (str, Path)) else payload, sim_config)


def _episode_job(args):
    spec, sim_config, seed, episode = args
    return run_episode(_make_controller(spec), sim_config, seed, episode)


def evaluate(controller_spec, sim_config: SimConfig, episodes: int, seed: int, jobs: int = 1,
             trace_dir=None) -> tuple[AggregateMetrics, list[EpisodeMetrics]]:
    """Run ``episodes`` episodes; ``controller_spec`` is ("mpc", MpcConfig) or ("pasac", bundle or path)."""
    kind = controller_spec[0]
    spec = (kind, controller_spec[1], sim_config)
    seeds = episode_seeds(seed, episodes)
    if trace_dir is not None:
        trace_dir = Path(trace_dir)
        trace_dir.mkdir(parents=True, exist_ok=True)
        ctrl = _make_controller(spec)
        rows = []
        for i, s in enumerate(seeds):
            with open(trace_dir / f"{kind}_episode{i:04d}.csv", "w", newline="") as fh:
                if kind == "mpc":
                    with open(trace_dir / f"{kind}_episode{i:04d}_decisions.csv", "w", newline="") as dl:
                        rows.append(run_episode(ctrl, sim_config, s, i, trace=fh, decision_log=dl))
                else:
                    rows.append(run_episode(ctrl, sim_config, s, i, trace=fh))
    elif jobs > 1 and episodes > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_episode_job, [(spec, sim_config, s, i) for i, s in enumerate(seeds)]))
    else:
        ctrl = _make_controller(spec)
        rows = [run_episode(ctrl, sim_config, s, i) for i, s in enumerate(seeds)]
    rows.sort(key=lambda r: r.episode)
    return aggregate(kind, sim_config.flow_density, rows), rows


def default_jobs() -> int:
    return max(1, os.cpu_count() or 1)


def compare(bundle_or_path, sim_config, mpc_config, episodes, seed, jobs=1):
    """PASAC against TLACC on identical episode seeds; the MPC row is the baseline."""
    mpc_agg, mpc_rows = evaluate(("mpc", mpc_config), sim_config, episodes, seed, jobs)
    pas_agg, pas_rows = evaluate(("pasac", bundle_or_path), sim_config, episodes, seed, jobs)
    pas_agg = aggregate("pasac", sim_config.flow_density, pas_rows, baseline_return=mpc_agg.mean_return)
    mpc_agg = aggregate("mpc", sim_config.flow_density, mpc_rows, baseline_return=mpc_agg.mean_return)
    return [pas_agg, mpc_agg], {"pasac": pas_rows, "mpc": mpc_rows}


def sweep(bundle_or_path, sim_config, mpc_config, densities=DEFAULT_DENSITIES, episodes=100, seed=0, jobs=1):
    table, per_episode = [], {}
    for density in densities:
        cfg = simulator.with_density(sim_config, density)
        aggs, rows = compare(bundle_or_path, cfg, mpc_config, episodes, seed, jobs)
        table.extend(aggs)
        per_episode[density] = rows
    return table, per_episode


def lane_change_trend(table) -> dict:
    """Lane-change totals per controller in density order, and whether they strictly increase."""
    out = {}
    for name in sorted({a.controller for a in table}):
        counts = [a.lane_changes_total for a in sorted(table, key=lambda a: a.density) if a.controller == name]
        out[name] = {"counts": counts, "increasing": all(b > a for a, b in zip(counts, counts[1:]))}
    return out


def write_csv(path, columns, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(row.row() if hasattr(row, "row") else row)
    Path(path).write_text(buf.getvalue())


def read_trace(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != simulator.TRACE_COLUMNS:
            raise ValueError(f"{path}: not a per-step trace file")
        return list(reader)


def export_traces(trace_dir, out_dir, lane_width: float = 3.2, dt: float = 0.1, charts: bool = True) -> list[Path]:
    """Split per-step traces into one time series per quantity, with an SVG line chart each."""
    trace_dir, out_dir = Path(trace_dir), Path(out_dir)
    traces = sorted(p for p in trace_dir.glob("*.csv") if not p.name.endswith("_decisions.csv"))
    if not traces:
        raise FileNotFoundError(f"no trace files in {trace_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in traces:
        rows = read_trace(path)
        t = [int(r["step"]) for r in rows]
        columns = {
            "speed": [float(r["ego_v"]) for r in rows],
            "acceleration": [float(r["ego_a"]) for r in rows],
            "jerk": [float(r["jerk"]) for r in rows],
            "lateral_position": [int(r["ego_lane"]) * lane_width for r in rows],
            "gap_to_leader": [float(r["d_p"]) for r in rows],
        }
        for name in SERIES:
            target = out_dir / f"{path.stem}_{name}.csv"
            write_csv(target, ("step", "time_s", name),
                      [[k, repr(round(k * dt, 10)), repr(v)] for k, v in zip(t, columns[name])])
            written.append(target)
            if charts:
                svg = target.with_suffix(".svg")
                _line_chart([k * dt for k in t], columns[name], name, svg)
                written.append(svg)
    return written


def _line_chart(x, y, label, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(x, y, lw=1.0)
    ax.set_xlabel("time (s)")
    ax.set_ylabel(label.replace("_", " "))
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def metrics_dict(agg: AggregateMetrics) -> dict:
    return asdict(agg)
