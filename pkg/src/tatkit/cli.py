"""Command-line entry point: generate, train, eval and trace.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional
from xml.sax.saxutils import escape

import numpy as np

from .decoder import DecoderConfig
from .numgrid import UsageError
from .perception import CHANNELS, GRID, RESOLUTION, EncoderConfig
from .pilot import PidGains, PilotConfig
from .simworld import (ExpertConfig, ExpertDriver, Scenario, SimConfig, generate_scenario,
                       run_episode, score)
from .trainer import (CollectConfig, Dataset, GruBaselineConfig, NonFiniteLoss, PolicyConfig,
                      TrainConfig, collect, evaluate_closedloop, evaluate_openloop,
                      load_checkpoint, save_checkpoint, train, write_loss_log)

log = logging.getLogger("tatkit")

SEED_ENV = "TATKIT_SEED"
CONFIG_NAME = "config.json"


class ConfigError(UsageError):
    """Malformed or unknown configuration keys."""


# ------------------------------------------------------------------ config

@dataclass
class DataConfig:
    obstacles: str = "alternate"  # none | all | alternate
    steer_noise: float = 0.1
    n_waypoints: int = 4
    shard_size: int = 4096
    selftest_routes: int = 3


@dataclass
class TrainSection:
    epochs: int = 100
    learning_rate: float = 1e-4
    milestones: list = field(default_factory=lambda: [40, 70])
    gamma: float = 0.1
    batch_size: int = 32
    weight_decay: float = 0.01
    val_fraction: float = 0.1
    max_steps: Optional[int] = None
    sample_limit: Optional[int] = None  # evenly spaced subset, e.g. 32 for the overfit check


@dataclass
class RunConfig:
    seed: int = 0
    variant: str = "tat_ct"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    gru: GruBaselineConfig = field(default_factory=GruBaselineConfig)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataConfig = field(default_factory=DataConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    pilot: PilotConfig = field(default_factory=PilotConfig.tracking)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs, learning_rate=t.learning_rate,
                           milestones=tuple(t.milestones), gamma=t.gamma,
                           batch_size=t.batch_size, weight_decay=t.weight_decay, seed=self.seed,
                           variant=self.variant, val_fraction=t.val_fraction,
                           max_steps=t.max_steps)

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(variant=self.variant, encoder=self.encoder, decoder=self.decoder,
                            gru=self.gru, seed=self.seed)

    def collect_config(self) -> CollectConfig:
        d = self.data
        return CollectConfig(n_waypoints=d.n_waypoints, steer_noise=d.steer_noise,
                             shard_size=d.shard_size, sim=self.sim, expert=self.expert)


def _build(cls, values, where: str):
    """Instantiate dataclass ``cls`` from a dict, rejecting unknown keys."""
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object, got {type(values).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in values.items():
        sub = SECTIONS.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


SECTIONS = {
    (RunConfig, "encoder"): EncoderConfig,
    (RunConfig, "decoder"): DecoderConfig,
    (RunConfig, "gru"): GruBaselineConfig,
    (RunConfig, "train"): TrainSection,
    (RunConfig, "data"): DataConfig,
    (RunConfig, "sim"): SimConfig,
    (RunConfig, "expert"): ExpertConfig,
    (RunConfig, "pilot"): PilotConfig,
    (PilotConfig, "lateral"): PidGains,
    (PilotConfig, "longitudinal"): PidGains,
}


def load_config(path: Optional[str], env=os.environ) -> RunConfig:
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = _build(RunConfig, raw, "config")
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    if cfg.data.obstacles not in ("none", "all", "alternate"):
        raise ConfigError("data.obstacles must be none, all or alternate")
    return cfg


def write_config(out: Path, cfg: RunConfig, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.to_dict()
    if extra:
        d["invocation"] = extra
    (out / CONFIG_NAME).write_text(json.dumps(d, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------- commands

def route_scenarios(n: int, length: str, seed: int, obstacles: str) -> list[Scenario]:
    """Route seeds ``seed .. seed + n - 1``; obstacle placement per ``obstacles``."""
    out = []
    for i in range(n):
        with_obs = obstacles == "all" or (obstacles == "alternate" and i % 2 == 1)
        out.append(generate_scenario(seed + i, length, obstacles=with_obs))
    return out


def expert_selftest(cfg: RunConfig, n: int) -> list:
    """Route names on which the noise-free expert was not perfect."""
    failures = []
    for sc in route_scenarios(n, "short", 10**6 + cfg.seed, "none"):
        ep = run_episode(sc, ExpertDriver(cfg.expert), cfg.sim, record_trace=False)
        r = score([ep], cfg.sim.penalties).routes[0]
        if r.rc != 100.0 or r.is_ != 1.0:
            failures.append(f"{sc.name} (RC {r.rc:.2f}, IS {r.is_:.3f}, {r.status})")
    return failures


def cmd_generate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    seed = cfg.seed if args.seed is None else args.seed
    failures = expert_selftest(cfg, cfg.data.selftest_routes)
    if failures:
        print("expert self-test failed on: " + "; ".join(failures), file=sys.stderr)
        return 1
    scenarios = route_scenarios(args.routes, args.length, seed, cfg.data.obstacles)
    routes_dir = out / "routes"
    routes_dir.mkdir(parents=True, exist_ok=True)
    for sc in scenarios:
        sc.save(routes_dir / f"{sc.name}.json")
    write_config(out, cfg, command="generate", routes=args.routes, length=args.length, seed=seed,
                 routes_only=args.routes_only)
    if args.routes_only:
        print(f"wrote {len(scenarios)} routes to {routes_dir}")
        return 0
    ds = collect(scenarios, out, cfg.collect_config(), jobs=args.jobs)
    discarded = len(ds.manifest["discarded"])
    print(f"samples: {len(ds)} from {ds.manifest['n_routes']} routes ({discarded} discarded)")
    return 0


def even_subset(ds: Dataset, limit: Optional[int]) -> Dataset:
    if limit is None or limit >= len(ds):
        return ds
    idx = np.linspace(0, len(ds) - 1, limit).round().astype(int)
    return ds.subset(idx.tolist())


def cmd_train(args, cfg: RunConfig) -> int:
    if args.variant:
        cfg.variant = args.variant
    try:
        ds = Dataset.load(args.data)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    write_config(out, cfg, command="train", data=str(args.data), variant=cfg.variant)
    tcfg = cfg.train_config()
    ds = even_subset(ds, cfg.train.sample_limit)
    if cfg.train.sample_limit is not None:
        train_set, val_set = ds, Dataset([])
    else:
        train_set, val_set = ds.split(tcfg.val_fraction, tcfg.seed)
    log.info("training %s on %d samples (%d validation)", cfg.variant, len(train_set), len(val_set))
    on_epoch = (lambda e: log.info("epoch %d train %.4f val %s", e["epoch"], e["train_loss"],
                                   e["val_loss"]))
    try:
        res = train(tcfg, train_set, cfg.policy_config(), validation=val_set, on_epoch=on_epoch)
    except NonFiniteLoss as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    write_loss_log(out / "loss.jsonl", res.history)
    train_err = evaluate_openloop(res.policy, train_set)
    summary = {"variant": cfg.variant, "steps": res.steps, "final_train_loss": res.final_loss,
               "train_error_per_index": train_err.tolist(),
               "train_mean_error": float(train_err.mean())}
    if len(val_set):
        val_err = evaluate_openloop(res.policy, val_set)
        summary["val_error_per_index"] = val_err.tolist()
        summary["val_mean_error"] = float(val_err.mean())
    save_checkpoint(out / "model.tatc", res.policy, tcfg.to_dict(),
                    extra={"data_config_hash": ds.manifest.get("config_hash"),
                           "pilot": cfg.pilot.to_dict()})
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    print(f"final mean error (train): {summary['train_mean_error']:.4f} m")
    if "val_mean_error" in summary:
        print(f"final mean error (val): {summary['val_mean_error']:.4f} m")
    return 0


def load_routes(path) -> list[Scenario]:
    d = Path(path)
    if (d / "routes").is_dir():
        d = d / "routes"
    files = sorted(d.glob("*.json"))
    files = [f for f in files if f.name != CONFIG_NAME]
    if not files:
        raise UsageError(f"no route files in {path}")
    return [Scenario.load(f) for f in files]


def cmd_eval(args, cfg: RunConfig) -> int:
    if args.checkpoint is None and not args.oracle:
        raise UsageError("eval needs --checkpoint or --oracle")
    scenarios = load_routes(args.routes)
    policy = None
    if args.checkpoint is not None and not args.oracle:
        policy, header = load_checkpoint(args.checkpoint)
        if "pilot" in header.get("extra", {}) and args.config is None:
            cfg.pilot = _build(PilotConfig, header["extra"]["pilot"], "checkpoint.pilot")
    report_path = Path(args.report)
    out = report_path.parent
    traces = Path(args.traces) if args.traces else out / (report_path.stem + "-traces")
    write_config(out, cfg, command="eval", checkpoint=args.checkpoint, routes=str(args.routes),
                 oracle=args.oracle)
    report, _ = evaluate_closedloop(policy, scenarios, cfg.sim, cfg.pilot, jobs=args.jobs,
                                    trace_dir=traces, oracle=args.oracle)
    report_path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    table = report.table()
    report_path.with_suffix(".txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_trace(args, cfg: RunConfig) -> int:
    policy, _ = load_checkpoint(args.checkpoint)
    if policy.decoder is None:
        raise UsageError("the GRU baseline has no attention to trace")
    ds = Dataset.load(args.data)
    if not 0 <= args.sample < len(ds):
        raise UsageError(f"sample {args.sample} out of range (dataset has {len(ds)})")
    out = Path(args.out)
    write_config(out, cfg, command="trace", checkpoint=args.checkpoint, sample=args.sample)
    hist, target, gt = ds.batch([args.sample], dtype=policy.config.encoder.dtype)
    pred, trace = policy.attention_trace(hist, target)
    waypoints = np.asarray(pred.data[0], dtype=np.float64)
    z = waypoints.shape[0]
    side = policy.config.encoder.output_size
    tat = policy.decoder.config.target_conditioning == "attention"
    columns = [f"w{i + 1}" for i in range(z)] + (["target"] if tat else [])
    doc = {
        "sample": args.sample, "variant": policy.variant, "columns": columns,
        "target_point": target[0].astype(float).tolist(), "waypoints": waypoints.tolist(),
        "ground_truth": gt[0].astype(float).tolist(),
        "self": [w[0].astype(float).tolist() for w in trace.self_weights],
        "cross": [w[0].astype(float).reshape(w.shape[1], z, side, side).tolist()
                  for w in trace.cross_weights],
    }
    (out / "attention.json").write_text(json.dumps(doc, sort_keys=True) + "\n")
    cross = np.mean([w[0].astype(np.float64) for w in trace.cross_weights], axis=(0, 1))
    heat = cross.mean(axis=0).reshape(side, side)
    (out / "attention.svg").write_text(render_svg(ds[args.sample].dense(), heat, waypoints,
                                                  target[0].astype(np.float64)))
    print(f"wrote {out / 'attention.json'} and {out / 'attention.svg'}")
    return 0


# -------------------------------------------------------------------- plots

def ego_to_pixel(p, scale: float) -> tuple[float, float]:
    """Ego (x front, y left) to SVG pixels on the histogram canvas."""
    col = (16.0 - p[1]) / RESOLUTION
    row = (32.0 - p[0]) / RESOLUTION
    return col * scale, row * scale


def render_svg(hist: np.ndarray, heat: np.ndarray, waypoints: np.ndarray, target: np.ndarray,
               scale: float = 2.0) -> str:
    """BEV occupancy in grey, cross-attention as a red heat layer, waypoints blue, target red."""
    size = GRID * scale
    cell = GRID / heat.shape[0] * scale
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:g}" height="{size:g}" '
             f'viewBox="0 0 {size:g} {size:g}">',
             f'<rect width="{size:g}" height="{size:g}" fill="white"/>']
    peak = float(heat.max()) or 1.0
    for (r, c), w in np.ndenumerate(heat):
        parts.append(f'<rect x="{c * cell:g}" y="{r * cell:g}" width="{cell:g}" height="{cell:g}" '
                     f'fill="orange" fill-opacity="{0.6 * w / peak:.4f}"/>')
    occupied = np.argwhere(hist.sum(axis=-1) > 0)
    for r, c in occupied:
        parts.append(f'<rect x="{c * scale:g}" y="{r * scale:g}" width="{scale:g}" '
                     f'height="{scale:g}" fill="#444"/>')
    for i, w in enumerate(waypoints):
        x, y = ego_to_pixel(w, scale)
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="blue">'
                     f'<title>{escape(f"waypoint {i + 1}")}</title></circle>')
    tx, ty = ego_to_pixel(np.clip(target, [-1.0, -16.0], [32.0, 16.0]), scale)
    parts.append(f'<circle cx="{tx:.2f}" cy="{ty:.2f}" r="5" fill="red">'
                 f'<title>target-point</title></circle>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tatkit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate routes and an expert dataset")
    g.add_argument("--routes", type=int, required=True)
    g.add_argument("--length", choices=("short", "long"), default="short")
    g.add_argument("--seed", type=int, default=None, help="first route seed (default: config seed)")
    g.add_argument("--out", required=True)
    g.add_argument("--routes-only", action="store_true", help="write route files, skip collection")
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--config")

    t = sub.add_parser("train", help="train a policy on a dataset")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=("tat_ct", "tat_rt", "tet", "gru"))

    e = sub.add_parser("eval", help="closed-loop evaluation on route files")
    e.add_argument("--checkpoint")
    e.add_argument("--routes", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--oracle", action="store_true", help="drive with expert waypoints")
    e.add_argument("--traces", help="trace directory (default: next to the report)")
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--config")

    a = sub.add_parser("trace", help="export attention weights for one sample")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--sample", type=int, required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "trace": cmd_trace}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be at least 1")
        if getattr(args, "routes", 1) is not None and args.command == "generate" and args.routes < 0:
            raise UsageError("--routes must be non-negative")
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"tatkit {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report, exit 1
        log.debug("failure", exc_info=True)
        print(f"tatkit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
