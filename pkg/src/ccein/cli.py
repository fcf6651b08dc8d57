"""Command-line front end.

Every command writes a run directory::

    <out>/config/config.yaml   resolved configuration
    <out>/artifacts/           worlds, checkpoints, traces, heatmaps
    <out>/metrics/             CSV tables and the figures drawn from them
    <out>/manifest.json        command, config digest, seeds, file digests

Exit status: 0 success, 2 usage error, 3 configuration error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as config_mod
from . import experiments, indec, plotting
from .config import Config
from .draosc import checkpoint
from .draosc.ppo import TrainState, train
from .engine import SCHEME_NAMES, Observation
from .manifest import RunManifest
from .optim import Adam
from .scenario import ConfigError, dumps_world, generate
from .semantics import build_knowledge_base, dumps_kb

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


# -- formatting ------------------------------------------------------------------


def fmt(value) -> str:
    """Fixed, full-precision text for a CSV cell."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"1-10"``, ``"1,4,9"`` or a mix such as ``"1-3,7"``."""
    seeds = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return tuple(seeds)


def parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def parse_names(text: str) -> tuple[str, ...]:
    names = tuple(n.strip() for n in text.split(",") if n.strip())
    bad = [n for n in names if n not in SCHEME_NAMES]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown scheme {', '.join(bad) or text!r}; valid names: {', '.join(SCHEME_NAMES)}")
    return names


# -- run directories ---------------------------------------------------------------


class Run:
    def __init__(self, out: Path, cfg: Config, argv: Sequence[str], quiet: bool):
        self.out = out
        self.cfg = cfg
        self.argv = list(argv)
        self.quiet = quiet
        for sub in ("config", "artifacts", "metrics"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        (out / "config" / "config.yaml").write_text(cfg.dumps())

    def log(self, msg: str) -> None:
        if not self.quiet:
            print(msg, file=sys.stderr)

    def path(self, *parts: str) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def finish(self, seeds: Sequence[int]) -> None:
        RunManifest.for_run(["ccein", *self.argv], self.cfg.digest, seeds).write(self.out)
        if not self.quiet:
            print(f"wrote {self.out}")


def _seeds(args, default: Sequence[int]) -> tuple[int, ...]:
    if getattr(args, "seeds", None):
        return args.seeds
    if args.seed is not None:
        return (args.seed,)
    return tuple(default)


# -- scenario ------------------------------------------------------------------------


def cmd_scenario(args, cfg: Config, run: Run) -> None:
    seed = 1 if args.seed is None else args.seed
    world = generate(cfg.scenario_for(seed))
    run.path("artifacts", "world.txt").write_text(dumps_world(world))
    run.path("artifacts", "knowledge_base.txt").write_text(dumps_kb(build_knowledge_base(world)))
    plotting.world_map(world, run.path("artifacts", "world.png"))
    run.log(f"seed {seed}: {len(world.victims)} victims, {len(world.unreachable)} unreachable")
    run.finish([seed])


# -- train ----------------------------------------------------------------------------


def _adam(ck: checkpoint.Checkpoint, cfg: Config) -> Adam:
    opt = Adam(lr=cfg.ppo.learning_rate, max_grad_norm=cfg.ppo.max_grad_norm)
    opt.load_state({"t": ck.adam_t, "m": ck.adam_m, "v": ck.adam_v})
    return opt


def _resume_state(run_dir: Path, cfg: Config, seed: int) -> TrainState:
    last_path = run_dir / "artifacts" / "last.txt"
    best_path = run_dir / "artifacts" / "policy.txt"
    if not last_path.is_file() or not best_path.is_file():
        raise UsageError(f"{run_dir} has no artifacts/last.txt and artifacts/policy.txt to resume from")
    last = checkpoint.load(last_path)
    best = checkpoint.load(best_path)
    if last.config_digest != cfg.digest:
        raise ConfigError("<file>", f"resume config digest {last.config_digest} differs from {cfg.digest}")
    if last.seed != seed:
        raise UsageError(f"checkpoint was trained with seed {last.seed}, not {seed}")
    return TrainState(
        net=last.net,
        optimizer=_adam(last, cfg),
        iteration=last.iteration,
        best_net=best.net,
        best_score=best.score,
    )


def cmd_train(args, cfg: Config, run: Run) -> None:
    seed = 0 if args.seed is None else args.seed
    ppo = cfg.ppo if args.iterations is None else replace(cfg.ppo, iterations=args.iterations)
    if seed in ppo.eval_seeds:
        raise ConfigError("train.eval_seeds", f"training seed {seed} is also an evaluation seed")
    state = _resume_state(args.resume, cfg, seed) if args.resume else None
    start = 0 if state is None else state.iteration
    if state is not None and ppo.iterations < start:
        raise UsageError(f"checkpoint is already at iteration {start} > {ppo.iterations}")

    def on_eval(st, score):
        run.log(f"iteration {st.iteration:5d}  eval score {score:.4f}  best {st.best_score:.4f}")

    state = train(ppo, cfg.env, seed, state=state, hidden=cfg.hidden, on_eval=on_eval)
    best = checkpoint.Checkpoint(state.best_net, seed, cfg.digest, state.iteration, state.best_score)
    opt = state.optimizer
    last = checkpoint.Checkpoint(
        state.net, seed, cfg.digest, state.iteration, state.best_score, opt.t, opt.m, opt.v
    )
    checkpoint.save(best, run.path("artifacts", "policy.txt"))
    checkpoint.save(last, run.path("artifacts", "last.txt"))
    rows = [(r.iteration, r.mean_return, r.eval_score, r.entropy, r.clip_frac) for r in state.curve]
    write_csv(
        run.path("metrics", "curve.csv"),
        ("iteration", "mean_return", "eval_score", "entropy", "clip_fraction"),
        rows,
    )
    evals = [(r.iteration, r.eval_score) for r in state.curve if not np.isnan(r.eval_score)]
    plotting.training_curve(
        [r.iteration for r in state.curve],
        [r.mean_return for r in state.curve],
        [e[0] for e in evals],
        [e[1] for e in evals],
        run.path("metrics", "curve.png"),
    )
    run.log(f"iterations {start}..{state.iteration}, best evaluator score {state.best_score:.4f}")
    run.finish([seed])


# -- eval / ablate ----------------------------------------------------------------------

TX_HEADER = (
    "seed", "tick", "msg_id", "power_dbm", "channel", "delivered_fragments", "energy",
    "device", "urgency", "target", "subtask", "compression", "coding", "bytes_sent",
    "transmit_ticks", "airtime_s", "bandwidth_mhz", "snr_db", "sinr_db", "fragments", "category_ok", "reward",
)


def _tx_rows(runs):
    for r in runs:
        for t in r.result.transmissions:
            yield (
                r.seed, t.tick, t.msg_id, t.power_dbm, t.channel, t.delivered, t.energy_j,
                t.device, t.urgency.name.lower(), t.target, t.subtask, t.compression, t.coding.name.lower(),
                t.bytes_sent, t.transmit_ticks, t.airtime_s, t.bandwidth_mhz, t.snr_db, t.sinr_db,
                t.fragments, t.category_ok, t.reward,
            )


def dumps_observations(runs) -> str:
    lines = ["ccein-observations 1"]
    for r in runs:
        for ob in r.result.observations:
            side = ob.patch.shape[0]
            lines.append(
                f"seed {r.seed} tick {ob.tick} device {ob.device} center {ob.center[0]} {ob.center[1]} "
                f"reason {ob.reason} side {side}"
            )
            lines.append(" ".join(repr(float(v)) for v in ob.patch.ravel()))
    return "\n".join(lines) + "\n"


def loads_observations(text: str) -> list[tuple[int, Observation]]:
    lines = text.splitlines()
    if not lines or lines[0] != "ccein-observations 1":
        raise RuntimeFailure("not an observations file")
    out = []
    for head, body in zip(lines[1::2], lines[2::2]):
        f = head.split()
        ci = f.index("center")
        rest = f[:ci] + f[ci + 3:]
        kv = dict(zip(rest[::2], rest[1::2]))
        side = int(kv["side"])
        patch = np.array([float(v) for v in body.split()]).reshape(side, side)
        ob = Observation(int(kv["tick"]), int(kv["device"]), (int(f[ci + 1]), int(f[ci + 2])), patch, kv["reason"])
        out.append((int(kv["seed"]), ob))
    return out


def _scheme(args, cfg: Config, name: str):
    path = args.checkpoint if getattr(args, "checkpoint", None) else None
    try:
        return experiments.make_scheme(name, cfg, path)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {exc.filename}") from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise UsageError(str(exc)) from None


def cmd_eval(args, cfg: Config, run: Run) -> None:
    seeds = _seeds(args, cfg.eval_seeds)
    scheme = _scheme(args, cfg, args.scheme)
    runs = experiments.evaluate(cfg, scheme, seeds, record_trace=not args.no_trace)
    m = [(r.seed, r.result.metrics) for r in runs]
    write_csv(
        run.path("metrics", "tcr.csv"),
        ("scheme", "seed", "tcr", "tasks_completed", "tasks_total", "tasks_flagged", "vacuous"),
        [(scheme.name, s, x.tcr, x.tasks_completed, x.tasks_total, x.tasks_flagged, x.tcr_vacuous) for s, x in m],
    )
    write_csv(
        run.path("metrics", "te.csv"),
        ("scheme", "seed", "te_raw", "te_norm", "transmitted_mb", "oracle_te_raw"),
        [(scheme.name, r.seed, r.result.metrics.te_raw, r.result.metrics.te_norm, r.result.metrics.transmitted_mb, r.oracle_te) for r in runs],
    )
    pw_rows = []
    for r in runs:
        by_bw: dict[float, list[float]] = {}
        for t in r.result.transmissions:
            by_bw.setdefault(t.bandwidth_mhz, []).append(t.power_dbm)
        for bw in sorted(by_bw):
            v = np.array(by_bw[bw])
            pw_rows.append((scheme.name, r.seed, bw, float(v.mean()), float(v.std()), len(v)))
    write_csv(
        run.path("metrics", "power_vs_bandwidth.csv"),
        ("scheme", "seed", "bandwidth_mhz", "mean_power_dbm", "std", "n"),
        pw_rows,
    )
    write_csv(
        run.path("metrics", "sc_vs_snr.csv"),
        ("scheme", "seed", "snr_db", "sc"),
        [(scheme.name, s, cfg.engine.snr_db, x.sc) for s, x in m],
    )
    write_csv(run.path("metrics", "transmissions.csv"), TX_HEADER, _tx_rows(runs))
    plotting.episode_metrics(
        list(seeds), [x.tcr for _, x in m], [x.te_norm for _, x in m], [x.sc for _, x in m],
        run.path("metrics", "episode_metrics.png"),
    )
    run.path("artifacts", "observations.txt").write_text(dumps_observations(runs))
    if not args.no_trace:
        for r in runs:
            header = {"seed": r.seed, "scheme": scheme.name, "config": cfg.digest}
            run.path("artifacts", f"trace_seed{r.seed}.ndjson").write_text(r.result.trace_text(header))
    s = experiments.summarize(runs)
    run.log(f"{scheme.name}: TCR {s['tcr']:.3f}  TE {s['te_norm']:.3f}  SC {s['sc']:.3f}  over {len(seeds)} seeds")
    run.finish(seeds)


def cmd_ablate(args, cfg: Config, run: Run) -> None:
    seeds = _seeds(args, cfg.eval_seeds)
    schemes = [_scheme(args, cfg, n) for n in args.schemes]
    results = experiments.ablate(cfg, schemes, seeds)
    rows = []
    for name, runs in results.items():
        for r in runs:
            x = r.result.metrics
            rows.append((name, r.seed, x.tcr, x.te_raw, x.te_norm, x.sc, x.mean_power_dbm, x.total_energy_j, x.transmitted_mb))
    cols = ("tcr", "te_raw", "te_norm", "sc", "mean_power_dbm", "total_energy_j", "transmitted_mb")
    write_csv(run.path("metrics", "ablation.csv"), ("scheme", "seed", *cols), rows)
    summary = {name: experiments.summarize(runs) for name, runs in results.items()}
    write_csv(
        run.path("metrics", "ablation_summary.csv"),
        ("scheme", "n", *cols),
        [(name, len(results[name]), *(summary[name][c] for c in cols)) for name in summary],
    )
    plotting.ablation(summary, run.path("metrics", "ablation.png"))
    for name, s in summary.items():
        run.log(f"{name:9s} TCR {s['tcr']:.3f}  TE {s['te_norm']:.3f}  SC {s['sc']:.3f}")
    run.finish(seeds)


# -- sweeps ---------------------------------------------------------------------------------


def _sweep(args, cfg: Config, run: Run, kind: str) -> None:
    seeds = _seeds(args, cfg.sweep_seeds)
    series = {}
    for name in args.schemes:
        scheme = _scheme(args, cfg, name)
        if kind == "bandwidth":
            grid = args.bandwidths or cfg.bandwidths
            bad = [b for b in grid if not 50.0 <= b <= 500.0]
            if bad:
                raise UsageError(f"bandwidths outside [50, 500] MHz: {bad}")
            points = experiments.sweep_bandwidth(cfg, scheme, seeds, grid)
            stem, cols = "power_vs_bandwidth", ("bandwidth_mhz", "mean_power_dbm", "std", "n")
            by_seed_cols = ("bandwidth_mhz", "seed", "mean_power_dbm")
        else:
            grid = args.snrs or cfg.snrs
            points = experiments.sweep_snr(cfg, scheme, seeds, grid)
            stem, cols = "sc_vs_snr", ("snr_db", "sc_mean", "sc_std", "n")
            by_seed_cols = ("snr_db", "seed", "sc")
        write_csv(run.path("metrics", name, f"{stem}.csv"), cols, [(p.level, p.mean, p.std, p.n) for p in points])
        write_csv(
            run.path("metrics", name, f"{stem}_by_seed.csv"),
            by_seed_cols,
            [(p.level, s, v) for p in points for s, v in zip(seeds, p.per_seed)],
        )
        series[name] = ([p.level for p in points], [p.mean for p in points], [p.std for p in points])
        run.log(f"{name}: " + " ".join(f"{p.level:g}:{p.mean:.3f}" for p in points))
    draw = plotting.power_vs_bandwidth if kind == "bandwidth" else plotting.sc_vs_snr
    draw(series, run.path("metrics", f"{'power_vs_bandwidth' if kind == 'bandwidth' else 'sc_vs_snr'}.png"))
    run.finish(seeds)


def cmd_sweep_bandwidth(args, cfg: Config, run: Run) -> None:
    _sweep(args, cfg, run, "bandwidth")


def cmd_sweep_snr(args, cfg: Config, run: Run) -> None:
    _sweep(args, cfg, run, "snr")


# -- explain --------------------------------------------------------------------------------


def load_classifier(cfg: Config) -> indec.TinyCNN:
    path = cfg.classifier_path()
    try:
        return indec.loads_cnn(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"classifier not found: {path}") from None


def cmd_explain(args, cfg: Config, run: Run) -> None:
    obs_path = args.run_dir / "artifacts" / "observations.txt"
    if not obs_path.is_file():
        raise UsageError(f"{args.run_dir} has no artifacts/observations.txt (run `ccein eval` first)")
    observations = loads_observations(obs_path.read_text())
    seeds = sorted({s for s, _ in observations})
    seed = args.seed if args.seed is not None else (seeds[0] if seeds else None)
    match = [ob for s, ob in observations if s == seed and ob.device == args.device and ob.tick == args.tick]
    if not match:
        raise RuntimeFailure(f"no observation at tick {args.tick} for device {args.device} (seed {seed})")
    ob = match[0]
    cls = indec.PatchClass[args.cls.upper()]
    net = load_classifier(cfg)
    heat = indec.grad_cam(net, ob.patch, int(cls))
    _, blended = indec.overlay(heat, ob.patch, scale=args.scale)
    run.path("artifacts", "heatmap.pgm").write_text(indec.to_pgm(heat, args.scale))
    run.path("artifacts", "overlay.pgm").write_text(blended)
    write_csv(
        run.path("metrics", "heatmap.csv"),
        ("row", "col", "value"),
        [(r, c, float(v)) for (r, c), v in np.ndenumerate(heat)],
    )
    logits, _ = indec.forward(net, ob.patch)
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    write_csv(
        run.path("metrics", "prediction.csv"),
        ("class", "probability"),
        [(c.name.lower(), float(probs[c])) for c in indec.PatchClass],
    )
    plotting.explanation(ob.patch, heat, f"Grad-CAM: {cls.name.lower()}", run.path("metrics", "heatmap.png"))
    run.log(f"seed {seed} device {ob.device} tick {ob.tick} at {ob.center}: predicted {indec.PatchClass(int(probs.argmax())).name.lower()}")
    run.finish([seed])


# -- parser -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML file merged over the packaged defaults")
    common.add_argument("--seed", type=int, help="scenario / training / episode seed")
    common.add_argument("--out", type=Path, help="run directory (default: runs/<command>)")
    common.add_argument("--quiet", action="store_true", help="no progress output")

    parser = argparse.ArgumentParser(prog="ccein", description="Embodied-network rescue simulator experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenario", parents=[common], help="generate and serialize a world")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("train", parents=[common], help="train the transmission policy with PPO")
    p.add_argument("--iterations", type=int, help="override train.iterations")
    p.add_argument("--resume", type=Path, help="continue from a previous train run directory")
    p.set_defaults(func=cmd_train)

    schemes_help = f"comma-separated scheme names ({', '.join(SCHEME_NAMES)})"
    p = sub.add_parser("eval", parents=[common], help="run one scheme over seeds and write metric CSVs")
    p.add_argument("scheme", nargs="?", default="adaptive", help=f"one of {', '.join(SCHEME_NAMES)}")
    p.add_argument("--checkpoint", type=Path, help="policy file for the adaptive scheme")
    p.add_argument("--seeds", type=parse_seeds, help='e.g. "1-10" or "1,3,5"')
    p.add_argument("--no-trace", action="store_true", help="skip the per-seed event traces")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="adaptive vs static vs greedy, side by side")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--seeds", type=parse_seeds)
    p.add_argument("--schemes", type=parse_names, default=SCHEME_NAMES, help=schemes_help)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-bandwidth", parents=[common], help="mean transmit power per bandwidth level")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--seeds", type=parse_seeds)
    p.add_argument("--schemes", type=parse_names, default=SCHEME_NAMES, help=schemes_help)
    p.add_argument("--bandwidths", type=parse_floats, help="MHz grid, e.g. 50,100,500")
    p.set_defaults(func=cmd_sweep_bandwidth)

    p = sub.add_parser("sweep-snr", parents=[common], help="semantic consistency per SNR level")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--seeds", type=parse_seeds)
    p.add_argument("--schemes", type=parse_names, default=SCHEME_NAMES, help=schemes_help)
    p.add_argument("--snrs", type=parse_floats, help="dB grid, e.g. -10,0,10")
    p.set_defaults(func=cmd_sweep_snr)

    p = sub.add_parser("explain", parents=[common], help="Grad-CAM heatmap for an observed patch")
    p.add_argument("run_dir", type=Path, help="an eval run directory")
    p.add_argument("--device", type=int, required=True)
    p.add_argument("--tick", type=int, required=True)
    p.add_argument("--class", dest="cls", default="victim", choices=[c.name.lower() for c in indec.PatchClass])
    p.add_argument("--scale", type=int, default=8, help="pixel upscaling of the graymaps")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        if args.config is not None and not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = config_mod.load(args.config)
        out = args.out if args.out is not None else Path("runs") / args.command
        run = Run(out, cfg, argv, args.quiet)
        args.func(args, cfg, run)
    except UsageError as exc:
        print(f"ccein: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"ccein: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, ValueError, FloatingPointError, OSError) as exc:
        print(f"ccein: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
