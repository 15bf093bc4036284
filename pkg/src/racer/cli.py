"""Command-line entry point: ``racer <command> ...``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import NumericalError, ParseError, RacerError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else v for v in row])
    return path


def _write_meta(run_dir: Path, command: str, **fields):
    meta = {"command": command, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"), **fields}
    (run_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def _overrides(args) -> dict:
    """Flags that map onto config keys (only those given explicitly)."""
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    put("run", "seed", getattr(args, "seed", None))
    put("run", "name", getattr(args, "run_name", None))
    if getattr(args, "track", None):
        put("track", "file", args.track)
    put("track", "preset", getattr(args, "track_preset", None))
    put("reward", "variant", getattr(args, "variant", None))
    put("train", "total_steps", getattr(args, "total_steps", None))
    put("train", "n_envs", getattr(args, "n_envs", None))
    put("train", "n_steps", getattr(args, "n_steps", None))
    put("train", "checkpoint_interval", getattr(args, "checkpoint_interval", None))
    put("env", "max_episode_steps", getattr(args, "max_episode_steps", None))
    put("dynamics", "C_T", getattr(args, "ct", None))
    return o


def _resolve(args, extra: dict | None = None) -> dict:
    cfg = cfgmod.resolve_config(args.preset, args.config, _overrides(args))
    if extra:
        cfg = cfgmod.deep_merge(cfg, extra)
    return cfg


def _run_dir(args, cfg, suffix=None) -> Path:
    name = cfg["run"]["name"] if suffix is None else f"{cfg['run']['name']}_{suffix}"
    d = cfgmod.output_root(args.out) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# commands


def cmd_gen_track(args) -> int:
    from .trackgen import generate_track, min_curvature_raceline, preset_track, save_track

    if args.spec:
        try:
            spec = json.loads(Path(args.spec).read_text())
        except OSError as exc:
            raise ParseError(f"{args.spec}: cannot read ({exc.strerror})") from None
        except json.JSONDecodeError as exc:
            raise ParseError(f"{args.spec}: invalid JSON: {exc.msg}", line=exc.lineno) from None
        segments = spec["segments"] if isinstance(spec, dict) else spec
        width = args.width if args.width is not None else float(spec.get("width", 2.0)) if isinstance(spec, dict) else 2.0
        track = generate_track(segments, width, seed=args.seed or 0, name=Path(args.spec).stem, jitter=args.jitter)
    else:
        track = preset_track(args.track_preset or "oval", seed=args.seed or 0)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_track(track, out)
    print(f"wrote {out} ({track.name}, length {track.length:.2f} m, width {track.width} m)")
    if args.raceline:
        line = min_curvature_raceline(track)
        path = out.with_suffix(".raceline.csv")
        _write_csv(path, ["x", "y", "curvature", "offset"],
                   [(repr(p[0]), repr(p[1]), repr(k), repr(a)) for p, k, a in zip(line.points, line.curvature, line.offsets)])
        print(f"wrote {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _resolve(args)
    env_cfg = cfgmod.build_env_config(cfg)
    train_cfg = cfgmod.build_train_config(cfg)
    run_dir = _run_dir(args, cfg)
    cfgmod.write_resolved(cfg, run_dir)
    report, _ = train(env_cfg, train_cfg, out_dir=run_dir, resume_from=args.resume,
                      log=(print if args.verbose else None))
    _write_meta(run_dir, "train", wall_clock=report.wall_clock)
    print(f"trained {report.steps[-1] if report.steps else 0} steps, {report.total_collisions} collisions; "
          f"outputs in {run_dir}")
    return EXIT_OK


def _eval_and_write(checkpoint, env_cfg, run_dir: Path, laps: int, deterministic: bool, seed: int,
                    capture: bool = False, raceline=True):
    from .trackgen import lateral_deviation, min_curvature_raceline
    from .trainer import evaluate

    ev = evaluate(checkpoint, env_cfg, n_laps=laps, deterministic=deterministic, seed=seed,
                  telemetry_path=run_dir / "telemetry.jsonl", capture=capture)
    _write_csv(run_dir / "laps.csv", ["lap", "lap_time"], [(i + 1, repr(t)) for i, t in enumerate(ev.lap_times)])
    s = ev.summary()
    _write_csv(run_dir / "eval_summary.csv", list(s), [list(s.values())])
    if raceline and len(ev.telemetry) >= 2:
        line = min_curvature_raceline(env_cfg.track)
        xy = np.array([(r["x"], r["y"]) for r in ev.telemetry])
        dev = lateral_deviation(xy, line).as_dict()
        _write_csv(run_dir / "deviation.csv", list(dev), [list(dev.values())])
    if capture and ev.traces is not None:
        outputs = np.array([(r["a_T"], r["a_delta"]) for r in ev.telemetry])
        np.savez(run_dir / "traces.npz", layer1=ev.traces.layer1, layer2=ev.traces.layer2, outputs=outputs)
    return ev


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    env_cfg = cfgmod.build_env_config(cfg)
    run_dir = _run_dir(args, cfg, "eval")
    cfgmod.write_resolved(cfg, run_dir)
    if not Path(args.checkpoint).exists():
        raise ParseError(f"{args.checkpoint}: checkpoint not found")
    ev = _eval_and_write(args.checkpoint, env_cfg, run_dir, args.laps, not args.stochastic, cfg["run"]["seed"],
                         capture=args.capture)
    _write_meta(run_dir, "eval")
    print(json.dumps(ev.summary()))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer import evaluate, train

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    base = _resolve(args)
    root = _run_dir(args, base, "ablate")
    cfgmod.write_resolved(base, root)
    rows = []
    for variant in variants:
        for seed in seeds:
            cfg = cfgmod.deep_merge(base, {"reward": {"variant": variant}, "run": {"seed": seed}})
            sub = root / f"{variant}_seed{seed}"
            cfgmod.write_resolved(cfg, sub)
            env_cfg = cfgmod.build_env_config(cfg)
            report, policy = train(env_cfg, cfgmod.build_train_config(cfg), out_dir=sub)
            # laps are always timed under the same reward-free dynamics
            ev = evaluate(policy, env_cfg, n_laps=args.laps, seed=seed, telemetry_path=sub / "telemetry.jsonl")
            rows.append([variant, seed, ev.laps_label, ev.t_min, ev.t_max, ev.t_mean, ev.t_std, ev.v_min, ev.v_max,
                         ev.v_mean, report.total_collisions])
            print(f"{variant} seed {seed}: laps {ev.laps_label} t_mean {ev.t_mean}")
    _write_csv(root / "ablation.csv",
               ["variant", "seed", "laps", "t_min", "t_max", "t_mean", "t_std", "v_min", "v_max", "v_mean",
                "train_collisions"], rows)
    _write_meta(root, "ablate")
    print(f"wrote {root / 'ablation.csv'}")
    return EXIT_OK


def cmd_overtake(args) -> int:
    from .neural import load_checkpoint
    from .trainer import train

    ck = load_checkpoint(args.checkpoint)
    extra = {"env": {"n_obstacle_agents": args.n_obstacles, "ego_ct_multiplier": args.ego_ct_mult,
                     "obstacle_policy_checkpoint": str(args.checkpoint)}}
    cfg = _resolve(args, extra)
    env_cfg = cfgmod.build_env_config(cfg)
    run_dir = _run_dir(args, cfg, "overtake")
    cfgmod.write_resolved(cfg, run_dir)
    events = []

    def log_events(iteration, policy, report):
        events.append((report.steps[-1], report.mean_reward[-1], report.total_collisions))
        return False

    report, policy = train(env_cfg, cfgmod.build_train_config(cfg), out_dir=run_dir, callback=log_events,
                           obstacle_policy=ck.policy, init_policy=ck.policy)
    # count overtakes of the post-trained ego over one evaluation episode
    from .env import RacingEnv

    env = RacingEnv(env_cfg, seed=cfg["run"]["seed"], obstacle_policy=ck.policy)
    obs = env.reset(seed=cfg["run"]["seed"])
    rows = []
    for _ in range(args.eval_steps):
        res = env.step(policy.mean_action(obs))
        obs = res.observation
        if res.info["overtakes"]:
            rows.append((res.info["t"], res.info["overtakes"], env.overtakes))
        if res.terminated or res.truncated:
            break
    _write_csv(run_dir / "overtakes.csv", ["t", "new_overtakes", "cumulative"], rows)
    _write_csv(run_dir / "post_training.csv", ["step", "mean_reward", "collisions"], events)
    _write_meta(run_dir, "overtake")
    print(f"overtakes: {env.overtakes}; outputs in {run_dir}")
    return EXIT_OK


def cmd_scan(args) -> int:
    from .sensing import SensorConfig, process_raw_scan, read_raw_scans, write_observations

    res_deg, scans = read_raw_scans(args.input)
    sensor = SensorConfig(n_rays=args.n_rays, fov=math.radians(args.fov_deg))
    obs = [process_raw_scan(s, sensor) for s in scans]
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_observations(out, obs)
    print(f"processed {len(obs)} scans ({res_deg} deg resolution) -> {out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import (
        correlation_matrix,
        identify_tires,
        saturation_table,
        stage_classify,
        trace_channels,
    )
    from .env import read_telemetry
    from .neural import ActivationTrace

    cfg = _resolve(args)
    run_dir = _run_dir(args, cfg, "analysis")
    cfgmod.write_resolved(cfg, run_dir)
    try:
        telemetry = read_telemetry(args.telemetry)
    except OSError as exc:
        raise ParseError(f"{args.telemetry}: cannot read ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{args.telemetry}: invalid JSON-lines: {exc.msg}", line=exc.lineno) from None
    if args.traces:
        with np.load(args.traces) as data:
            traces = ActivationTrace(data["layer1"], data["layer2"])
            outputs = data["outputs"] if "outputs" in data else None
        corr = correlation_matrix(trace_channels(traces, outputs))
        corr.write_csv(run_dir / "correlations.csv")
        from .trackgen import min_curvature_raceline

        track = cfgmod.build_track(cfg)
        line = min_curvature_raceline(track)
        n = min(len(telemetry), traces.layer1.shape[0])
        labels = stage_classify(telemetry[:n], line).labels
        table = saturation_table(ActivationTrace(traces.layer1[:n], traces.layer2[:n]), labels)
        table.write_csv(run_dir / "saturation.csv")
        if table.omitted:
            print(f"note: no samples for stages {table.omitted}; rows omitted")
    l_wb = cfg["dynamics"]["l_wb"]
    try:
        tire = identify_tires(telemetry, l_wb=l_wb, v_threshold=args.v_threshold, n_bins=args.bins)
        report = tire.report()
    except RacerError as exc:
        report = {"error": str(exc)}
    (run_dir / "tire_fit.json").write_text(json.dumps(report, indent=2) + "\n")
    _write_meta(run_dir, "analyze")
    print(f"analysis written to {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _common(p, track=True):
    p.add_argument("--config", help="JSON config file layered over the preset")
    p.add_argument("--preset", default="default", choices=sorted(cfgmod.CONFIG_PRESETS), help="base config preset")
    p.add_argument("--out", help="output root (default $RACER_OUT or ./runs)")
    p.add_argument("--run-name")
    p.add_argument("--seed", type=int)
    if track:
        p.add_argument("--track", help="track JSON file")
        p.add_argument("--track-preset", help="built-in track name")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="racer", description="Map-free racing RL lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-track", help="generate a track file")
    p.add_argument("--spec", help="JSON segment list (or object with 'segments' and 'width')")
    p.add_argument("--track-preset", help="built-in track name")
    p.add_argument("--width", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--raceline", action="store_true", help="also write the min-curvature line")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_gen_track)

    p = sub.add_parser("train", help="train a policy with PPO")
    _common(p)
    p.add_argument("--variant", choices=["R", "R_ab1", "R_ab2"])
    p.add_argument("--total-steps", type=int)
    p.add_argument("--n-envs", type=int)
    p.add_argument("--n-steps", type=int)
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--max-episode-steps", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--laps", type=int, default=10)
    p.add_argument("--ct", type=float, help="motor constant C_T at evaluation")
    p.add_argument("--stochastic", action="store_true", help="sample actions instead of the mean")
    p.add_argument("--capture", action="store_true", help="save activation traces")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare reward variants")
    _common(p)
    p.add_argument("--variants", default="R,R_ab1,R_ab2")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--laps", type=int, default=10)
    p.add_argument("--total-steps", type=int)
    p.add_argument("--n-envs", type=int)
    p.add_argument("--n-steps", type=int)
    p.add_argument("--max-episode-steps", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("overtake", help="post-train among obstacle agents")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-obstacles", type=int, default=15)
    p.add_argument("--ego-ct-mult", type=float, default=2.0)
    p.add_argument("--total-steps", type=int)
    p.add_argument("--n-envs", type=int)
    p.add_argument("--n-steps", type=int)
    p.add_argument("--eval-steps", type=int, default=6000)
    p.set_defaults(func=cmd_overtake)

    p = sub.add_parser("scan", help="preprocess raw 360-degree scans")
    p.add_argument("--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--n-rays", type=int, default=170)
    p.add_argument("--fov-deg", type=float, default=120.0)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("analyze", help="correlations, saturation and tire fits")
    _common(p)
    p.add_argument("--telemetry", required=True)
    p.add_argument("--traces", help="activation traces (.npz from eval --capture)")
    p.add_argument("--v-threshold", type=float, default=0.5)
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RacerError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
