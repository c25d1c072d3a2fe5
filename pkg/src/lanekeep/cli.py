"""Command-line front end: train, eval, compare, serve, tracks.

Every command is deterministic for a fixed seed, so any emitted file can be
regenerated bit for bit.  Exit codes: 0 success, 1 usage error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import queue
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor

from . import classic, ddpg
from .dynamics import VehicleParams
from .env import EnvConfig, TRACE_FIELDS, score_episode
from .geometry import BUILTIN_TRACKS, TrackError, builtin_track, track_from_json, track_to_json
from .protocol import ProtocolServer


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems via exception, not sys.exit(2)."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config resolution: command line > config file > defaults


def _load_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        return classic._parse_flat_config(fh.read())


def _opt(args, file_cfg: dict, key: str, default, cast=None):
    value = getattr(args, key, None)
    if value is None and key in file_cfg:
        value = file_cfg[key]
    if value is None:
        return default
    return cast(value) if cast is not None else value


def _noise_sigma(value: str) -> float:
    if value not in ("on", "off"):
        raise UsageError(f"--noise must be 'on' or 'off', got {value!r}")
    return 0.05 if value == "on" else 0.0


def _resolve_track(spec: str):
    if spec in BUILTIN_TRACKS:
        return builtin_track(spec)
    if os.path.exists(spec):
        with open(spec) as fh:
            return track_from_json(fh.read())
    raise FileNotFoundError(f"no built-in track or track file named {spec!r}")


def _write_csv(path: str, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        writer.writerows(rows)


def _make_env_config(args, file_cfg, heading_lookahead=None) -> EnvConfig:
    kwargs = {
        "noise_sigma": _noise_sigma(_opt(args, file_cfg, "noise", "on")),
        "seed": _opt(args, file_cfg, "seed", 0, int),
        "speed": _opt(args, file_cfg, "speed", 70.0, float) / 3.6,
        "max_steps": _opt(args, file_cfg, "max_steps", 6500, int),
    }
    if heading_lookahead is not None:
        kwargs["heading_lookahead"] = heading_lookahead
    return EnvConfig(**kwargs)


def _build_controller(kind: str, track, config: EnvConfig, params: VehicleParams,
                      preset_row: int | None, horizon: int | None, checkpoint: str | None):
    presets = classic.load_presets()
    if kind == "lqr":
        row = 1 if preset_row is None else preset_row
        if row not in presets:
            raise ValueError(f"preset row {row} not in 1..{len(presets)}")
        gain = classic.lqr_synthesize(params, config.speed, presets[row].weights, config.dt)
        return classic.LqrController(gain, track, params, config.dt), f"row{row}"
    if kind == "mpc":
        if horizon is None:
            row = 1 if preset_row is None else preset_row
            if row not in presets:
                raise ValueError(f"preset row {row} not in 1..{len(presets)}")
            horizon = presets[row].horizon
        mpc_cfg = classic.MpcConfig(
            horizon=horizon,
            delta_bounds=(-params.delta_max, params.delta_max),
            dt=config.dt,
        )
        return classic.MpcController(mpc_cfg, track, params, config.speed), f"hp{horizon}"
    if kind == "ddpg":
        if checkpoint is None:
            raise UsageError("--checkpoint is required for the ddpg controller")
        actor = ddpg.load_actor(checkpoint)
        return ddpg.PolicyController(actor), "policy"
    raise UsageError(f"unknown controller {kind!r}")


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    track_spec = _opt(args, file_cfg, "track", "oval")
    track = _resolve_track(track_spec)
    steps = _opt(args, file_cfg, "steps", 200_000, int)
    if steps < 0:
        raise UsageError("--steps must be non-negative")
    seed = _opt(args, file_cfg, "seed", 0, int)
    config = _make_env_config(args, file_cfg)
    out = _opt(args, file_cfg, "out", None)
    if out is None:
        out = f"runs/ddpg-{getattr(track, 'name', 'track') or 'track'}-seed{seed}"
    os.makedirs(out, exist_ok=True)

    agent = ddpg.DdpgAgent(
        gamma=float(file_cfg.get("gamma", 0.99)),
        lr_actor=float(file_cfg.get("lr_actor", 1e-3)),
        lr_critic=float(file_cfg.get("lr_critic", 1e-4)),
        tau=float(file_cfg.get("tau", 0.001)),
        batch_size=int(file_cfg.get("batch_size", 64)),
        buffer_capacity=int(file_cfg.get("buffer_capacity", 100_000)),
        warm_up=int(file_cfg["warm_up"]) if "warm_up" in file_cfg else None,
        seed=seed,
    )
    from .env import LaneKeepEnv

    env = LaneKeepEnv(track, config)
    log = ddpg.train(agent, env, steps)
    _write_csv(os.path.join(out, "training_log.csv"), ddpg.TRAIN_LOG_FIELDS, log)
    ddpg.save_agent(
        agent, out,
        extra={"track": track_spec, "steps": steps, "noise_sigma": config.noise_sigma},
    )
    print(f"trained {steps} steps on {track_spec}: {len(log)} episodes completed")
    if log:
        tail = [row[2] for row in log[-10:]]
        print(f"final-{len(tail)}-episode mean cumulative reward: {sum(tail) / len(tail):.3f}")
    print(f"checkpoint and training_log.csv written to {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    track_spec = _opt(args, file_cfg, "track", "oval")
    track = _resolve_track(track_spec)
    kind = _opt(args, file_cfg, "controller", "lqr")
    episodes = _opt(args, file_cfg, "episodes", 1, int)
    if episodes < 1:
        raise UsageError("--episodes must be at least 1")
    config = _make_env_config(args, file_cfg)
    params = VehicleParams()
    preset_row = _opt(args, file_cfg, "preset", None, int)
    horizon = _opt(args, file_cfg, "horizon", None, int)
    checkpoint = _opt(args, file_cfg, "checkpoint", None)
    gamma = _opt(args, file_cfg, "gamma", None, float)

    controller, setup = _build_controller(
        kind, track, config, params, preset_row, horizon, checkpoint
    )
    print(f"eval {kind}({setup}) on {track_spec}: noise_sigma={config.noise_sigma} "
          f"seed={config.seed} episodes={episodes}")
    totals = []
    for ep in range(episodes):
        ep_config = EnvConfig(
            dt=config.dt, max_steps=config.max_steps, noise_sigma=config.noise_sigma,
            lam=config.lam, speed=config.speed, seed=config.seed + ep,
            heading_lookahead=config.heading_lookahead,
        )
        trace = [] if (ep == 0 and (args.trace or gamma is not None)) else None
        result = score_episode(controller, track, ep_config, params, trace)
        totals.append(result.total)
        print(f"episode {ep}: score={result.total!r} steps={result.steps} "
              f"terminated_early={result.terminated_early}")
        if ep == 0 and args.trace:
            _write_csv(args.trace, TRACE_FIELDS, trace)
            print(f"trace written to {args.trace}")
        if ep == 0 and gamma is not None:
            discounted = sum(row[7] * gamma**i for i, row in enumerate(trace))
            print(f"episode 0 discounted score (gamma={gamma}, analysis only): {discounted!r}")
    print(f"mean score: {sum(totals) / len(totals)!r}")
    return 0


# ---------------------------------------------------------------------------
# compare


def _eval_cell(cell: dict) -> dict:
    """One (track, controller, setup) cell over the seed bank; worker-safe."""
    out = dict(cell, status="ok", scores=[], steps=[], completed=0)
    try:
        track = _resolve_track(cell["track"])
        params = VehicleParams()
        for seed in cell["seeds"]:
            config = EnvConfig(
                noise_sigma=cell["noise_sigma"], seed=seed,
                speed=cell["speed"], max_steps=cell["max_steps"],
            )
            controller, _ = _build_controller(
                cell["controller"], track, config, params,
                cell.get("preset_row"), cell.get("horizon"), cell.get("checkpoint"),
            )
            r = score_episode(controller, track, config, params)
            out["scores"].append(r.total)
            out["steps"].append(r.steps)
            if not r.terminated_early:
                out["completed"] += 1
    except Exception as exc:   # cell failures mark the row, table still renders
        out["status"] = f"FAIL({exc})"
    return out


def cmd_compare(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    presets = classic.load_presets()
    track_names = [t.strip() for t in _opt(args, file_cfg, "tracks", ",".join(BUILTIN_TRACKS)).split(",")]
    for t in track_names:
        if t not in BUILTIN_TRACKS and not os.path.exists(t):
            raise FileNotFoundError(f"no built-in track or track file named {t!r}")
    controllers = [c.strip() for c in _opt(args, file_cfg, "controllers", "lqr,mpc").split(",")]
    for c in controllers:
        if c not in ("lqr", "mpc", "ddpg"):
            raise UsageError(f"unknown controller {c!r} in --controllers")
    preset_arg = _opt(args, file_cfg, "presets", None)
    if preset_arg:
        rows = [int(x) for x in preset_arg.split(",")]
        for r in rows:
            if r not in presets:
                raise UsageError(f"preset row {r} not in 1..{len(presets)}")
    else:
        rows = sorted(presets)
    base_seed = _opt(args, file_cfg, "seed", 0, int)
    n_seeds = _opt(args, file_cfg, "seeds", 5, int)
    if n_seeds < 1:
        raise UsageError("--seeds must be at least 1")
    seeds = tuple(range(base_seed, base_seed + n_seeds))
    noise_sigma = _noise_sigma(_opt(args, file_cfg, "noise", "on"))
    speed = _opt(args, file_cfg, "speed", 70.0, float) / 3.6
    max_steps = _opt(args, file_cfg, "max_steps", 6500, int)
    checkpoint = _opt(args, file_cfg, "checkpoint", None)
    jobs = _opt(args, file_cfg, "jobs", None, int)

    cells = []
    for track_name in track_names:
        track_rows = [r for r in rows if presets[r].track == track_name] or rows
        for kind in controllers:
            if kind == "ddpg":
                cells.append({
                    "track": track_name, "controller": "ddpg", "setup": "policy",
                    "checkpoint": checkpoint, "seeds": seeds, "noise_sigma": noise_sigma,
                    "speed": speed, "max_steps": max_steps,
                })
                continue
            for r in track_rows:
                p = presets[r]
                if kind == "lqr":
                    w = p.weights
                    setup = f"row{r} q=({w.q1:g},{w.q2:g},{w.q3:g},{w.q4:g}) rho={w.rho:g}"
                    cells.append({
                        "track": track_name, "controller": "lqr", "setup": setup,
                        "preset_row": r, "seeds": seeds, "noise_sigma": noise_sigma,
                        "speed": speed, "max_steps": max_steps,
                    })
                else:
                    cells.append({
                        "track": track_name, "controller": "mpc", "setup": f"row{r} hp{p.horizon}",
                        "horizon": p.horizon, "seeds": seeds, "noise_sigma": noise_sigma,
                        "speed": speed, "max_steps": max_steps,
                    })

    if jobs is None:
        jobs = min(len(cells), os.cpu_count() or 1)
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_eval_cell, cells))
    else:
        results = [_eval_cell(c) for c in cells]

    noise_label = "on" if noise_sigma > 0 else "off"
    header = (f"# noise={noise_label} seeds={','.join(str(s) for s in seeds)} "
              f"(scores are mean +/- std over the seed bank, not single-run values)")
    print(header)
    table_rows = []
    for res in results:
        if res["scores"]:
            mean = statistics.fmean(res["scores"])
            std = statistics.pstdev(res["scores"]) if len(res["scores"]) > 1 else 0.0
            steps_mean = statistics.fmean(res["steps"])
        else:
            mean = std = steps_mean = math.nan
        table_rows.append((
            res["track"], res["controller"], res["setup"],
            mean, std, steps_mean, res["completed"], res["status"],
        ))
    widths = [
        max(len("track"), *(len(r[0]) for r in table_rows)),
        max(len("controller"), *(len(r[1]) for r in table_rows)),
        max(len("setup"), *(len(r[2]) for r in table_rows)),
    ]
    print(f"{'track':<{widths[0]}}  {'controller':<{widths[1]}}  {'setup':<{widths[2]}}  "
          f"{'score':>18}  {'steps':>7}  {'done':>4}  status")
    for r in table_rows:
        score = "" if math.isnan(r[3]) else f"{r[3]:.1f} +/- {r[4]:.1f}"
        steps = "" if math.isnan(r[5]) else f"{r[5]:.0f}"
        print(f"{r[0]:<{widths[0]}}  {r[1]:<{widths[1]}}  {r[2]:<{widths[2]}}  "
              f"{score:>18}  {steps:>7}  {r[6]:>4}  {r[7]}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(header + "\n")
            writer = csv.writer(fh)
            writer.writerow((
                "track", "controller", "setup", "score_mean", "score_std",
                "steps_mean", "completed", "status",
            ))
            writer.writerows(
                tuple("" if isinstance(v, float) and math.isnan(v) else v for v in row)
                for row in table_rows
            )
        print(f"table written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# serve


def cmd_serve(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    defaults = {
        "track": _opt(args, file_cfg, "track", "oval"),
        "noise_sigma": _noise_sigma(_opt(args, file_cfg, "noise", "on")),
        "seed": _opt(args, file_cfg, "seed", 0, int),
        "speed": _opt(args, file_cfg, "speed", 70.0, float) / 3.6,
        "max_steps": _opt(args, file_cfg, "max_steps", 6500, int),
    }
    host = _opt(args, file_cfg, "host", "127.0.0.1")
    port = _opt(args, file_cfg, "port", 5600, int)

    # session stats are queued by the accept thread and printed here on the
    # main thread; printing from a daemon thread can abort the interpreter
    # if Ctrl-C lands while it holds the stdout buffer lock
    events: queue.Queue = queue.Queue()
    server = ProtocolServer(host, port, defaults, events.put)
    print(f"listening on {server.address[0]}:{server.address[1]}", flush=True)

    def report(stats):
        print(f"session closed: {stats['episodes']} episodes, {stats['steps']} steps", flush=True)

    server.start()
    try:
        while True:
            try:
                report(events.get(timeout=0.5))
            except queue.Empty:
                continue
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        while True:
            try:
                report(events.get_nowait())
            except queue.Empty:
                break
    return 0


# ---------------------------------------------------------------------------
# tracks


def cmd_tracks(args) -> int:
    if args.tracks_cmd == "list":
        print(f"{'name':<12}{'segments':>9}{'length_m':>11}{'half_width':>11}"
              f"{'max|curv|':>11}  closed")
        for name in BUILTIN_TRACKS:
            t = builtin_track(name)
            curvs = [abs(s.curvature) for s in t.segments if s.curvature != 0.0]
            max_c = max(curvs) if curvs else 0.0
            print(f"{name:<12}{len(t.segments):>9}{t.total_length:>11.1f}"
                  f"{t.half_width:>11.1f}{max_c:>11.4f}  {t.closed}")
        return 0
    if args.tracks_cmd == "emit":
        if args.name not in BUILTIN_TRACKS:
            raise UsageError(f"unknown built-in track {args.name!r}; "
                             f"choose from {', '.join(BUILTIN_TRACKS)}")
        text = track_to_json(builtin_track(args.name))
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text + "\n")
            print(f"wrote {args.name} to {args.out}")
        else:
            print(text)
        return 0
    if args.tracks_cmd == "validate":
        if not os.path.exists(args.file):
            raise FileNotFoundError(f"track file not found: {args.file}")
        with open(args.file) as fh:
            try:
                t = track_from_json(fh.read())
            except TrackError as exc:
                print(f"{args.file}: {exc}", file=sys.stderr)
                return 2
        print(f"{args.file}: OK name={t.name!r} segments={len(t.segments)} "
              f"length={t.total_length:.3f} closed={t.closed}")
        return 0
    raise UsageError("tracks requires a subcommand: list, emit or validate")


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> _Parser:
    parser = _Parser(prog="lanekeep", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="{train,eval,compare,serve,tracks}")

    def common(p):
        p.add_argument("--config", help="flat key = value config file; flags override it")
        p.add_argument("--track", help="built-in track name or track JSON path")
        p.add_argument("--seed", type=int)
        p.add_argument("--noise", choices=("on", "off"))
        p.add_argument("--speed", type=float, help="vehicle speed in km/h (default 70)")
        p.add_argument("--max-steps", dest="max_steps", type=int)

    p_train = sub.add_parser("train", help="train the policy-gradient agent")
    common(p_train)
    p_train.add_argument("--steps", type=int, help="environment steps (default 200000)")
    p_train.add_argument("--out", help="output directory for checkpoint + log")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score a controller over full episodes")
    common(p_eval)
    p_eval.add_argument("--controller", choices=("lqr", "mpc", "ddpg"))
    p_eval.add_argument("--preset", type=int, help="preset row number (see data/presets.cfg)")
    p_eval.add_argument("--horizon", type=int, help="MPC horizon override")
    p_eval.add_argument("--checkpoint", help="checkpoint directory (ddpg)")
    p_eval.add_argument("--episodes", type=int)
    p_eval.add_argument("--trace", help="write a step trace CSV for episode 0")
    p_eval.add_argument("--gamma", type=float,
                        help="also report a discounted episode-0 score (analysis only)")
    p_eval.set_defaults(func=cmd_eval)

    p_cmp = sub.add_parser("compare", help="score table across tracks and setups")
    common(p_cmp)
    p_cmp.add_argument("--tracks", help="comma-separated track list (default: all built-ins)")
    p_cmp.add_argument("--controllers", help="comma-separated subset of lqr,mpc,ddpg")
    p_cmp.add_argument("--presets", help="comma-separated preset row numbers")
    p_cmp.add_argument("--seeds", type=int, help="seed bank size (default 5)")
    p_cmp.add_argument("--checkpoint", help="checkpoint directory for ddpg cells")
    p_cmp.add_argument("--jobs", type=int, help="parallel worker count")
    p_cmp.add_argument("--out", help="write the table as CSV")
    p_cmp.set_defaults(func=cmd_compare)

    p_srv = sub.add_parser("serve", help="run the TCP environment server")
    common(p_srv)
    p_srv.add_argument("--host")
    p_srv.add_argument("--port", type=int, help="TCP port; 0 picks a free one (default 5600)")
    p_srv.set_defaults(func=cmd_serve)

    p_trk = sub.add_parser("tracks", help="list, emit or validate track files")
    t_sub = p_trk.add_subparsers(dest="tracks_cmd", metavar="{list,emit,validate}")
    t_sub.add_parser("list", help="show the built-in tracks")
    t_emit = t_sub.add_parser("emit", help="write a built-in track as JSON")
    t_emit.add_argument("name")
    t_emit.add_argument("--out")
    t_val = t_sub.add_parser("validate", help="check a track JSON file")
    t_val.add_argument("file")
    p_trk.set_defaults(func=cmd_tracks, tracks_cmd=None)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        raise
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def console_main() -> None:
    sys.exit(main())
