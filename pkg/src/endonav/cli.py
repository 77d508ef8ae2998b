"""Command-line entry point: train / eval / baseline / replay / serve / compare.

Every run writes a frozen copy of its fully resolved configuration next to
its outputs. Exit codes: 0 ok, 2 configuration error, 3 run failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from .baseline import BaselineController
from .colon import PRESET_NAMES, generate_preset, load_model
from .env import EndoscopyEnv
from .episodes import CenterlineFollower, run_episode
from .logs import EpisodeLog
from .metrics import compute_scorecard, scorecard_table
from .net import NetworkSpec, PolicyValueNet, load_checkpoint
from .ppo import PPOConfig, TrainPhase, resume, train
from .sim import ActionTriple

PAPER_SCALE_STEPS = 1_500_000


class ConfigError(ValueError):
    pass


def load_colon(spec: str):
    if spec.lower() in PRESET_NAMES:
        return generate_preset(spec.lower())
    if os.path.exists(spec):
        return load_model(spec)
    raise ConfigError(f"unknown model {spec!r}: not a preset or a file")


class PolicyController:
    """Frozen visuomotor policy as an episode controller (stochastic, the
    same behaviour policy used in training)."""

    name = "dvc"

    def __init__(self, net: PolicyValueNet, seed: int = 0, greedy: bool = False):
        self.net = net
        self.seed = seed
        self.greedy = greedy
        self._episode = 0
        self.rng = None
        self.state = None

    def reset(self):
        self.rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, self._episode]))
        self._episode += 1
        self.state = self.net.zero_state(1)

    def act(self, obs, detection, env) -> ActionTriple:
        obs_f = obs[None].astype(np.float32) / 255.0
        if self.greedy:
            probs, _, self.state = self.net.head_probs(obs_f, self.state)
            return ActionTriple(*(int(np.argmax(p[0])) - 1 for p in probs))
        idx, _, _, self.state = self.net.act(obs_f, self.state, self.rng)
        return ActionTriple(*(int(v) - 1 for v in idx[0]))


def make_controller(spec: str, seed: int = 0):
    if spec == "baseline":
        return BaselineController(), "baseline"
    if spec == "script":
        return CenterlineFollower(), "script"
    if spec.startswith("dvc:"):
        path = spec[4:]
        if not os.path.exists(path):
            raise ConfigError(f"checkpoint not found: {path}")
        net, _, _, _ = load_checkpoint(path)
        return PolicyController(net, seed=seed), "dvc"
    raise ConfigError(f"unknown controller {spec!r} "
                      "(use dvc:<ckpt>|baseline|script)")


def freeze_config(out_dir: str, args: argparse.Namespace):
    os.makedirs(out_dir, exist_ok=True)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)


def apply_config_file(args: argparse.Namespace):
    if not getattr(args, "config", None):
        return
    try:
        with open(args.config) as f:
            overlay = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"bad config file: {e}") from None
    for k, v in overlay.items():
        if not hasattr(args, k):
            raise ConfigError(f"config key {k!r} is not a known option")
        if getattr(args, k) == _DEFAULTS.get(k, None):
            setattr(args, k, v)


_DEFAULTS: dict = {}


# --------------------------------------------------------------------------

def cmd_train(args) -> int:
    phases_arg = args.phases or f"{args.model}:{args.steps}"
    phases = []
    for part in phases_arg.split(","):
        name, _, steps = part.partition(":")
        model = load_colon(name)
        steps = int(steps or args.steps)
        phases.append(TrainPhase(model.name.lower(),
                                 lambda i, m=model: EndoscopyEnv(
                                     m, obs_size=args.obs_size),
                                 steps))
    total = sum(p.steps for p in phases)
    cfg = PPOConfig(seed=args.seed, lr=args.lr, n_envs=args.n_envs,
                    max_steps_total=total)
    print(f"training {phases_arg} seed={args.seed} total={total} steps "
          f"(paper scale: {PAPER_SCALE_STEPS}; "
          f"{'paper-scale run' if total >= PAPER_SCALE_STEPS else 'desk-scale run'})")
    freeze_config(args.out, args)

    if args.resume:
        net, optimizer, extra = resume(args.resume)
        start_phase = int(extra.get("phase", -1)) + 1
        print(f"resuming after phase {extra.get('phase_name')} "
              f"(next phase index {start_phase})")
    else:
        net = PolicyValueNet(NetworkSpec(), seed=args.seed)
        optimizer = None
        start_phase = 0

    stop = None
    if args.stop_return is not None:
        stop = (lambda row: row["norm_return"] is not None
                and row["norm_return"] >= args.stop_return)
    result = train(net, cfg, phases, out_dir=args.out, optimizer=optimizer,
                   stop_when=stop, start_phase=start_phase, quiet=args.quiet)
    print(f"trained {result.env_steps} env steps; "
          f"checkpoints: {', '.join(result.checkpoints)}")
    return 0


def cmd_eval(args) -> int:
    model = load_colon(args.model)
    controller, cid = make_controller(args.controller, seed=args.seed)
    freeze_config(args.out, args)
    cards = []
    for ep in range(args.episodes):
        env = EndoscopyEnv(model, obs_size=args.obs_size)
        log = run_episode(env, controller, seed=args.seed * 10_000 + ep,
                          controller_id=cid)
        log_path = os.path.join(args.out, f"episode_{ep:03d}.jsonl")
        log.save(log_path)
        card = compute_scorecard(log)
        cards.append(card)
        with open(os.path.join(args.out, f"episode_{ep:03d}.summary.json"),
                  "w") as f:
            json.dump(card.as_dict(), f, indent=2, sort_keys=True)
    table = scorecard_table(cards, [f"ep{ep:03d}" for ep in range(len(cards))])
    with open(os.path.join(args.out, "scorecards.tsv"), "w") as f:
        f.write(table + "\n")
    summary = aggregate(cards, model.name, cid)
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    print(table)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def aggregate(cards, model_name, controller_id) -> dict:
    ok = [c for c in cards if c.outcome == "success"]
    return {
        "model": model_name, "controller": controller_id,
        "episodes": len(cards),
        "success_rate": len(ok) / len(cards) if cards else 0.0,
        "median_avg_ld": float(np.median([c.average_ld for c in cards])),
        "median_norm_distance": float(np.median([c.normalized_distance
                                                 for c in cards])),
        "median_toi_s": float(np.median([c.toi_s for c in ok])) if ok else None,
        "total_perforations": int(sum(c.perforation_count for c in cards)),
        "median_jerk_cm_s3": float(np.median([c.jerk_index_cm_s3
                                              for c in cards])),
        "outcomes": {o: sum(1 for c in cards if c.outcome == o)
                     for o in ("success", "returned", "destabilized",
                               "timeout")},
    }


def cmd_baseline(args) -> int:
    args.controller = "baseline"
    return cmd_eval(args)


def cmd_replay(args) -> int:
    try:
        log = EpisodeLog.load(args.log)
    except (ValueError, OSError) as e:
        print(f"cannot read log: {e}", file=sys.stderr)
        return 3
    card = compute_scorecard(log)
    print(json.dumps(card.as_dict(), indent=2, sort_keys=True))
    stored = args.log.replace(".jsonl", ".summary.json")
    if os.path.exists(stored):
        with open(stored) as f:
            prev = json.load(f)
        if prev != json.loads(json.dumps(card.as_dict())):
            print("MISMATCH: recomputed scorecard differs from stored summary",
                  file=sys.stderr)
            return 3
        print("recomputed scorecard matches stored summary")
    if args.frames > 0:
        from .render import Renderer, save_ppm
        from .sim import quat_to_matrix
        model = load_colon(args.model or log.header["model"].lower())
        renderer = Renderer(model)
        out = args.out or os.path.dirname(os.path.abspath(args.log))
        os.makedirs(out, exist_ok=True)
        idx = np.linspace(0, len(log.steps) - 1, args.frames).astype(int)
        for i in idx:
            s = log.steps[i]
            frame = renderer.render(s.position, quat_to_matrix(s.orientation),
                                    size=128)
            save_ppm(frame, os.path.join(out, f"replay_{s.t_index:05d}.ppm"))
        print(f"wrote {len(idx)} re-rendered frames to {out}")
    return 0


def cmd_serve(args) -> int:
    from .service import SupervisionServer
    from .supervision import (ScriptedSupervisor, SupervisionConfig,
                              SupervisionSession)
    model = load_colon(args.model)
    controller, cid = make_controller(args.controller, seed=args.seed)
    if args.out:
        freeze_config(args.out, args)
    script = None
    if args.scripted_override is not None:
        script = ScriptedSupervisor(
            override_at_step=args.scripted_override,
            manual_actions=[(0, 0, 0, True)] * args.scripted_manual_steps)
    env = EndoscopyEnv(model, obs_size=args.obs_size)
    session = SupervisionSession(
        env, controller, cid,
        SupervisionConfig(delta_t=args.delta_t, rate_hz=args.rate,
                          max_steps=args.steps), seed=args.seed,
        scripted_supervisor=script)
    if args.headless:
        log = session.run()
    else:
        server = SupervisionServer(session, host=args.host, port=args.port,
                                   ws_port=args.ws_port)
        server.start()
        print(f"serving on tcp://{args.host}:{server.port} "
              f"ws://{args.host}:{server.ws_port} — one client at a time")
        log = server.run_session()
        server.close()
    ledger = [{"step": i.step, "kind": i.kind, "duration": i.duration_steps}
              for i in session.interventions]
    print(json.dumps({"terminal": log.terminal, "steps": len(log.steps) - 1,
                      "interventions": ledger}, indent=2))
    if args.out:
        log.save(os.path.join(args.out, "session.jsonl"))
        with open(os.path.join(args.out, "ledger.json"), "w") as f:
            json.dump(ledger, f, indent=2)
    return 0


def cmd_compare(args) -> int:
    rows = []
    for path in args.inputs:
        with open(os.path.join(path, "summary.json")) as f:
            rows.append(json.load(f))
    cols = ["model", "controller", "episodes", "success_rate",
            "median_avg_ld", "median_norm_distance", "median_toi_s",
            "total_perforations", "median_jerk_cm_s3"]
    print("\t".join(cols))
    for r in rows:
        print("\t".join(str(r.get(c)) for c in cols))
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w") as f:
            json.dump(rows, f, indent=2, sort_keys=True)
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="endonav",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--model", default="c0",
                        help="c0|c1|c2|c3 or a model file path")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--obs-size", type=int, default=128, choices=(128,))
        sp.add_argument("--config", help="JSON overlay for these options")

    t = sub.add_parser("train", help="train the visuomotor agent")
    common(t)
    t.add_argument("--steps", type=int, default=200_000,
                   help="env steps per phase (desk default; paper 1.5M)")
    t.add_argument("--phases", help="curriculum, e.g. c0:1000000,c1:500000")
    t.add_argument("--out", required=True)
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--n-envs", type=int, default=8)
    t.add_argument("--stop-return", type=float, default=None,
                   help="early-stop when the normalized return reaches this")
    t.add_argument("--resume", help="phase checkpoint to continue from")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out a frozen controller")
    common(e)
    e.add_argument("--controller", required=True,
                   help="dvc:<ckpt>|baseline|script")
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baseline", help="eval shortcut for the rule-based "
                                        "proportional controller")
    common(b)
    b.add_argument("--episodes", type=int, default=20)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_baseline)

    r = sub.add_parser("replay", help="recompute a scorecard from a log")
    r.add_argument("--log", required=True)
    r.add_argument("--model", help="model for frame re-render "
                                   "(defaults to the log header)")
    r.add_argument("--frames", type=int, default=0,
                   help="re-render N frames from logged poses")
    r.add_argument("--out")
    r.set_defaults(func=cmd_replay)

    s = sub.add_parser("serve", help="run a supervised session over sockets")
    common(s)
    s.add_argument("--controller", default="baseline",
                   help="dvc:<ckpt>|baseline|script")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=7350)
    s.add_argument("--ws-port", type=int, default=7351)
    s.add_argument("--rate", type=float, default=30.0,
                   help="control rate pacing; 0 = free-run")
    s.add_argument("--steps", type=int, default=10_000)
    s.add_argument("--delta-t", type=int, default=50)
    s.add_argument("--headless", action="store_true",
                   help="no sockets; run to completion (CI mode)")
    s.add_argument("--scripted-override", type=int, default=None,
                   help="headless script: override at this step")
    s.add_argument("--scripted-manual-steps", type=int, default=30)
    s.add_argument("--out")
    s.set_defaults(func=cmd_serve)

    c = sub.add_parser("compare", help="merge eval summaries into one table")
    c.add_argument("--inputs", nargs="+", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    global _DEFAULTS
    _DEFAULTS = {a.dest: a.default for g in parser._subparsers._group_actions
                 for a in g.choices[args.cmd]._actions}
    try:
        apply_config_file(args)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 3
    except Exception as e:   # run failure
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
