"""Command-line entry point: ``wppg {train,theory,gradcheck,eval}``.

Every subcommand accepts ``--config FILE`` holding flat ``key=value`` lines;
explicit flags override file values. Each run writes a ``.config`` echo of
every effective parameter next to its output.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields

import numpy as np

from . import agent as ag
from . import theory_lab as tl
from .envs import ENVS, make_env
from .gradcheck import run_all
from .numeric import Rng


class ConfigError(ValueError):
    pass


def read_config_file(path: str) -> dict[str, str]:
    out = {}
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config: {path}:{n}: expected key=value, got {line!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _parse_value(key: str, raw, kind):
    if not isinstance(raw, str):
        return raw
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if kind is int:
            try:
                return int(raw)
            except ValueError:
                f = float(raw)  # accepts 1e5
                if not f.is_integer():
                    raise
                return int(f)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_echo(path: str, params: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        for key in sorted(params):
            fh.write(f"{key}={_format_value(params[key])}\n")


_TRAIN_FIELDS = {f.name: f for f in fields(ag.TrainConfig)}
_FIELD_KIND = {"hidden": tuple, "activation": str}


def _field_kind(name: str):
    if name in _FIELD_KIND:
        return _FIELD_KIND[name]
    default = _TRAIN_FIELDS[name].default
    return int if isinstance(default, int) and not isinstance(default, bool) else float


def merge(file_values: dict, flag_values: dict, allowed: dict) -> dict:
    """Flags override file values; unknown keys are configuration errors."""
    merged = {}
    for key, raw in file_values.items():
        if key not in allowed:
            raise ConfigError(f"{key}: unknown configuration key")
        merged[key] = _parse_value(key, raw, allowed[key])
    for key, value in flag_values.items():
        if value is not None:
            merged[key] = _parse_value(key, value, allowed[key])
    return merged


def _seeds(args) -> list[int]:
    if args.seeds:
        try:
            seeds = [int(x) for x in args.seeds.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"seeds: cannot parse {args.seeds!r}") from None
        if not seeds:
            raise ConfigError("seeds: empty list")
        return seeds
    if args.seed is None:
        raise ConfigError("seed: required (use --seed N or --seeds a,b,c)")
    return [args.seed]


# --- train -------------------------------------------------------------------

def _train_one(job: dict) -> str:
    cfg = ag.TrainConfig(**job["cfg"])
    env = make_env(job["env"])
    stem = os.path.join(job["out"], f"{job['env']}_{job['algo']}_seed{job['seed']}")
    result = ag.train(env, job["algo"], cfg, job["seed"])
    ag.write_curve(stem + ".csv", result.curve)
    ag.save_checkpoint(stem + ".ckpt", result.agent, job["env"])
    return stem + ".csv"


def cmd_train(args, file_values) -> int:
    allowed = {name: _field_kind(name) for name in _TRAIN_FIELDS}
    allowed.update({"env": str, "algo": str, "seed": int, "out": str})
    flags = {name: getattr(args, name, None) for name in allowed}
    params = merge(file_values, flags, allowed)
    env = params.pop("env", "pointmass")
    algo = params.pop("algo", "wppg")
    out = params.pop("out", "runs")
    file_seed = params.pop("seed", None)
    if args.seed is None and not args.seeds and file_seed is not None:
        args.seed = file_seed
    if env not in ENVS:
        raise ConfigError(f"env: unknown environment {env!r}; choose from {sorted(ENVS)}")
    if algo not in ag.ALGOS:
        raise ConfigError(f"algo: unknown algorithm {algo!r}; choose from {list(ag.ALGOS)}")
    seeds = _seeds(args)
    try:
        cfg = ag.TrainConfig(**params)
    except (ag.ConfigFieldError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    os.makedirs(out, exist_ok=True)
    jobs = []
    for seed in seeds:
        echo = {"env": env, "algo": algo, "seed": seed, **ag.config_dict(cfg)}
        write_echo(os.path.join(out, f"{env}_{algo}_seed{seed}.config"), echo)
        jobs.append({"env": env, "algo": algo, "seed": seed, "out": out, "cfg": ag.config_dict(cfg)})
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            paths = list(pool.map(_train_one, jobs))
    else:
        paths = [_train_one(j) for j in jobs]
    for p in paths:
        print(p)
    return 0


# --- theory ------------------------------------------------------------------

_THEORY_KEYS = {"mdp": str, "tau": float, "eta": float, "steps": int, "mode": str, "seed": int,
                "out": str, "nu": str}


def build_mdp(spec: str, seed: int) -> tl.FiniteMdp:
    if spec in tl.BUILTIN_MDPS:
        return tl.builtin_mdp(spec)
    if spec.startswith("random:"):
        try:
            _, S, n, gamma = spec.split(":")
            return tl.random_mdp(int(S), int(n), float(gamma), Rng(seed, ("mdp", spec)))
        except ValueError as exc:
            raise ConfigError(f"mdp: bad random spec {spec!r} ({exc}); expected random:S:n:gamma") from None
    raise ConfigError(f"mdp: unknown MDP {spec!r}; use {sorted(tl.BUILTIN_MDPS)} or random:S:n:gamma")


def theory_payload(mdp: tl.FiniteMdp, tau: float, eta: float, steps: int, mode: str, nu: str) -> dict:
    pi0 = tl.TabularPolicy.uniform(mdp.grid, mdp.n_states)
    traj = tl.wppg_iterate(mdp, pi0, tau, eta, steps, mode=mode, nu=nu)
    payload = {"J_star": traj.J_star, "nu": [float(x) for x in traj.nu], "records": traj.records()}
    try:
        fit = tl.fit_contraction([r["J_gap"] for r in payload["records"]],
                                 [r["D"] for r in payload["records"]], tau)
        payload["contraction"] = {"ratio": fit.ratio, "worst_step": fit.worst_step, "lambda_hat": fit.lam,
                                  "points": fit.n_points, "floor": fit.floor}
    except ValueError:
        payload["contraction"] = None
    return payload


def cmd_theory(args, file_values) -> int:
    flags = {k: getattr(args, k, None) for k in _THEORY_KEYS}
    p = merge(file_values, flags, _THEORY_KEYS)
    p.setdefault("mdp", "builtin3")
    p.setdefault("tau", 0.1)
    p.setdefault("eta", 0.5)
    p.setdefault("steps", 60)
    p.setdefault("mode", "exact")
    p.setdefault("nu", "visitation")
    p.setdefault("out", "theory.json")
    if p.get("seed") is None:
        raise ConfigError("seed: required (use --seed N)")
    if p["mode"] not in ("exact", "split"):
        raise ConfigError(f"mode: expected exact or split, got {p['mode']!r}")
    if p["nu"] not in ("visitation", "stationary"):
        raise ConfigError(f"nu: expected visitation or stationary, got {p['nu']!r}")
    for key in ("tau", "eta"):
        if not p[key] > 0:
            raise ConfigError(f"{key}: must be > 0, got {p[key]}")
    if p["steps"] < 0:
        raise ConfigError(f"steps: must be >= 0, got {p['steps']}")
    mdp = build_mdp(p["mdp"], p["seed"])
    payload = {"config": {k: p[k] for k in sorted(p) if k != "out"}}
    payload.update(theory_payload(mdp, p["tau"], p["eta"], p["steps"], p["mode"], p["nu"]))
    write_echo(p["out"] + ".config", p)
    with open(p["out"], "w", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    J = [r["J"] for r in payload["records"]]
    print(f"J_star={payload['J_star']!r} J_final={J[-1]!r} min_dJ={float(min(np.diff(J), default=0.0))!r}")
    return 0


# --- gradcheck / eval ----------------------------------------------------------

def cmd_gradcheck(args, file_values) -> int:
    p = merge(file_values, {"seed": args.seed}, {"seed": int})
    if p.get("seed") is None:
        raise ConfigError("seed: required (use --seed N)")
    results = run_all(p["seed"])
    for r in results:
        print(f"{r.name}: instances={r.instances} max_rel_error={r.max_rel_error:.3e}")
    worst = max(r.max_rel_error for r in results)
    print(f"max_rel_error={worst:.3e}")
    return 0 if worst < 1e-4 else 1


def cmd_eval(args, file_values) -> int:
    keys = {"checkpoint": str, "env": str, "episodes": int, "seed": int, "out": str}
    p = merge(file_values, {k: getattr(args, k, None) for k in keys}, keys)
    if "checkpoint" not in p:
        raise ConfigError("checkpoint: required")
    if p.get("seed") is None:
        raise ConfigError("seed: required (use --seed N)")
    episodes = p.get("episodes", 10)
    if episodes < 1:
        raise ConfigError(f"episodes: must be >= 1, got {episodes}")
    try:
        actor, header = ag.load_checkpoint(p["checkpoint"])
    except (OSError, ValueError) as exc:
        raise ConfigError(f"checkpoint: {exc}") from None
    env_name = p.get("env", header["env"])
    if env_name not in ENVS:
        raise ConfigError(f"env: unknown environment {env_name!r}")
    env = make_env(env_name)
    if env.spec.state_dim != actor.state_dim or env.spec.action_dim != actor.action_dim:
        raise ConfigError(f"env: {env_name} does not match the checkpoint dimensions")
    rets = ag.evaluate(actor, env, episodes, p["seed"])
    summary = {"env": env_name, "algo": header["algo"], "episodes": episodes, "seed": p["seed"],
               "mean_return": float(rets.mean()), "std_return": float(rets.std()),
               "returns": [float(x) for x in rets]}
    text = json.dumps(summary, sort_keys=True)
    if "out" in p:
        write_echo(p["out"] + ".config", {**p, "episodes": episodes, "env": env_name})
        with open(p["out"], "w", newline="\n") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wppg", description="Wasserstein proximal policy gradient laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train an agent and write a learning curve CSV")
    tr.add_argument("--config")
    tr.add_argument("--env")
    tr.add_argument("--algo")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--seeds", help="comma-separated seeds; one independent run each")
    tr.add_argument("--jobs", type=int, default=1, help="parallel processes for --seeds")
    tr.add_argument("--out", help="output directory (default runs)")
    for name in _TRAIN_FIELDS:
        tr.add_argument("--" + name.replace("_", "-"), dest=name)

    th = sub.add_parser("theory", help="iterate the tabular proximal scheme and write JSON")
    th.add_argument("--config")
    th.add_argument("--mdp")
    th.add_argument("--tau")
    th.add_argument("--eta")
    th.add_argument("--steps")
    th.add_argument("--mode")
    th.add_argument("--nu")
    th.add_argument("--seed", type=int)
    th.add_argument("--out")

    gc = sub.add_parser("gradcheck", help="finite-difference checks of all analytic gradients")
    gc.add_argument("--config")
    gc.add_argument("--seed", type=int)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--config")
    ev.add_argument("--checkpoint")
    ev.add_argument("--env")
    ev.add_argument("--episodes")
    ev.add_argument("--seed", type=int)
    ev.add_argument("--out")
    return parser


COMMANDS = {"train": cmd_train, "theory": cmd_theory, "gradcheck": cmd_gradcheck, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        file_values = read_config_file(args.config) if args.config else {}
        return COMMANDS[args.command](args, file_values)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime fault
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
