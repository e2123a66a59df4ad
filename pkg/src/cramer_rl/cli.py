"""Command-line entry point: train, eval, verify, analyze-gradients.

Configuration is a single JSON document; any field can be overridden on the
command line with dotted-key=value arguments (values parsed as JSON, falling
back to strings).  Exit codes: 0 success, 1 runtime or probe failure, 2
usage/config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import agent as ag
from . import gauss, nn, verify
from .envs import make_env


class ConfigError(ValueError):
    pass


_AGENT_FIELDS = {f.name: f for f in dataclasses.fields(ag.AgentConfig)}
_TOP_FIELDS = ("algo", "env", "env_params", "out_dir", "seed") + tuple(_AGENT_FIELDS)

_DEFAULTS = {
    "algo": "cdsac",
    "env": "pendulum",
    "env_params": {},
    "out_dir": "runs/run",
    "seed": 0,
}


@dataclasses.dataclass
class RunConfig:
    algo: str
    env: str
    env_params: dict
    out_dir: str
    seed: int
    agent: ag.AgentConfig

    def to_json(self) -> dict:
        doc = {"algo": self.algo, "env": self.env, "env_params": dict(self.env_params),
               "out_dir": self.out_dir, "seed": self.seed}
        for name in _AGENT_FIELDS:
            if name in ("algo", "seed"):
                continue
            value = getattr(self.agent, name)
            doc[name] = list(value) if isinstance(value, tuple) else value
        return doc


def _parse_override_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply dotted-key=value strings onto a config document."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = _parse_override_value(raw)
        parts = key.split(".")
        node = doc
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return doc


def load_run_config(config_path: str | None, overrides=(), flag_overrides=None) -> RunConfig:
    """Assemble the effective RunConfig from file, dotted overrides and flags.

    Unknown keys are rejected with the offending field named.
    """
    doc = dict(_DEFAULTS)
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config document must be a JSON object")
        doc.update(loaded)
    apply_overrides(doc, overrides)
    for key, value in (flag_overrides or {}).items():
        if value is not None:
            doc[key] = value

    unknown = set(doc) - set(_TOP_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    if not isinstance(doc.get("env_params", {}), dict):
        raise ConfigError("env_params must be a JSON object")

    agent_kwargs = {}
    for name in _AGENT_FIELDS:
        if name in doc:
            agent_kwargs[name] = doc[name]
    agent_kwargs["seed"] = doc.get("seed", 0)
    agent_kwargs["algo"] = doc.get("algo", "cdsac")
    try:
        agent_cfg = ag.AgentConfig(**agent_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid agent configuration: {exc}") from exc
    try:
        return RunConfig(
            algo=agent_cfg.algo,
            env=str(doc["env"]),
            env_params=dict(doc.get("env_params", {})),
            out_dir=str(doc["out_dir"]),
            seed=int(doc["seed"]),
            agent=agent_cfg,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid run configuration: {exc}") from exc


def build_env_checked(cfg: RunConfig):
    try:
        return make_env(cfg.env, cfg.env_params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid environment configuration: {exc}") from exc


# --- checkpoints ------------------------------------------------------------------


def build_checkpoint(result: ag.TrainResult, cfg: RunConfig, step: int) -> dict:
    actor, critic = result.actor, result.critic
    return {
        "format": "cramer-rl-checkpoint-v1",
        "step": step,
        "config": cfg.to_json(),
        "actor": {
            "spec": nn.spec_to_json(actor.spec),
            "params": nn.params_to_json(actor.params),
            "action_bound": actor.action_bound.tolist(),
            "logstd_min": actor.logstd_min,
            "logstd_max": actor.logstd_max,
        },
        "critic": {
            "spec": nn.spec_to_json(critic.spec),
            "params": nn.params_to_json(critic.params),
            "distributional": critic.distributional,
            "sigma_min": critic.sigma_min,
            "sigma_max": critic.sigma_max,
        },
        "target_params": nn.params_to_json(result.target_params),
        "adam_critic": nn.adam_to_json(result.adam_critic),
        "adam_actor": nn.adam_to_json(result.adam_actor),
        "rng_state": _jsonable_rng_state(result.stream_state),
    }


def _jsonable_rng_state(state: dict) -> dict:
    def conv(x):
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, np.integer):
            return int(x)
        return x

    return conv(state)


def load_actor(doc: dict) -> ag.ActorNet:
    spec = nn.spec_from_json(doc["actor"]["spec"])
    return ag.ActorNet(
        spec=spec,
        params=nn.params_from_json(spec, doc["actor"]["params"]),
        action_bound=np.asarray(doc["actor"]["action_bound"], dtype=np.float64),
        logstd_min=float(doc["actor"]["logstd_min"]),
        logstd_max=float(doc["actor"]["logstd_max"]),
    )


def load_critic(doc: dict) -> ag.CriticNet:
    spec = nn.spec_from_json(doc["critic"]["spec"])
    return ag.CriticNet(
        spec=spec,
        params=nn.params_from_json(spec, doc["critic"]["params"]),
        distributional=bool(doc["critic"]["distributional"]),
        sigma_min=float(doc["critic"]["sigma_min"]),
        sigma_max=float(doc["critic"]["sigma_max"]),
    )


# --- subcommands ------------------------------------------------------------------


def cmd_train(args) -> int:
    try:
        cfg = load_run_config(args.config, args.overrides, {
            "seed": args.seed,
            "out_dir": args.out,
            "total_steps": args.steps,
            "algo": args.algo,
            "env": args.env,
        })
        env = build_env_checked(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")

    log_path = out / "run_log.jsonl"
    try:
        with log_path.open("w") as log_file:
            def sink(record):
                log_file.write(json.dumps(record) + "\n")

            result = ag.train(env, cfg.agent, record_sink=sink, keep_records=False)
    except ag.NonFiniteLossError as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return 1

    checkpoint = build_checkpoint(result, cfg, cfg.agent.total_steps)
    (out / "checkpoint_final.json").write_text(json.dumps(checkpoint) + "\n")
    (out / "summary.json").write_text(
        json.dumps(result.summary, indent=2, sort_keys=True) + "\n"
    )
    if result.summary["evaluations"]:
        print(
            f"best eval {result.summary['best_eval_mean']:.3f} "
            f"+- {result.summary['best_eval_std']:.3f} at step {result.summary['best_step']}"
        )
    else:
        print("no evaluations ran (total_steps too small)")
    return 0


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    try:
        doc = json.loads(path.read_text())
        if doc.get("format") != "cramer-rl-checkpoint-v1":
            raise ValueError("unrecognized checkpoint format")
        actor = load_actor(doc)
        cfg_doc = doc["config"]
        env = make_env(cfg_doc["env"], cfg_doc.get("env_params", {}))
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"cannot load checkpoint: {exc}", file=sys.stderr)
        return 1
    rng = np.random.default_rng(args.seed)
    mean, std = ag.evaluate(actor, env, args.episodes, rng)
    print(f"eval over {args.episodes} episodes: {mean:.4f} +- {std:.4f}")
    out_path = Path(args.out) if args.out else path.parent / "eval.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(
        {"episodes": args.episodes, "seed": args.seed, "mean": mean, "std": std},
        indent=2, sort_keys=True,
    ) + "\n")
    return 0


def cmd_verify(args) -> int:
    results = verify.run_probes(args.seed, args.instances)
    report = [r.to_json() for r in results]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: worst {r.worst:.3e} (threshold {r.threshold:.1e}, "
              f"{r.instances} instances)")
    if args.out:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(json.dumps(report, indent=2) + "\n")
    return 0 if all(r.passed for r in results) else 1


def cmd_analyze_gradients(args) -> int:
    if args.grid_points < 2 or args.grid_min <= 0 or args.grid_max <= args.grid_min:
        print("config error: invalid sigma grid", file=sys.stderr)
        return 2
    sigmas = np.geomspace(args.grid_min, args.grid_max, args.grid_points)
    exact = gauss.GaussianReturn(args.q_target, args.sigma_target)
    noisy = gauss.GaussianReturn(args.q_noisy, args.sigma_target)
    rows = []
    for s in sigmas:
        s = float(s)
        current = gauss.GaussianReturn(args.q_current, s)
        psi = gauss.grad_mean(current, exact)
        envelope = 2.0 / s
        delta = gauss.gradient_weight_error(current, noisy, exact)
        rows.append((s, psi, envelope, delta))
    violations = [r for r in rows if abs(r[1]) > r[2] or r[3] > r[2]]
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w") as fh:
        fh.write("sigma,psi,psi_envelope,delta_psi\n")
        for s, psi, envelope, delta in rows:
            fh.write(f"{s!r},{psi!r},{envelope!r},{delta!r}\n")
    print(f"wrote {len(rows)} rows to {out_path}")
    if violations:
        print(f"envelope violated on {len(violations)} rows", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cramer-rl",
        description="energy-distance distributional soft actor-critic toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training session")
    p_train.add_argument("--config", default=None, help="JSON config path")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None, help="output directory")
    p_train.add_argument("--steps", type=int, default=None, help="total environment steps")
    p_train.add_argument("--algo", choices=["cdsac", "sac"], default=None)
    p_train.add_argument("--env", default=None)
    p_train.add_argument("overrides", nargs="*", help="dotted-key=value config overrides")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--episodes", type=int, default=100)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", default=None, help="where to write eval.json")
    p_eval.set_defaults(fn=cmd_eval)

    p_verify = sub.add_parser("verify", help="run the operator/iteration certification probes")
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--instances", type=int, default=100)
    p_verify.add_argument("--out", default=None, help="where to write the JSON report")
    p_verify.set_defaults(fn=cmd_verify)

    p_an = sub.add_parser("analyze-gradients",
                          help="sweep the mean-gradient weight and its noise error over sigma")
    p_an.add_argument("--q-current", type=float, default=0.0)
    p_an.add_argument("--q-target", type=float, default=1.0)
    p_an.add_argument("--q-noisy", type=float, default=2.0)
    p_an.add_argument("--sigma-target", type=float, default=1.0)
    p_an.add_argument("--grid-min", type=float, default=0.01)
    p_an.add_argument("--grid-max", type=float, default=1000.0)
    p_an.add_argument("--grid-points", type=int, default=200)
    p_an.add_argument("--out", default="gradient_curves.csv")
    p_an.set_defaults(fn=cmd_analyze_gradients)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
