"""Command-line experiment runner.

Every subcommand takes ``--config FILE.json`` whose keys are the long option
names (dashes or underscores); explicit flags override the file, which
overrides built-in defaults. The resolved settings are written to
``<out>/config.json``.

Exit codes: 1 configuration, 2 input/output, 3 backend, 4 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .agents import (
    critic_controller,
    fixed_time_controller,
    greedy_stub_controller,
    llm_controller,
    maxpressure_controller,
    random_controller,
)
from .critic import CriticParams, TrainCfg, filter_trajectories, train, transitions_from_log
from .errors import (
    BackendError,
    ConfigError,
    ControllerError,
    DivergenceError,
    ParseError,
    TscError,
)
from .finetune import (
    build_ranking_batches,
    export_ift_dataset,
    rbc_loss,
    read_ranking_batches,
    read_records,
    write_ranking_batches,
    write_records,
)
from .llmclient import BackendConfig, ChatClient, make_backend
from .metrics import MetricsReport, format_comparison, write_comparison_csv
from .netmodel import load_flow, load_roadnet
from .scenarios import grid_scenario, ordering_grid, toy_intersection
from .simcore import EpisodeLog, SimConfig, run_episode

log = logging.getLogger("tsclab")

EXIT_CONFIG, EXIT_IO, EXIT_BACKEND, EXIT_DIVERGENCE = 1, 2, 3, 4

CONTROLLERS = ("random", "fixedtime", "maxpressure", "greedy", "llm", "critic")


@dataclass(frozen=True)
class Opt:
    flag: str
    default: Any = None
    type: Callable | None = str
    help: str = ""
    nargs: str | None = None

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


COMMON = [
    Opt("--config", None, str, "JSON file with option values"),
    Opt("--out", "runs/out", str, "output directory"),
    Opt("--seed", 0, int, "random seed"),
]

SCENARIO = [
    Opt("--roadnet", None, str, "CityFlow roadnet JSON"),
    Opt("--flow", None, str, "CityFlow flow JSON"),
    Opt("--synthetic", None, str, "synthetic grid RxC (uniform demand) instead of files"),
    Opt("--scenario", None, str, "named synthetic scenario: ordering or toy"),
    Opt("--rate", 300.0, float, "synthetic demand, vehicles per hour per entry road"),
    Opt("--episode-length", 3600, int, "simulated seconds"),
    Opt("--green", 30, int, "green duration, s"),
    Opt("--yellow", 3, int, "yellow duration, s"),
    Opt("--all-red", 2, int, "all-red duration, s"),
    Opt("--workers", 1, int, "concurrent controller queries per switching step"),
]

CONTROLLER = [
    Opt("--controller", "maxpressure", str, f"one of {', '.join(CONTROLLERS)}"),
    Opt("--order", None, str, "fixed-time phase order, comma separated"),
    Opt("--critic", None, str, "critic weight file (critic controller, filter, rbc)"),
    Opt("--backend", None, str, "backend JSON file (llm controller)"),
]

COMMANDS: dict[str, list[Opt]] = {
    "run": SCENARIO + CONTROLLER,
    "collect": SCENARIO + CONTROLLER + [
        Opt("--k", 1, int, "trajectories sampled per switching step"),
        Opt("--resume", False, None, "continue from a resume marker in --out"),
    ],
    "train-critic": SCENARIO + [
        Opt("--episodes", None, str, "episode logs to learn from", nargs="*"),
        Opt("--collect-seeds", 5, int, "random-policy episodes to collect when no logs are given"),
        Opt("--gamma", 0.8, float, "discount"),
        Opt("--lr", 1e-3, float, "learning rate"),
        Opt("--steps", 2000, int, "gradient steps"),
        Opt("--batch-size", 3000, int, "replay sample size"),
        Opt("--target-sync", 200, int, "target network sync period"),
    ],
    "filter": [
        Opt("--records", None, str, "reasoning records JSONL"),
        Opt("--critic", None, str, "critic weight file; zero critic if omitted"),
        Opt("--ift", None, str, "also export the kept records as an IFT dataset here"),
    ],
    "export-ift": [
        Opt("--records", None, str, "reasoning records JSONL"),
    ],
    "rbc": [
        Opt("--batches", None, str, "ranking batch JSONL"),
        Opt("--records", None, str, "reasoning records JSONL (grouped into batches)"),
        Opt("--critic", None, str, "critic weight file; zero critic if omitted"),
        Opt("--beta", 1.0, float, "boundary margin"),
    ],
    "report": [
        Opt("--logs", None, str, "episode logs or report JSON files", nargs="*"),
        Opt("--labels", None, str, "labels, one per input", nargs="*"),
        Opt("--csv", None, str, "write the comparison table here"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsclab", description="Traffic signal control experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        for o in COMMON + opts:
            if o.type is None:
                p.add_argument(o.flag, action="store_true", default=None, help=o.help)
            else:
                p.add_argument(o.flag, type=o.type, default=None, nargs=o.nargs, help=o.help)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags, in that order."""
    opts = COMMON + COMMANDS[command]
    known = {o.dest: o for o in opts}
    cfg = {o.dest: o.default for o in opts}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        for key, value in data.items():
            dest = key.replace("-", "_")
            if dest not in known or dest == "config":
                raise ConfigError(f"{args.config}: unknown option {key!r} for {command}")
            cfg[dest] = value
    for dest in known:
        value = getattr(args, dest, None)
        if value is not None:
            cfg[dest] = value
    return cfg


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, command: str, cfg: dict) -> None:
    data = {"command": command, "version": __version__, **cfg}
    (out / "config.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(cfg: dict, *keys: str) -> None:
    for key in keys:
        if cfg.get(key) in (None, "", []):
            raise ConfigError(f"--{key.replace('_', '-')} is required")


def _scenario(cfg: dict):
    sources = [k for k in ("flow", "synthetic", "scenario") if cfg.get(k)]
    if len(sources) != 1:
        raise ConfigError("give exactly one of --flow, --synthetic or --scenario")
    length = int(cfg["episode_length"])
    if cfg.get("flow"):
        _require(cfg, "roadnet")
        network = load_roadnet(cfg["roadnet"])
        return network, load_flow(cfg["flow"], network)
    if cfg.get("roadnet"):
        raise ConfigError("--roadnet needs --flow")
    if cfg.get("synthetic"):
        return grid_scenario(cfg["synthetic"], int(cfg["seed"]), float(cfg["rate"]), length)
    named = {"ordering": ordering_grid, "toy": toy_intersection}
    if cfg["scenario"] not in named:
        raise ConfigError(f"unknown scenario {cfg['scenario']!r}; choose from {sorted(named)}")
    return named[cfg["scenario"]](int(cfg["seed"]), length)


def _sim_config(cfg: dict) -> SimConfig:
    return SimConfig(
        green_duration=int(cfg["green"]), yellow_duration=int(cfg["yellow"]),
        all_red_duration=int(cfg["all_red"]), episode_length=int(cfg["episode_length"]),
        seed=int(cfg["seed"]),
    )


def _load_backend(path: str, transcript: Path | None) -> ChatClient:
    try:
        spec = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    fields = set(BackendConfig.__dataclass_fields__)
    config = BackendConfig.from_dict({k: v for k, v in spec.items() if k in fields})
    backend = make_backend({k: v for k, v in spec.items() if k not in fields}, config)
    return ChatClient(config, backend, transcript)


def _critic(cfg: dict) -> CriticParams:
    return CriticParams.load(cfg["critic"]) if cfg.get("critic") else CriticParams.zeros()


def _controller(cfg: dict, out: Path, k: int = 1, strict: bool = False):
    kind = cfg["controller"]
    if kind == "random":
        return random_controller(int(cfg["seed"]))
    if kind == "fixedtime":
        order = cfg.get("order")
        if isinstance(order, str):
            order = [p.strip() for p in order.split(",")]
        return fixed_time_controller(order) if order else fixed_time_controller()
    if kind == "maxpressure":
        return maxpressure_controller()
    if kind == "greedy":
        return greedy_stub_controller()
    if kind == "critic":
        _require(cfg, "critic")
        return critic_controller(_critic(cfg))
    if kind == "llm":
        _require(cfg, "backend")
        client = _load_backend(cfg["backend"], out / "transcript.jsonl")
        return llm_controller(client, k=k, strict=strict)
    raise ConfigError(f"unknown controller {kind!r}; choose from {', '.join(CONTROLLERS)}")


def _write_report(out: Path, episode: EpisodeLog, label: str) -> MetricsReport:
    episode.save(out / "episode.jsonl")
    report = MetricsReport.from_log(episode, label)
    report.save(out / "report.json")
    (out / "report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    return report


def _write_llm_outputs(out: Path, controller, append: bool = False) -> int:
    mode = "a" if append else "w"
    with open(out / "fallbacks.jsonl", mode, encoding="utf-8") as fh:
        for row in controller.fallbacks:
            fh.write(json.dumps(row) + "\n")
    path = out / "records.jsonl"
    if append and path.exists():
        previous = read_records(path)
        return write_records(previous + controller.records, path)
    return write_records(controller.records, path)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_run(cfg: dict) -> int:
    out = _out_dir(cfg)
    _snapshot(out, "run", cfg)
    network, flow = _scenario(cfg)
    controller = _controller(cfg, out)
    episode = run_episode(network, flow, controller, _sim_config(cfg), workers=int(cfg["workers"]))
    report = _write_report(out, episode, cfg["controller"])
    if cfg["controller"] == "llm":
        _write_llm_outputs(out, controller)
    print(report.to_text())
    return 0


RESUME_MARKER = "resume.json"


def cmd_collect(cfg: dict) -> int:
    """Run an LLM-controlled episode and keep every parsed trajectory.

    If the backend gives up mid-episode, the records so far are written with a
    resume marker holding the executed decisions; ``--resume`` replays those
    decisions without querying the backend and continues from there.
    """
    if cfg["controller"] != "llm":
        cfg = {**cfg, "controller": "llm"}
    out = _out_dir(cfg)
    marker = out / RESUME_MARKER
    replay = {}
    if cfg.get("resume"):
        if not marker.exists():
            raise ConfigError(f"--resume given but {marker} does not exist")
        state = json.loads(marker.read_text(encoding="utf-8"))
        replay = {(int(t), inter): phase for t, inter, phase in state["decisions"]}
    else:
        _snapshot(out, "collect", cfg)
    network, flow = _scenario(cfg)
    controller = _controller(cfg, out, k=int(cfg["k"]), strict=True)
    controller.replay_decisions(replay)
    try:
        episode = run_episode(network, flow, controller, _sim_config(cfg), workers=int(cfg["workers"]))
    except ControllerError as exc:
        if not isinstance(exc.__cause__, BackendError):
            raise
        n = _write_llm_outputs(out, controller, append=bool(replay))
        marker.write_text(json.dumps({
            "reason": str(exc.__cause__),
            "decisions": [list(d) for d in controller.decisions],
        }) + "\n", encoding="utf-8")
        print(f"backend failed; wrote {n} records and {marker}", file=sys.stderr)
        raise exc.__cause__
    n = _write_llm_outputs(out, controller, append=bool(replay))
    if marker.exists():
        marker.unlink()
    report = _write_report(out, episode, "llm")
    print(report.to_text())
    print(f"records: {n}")
    return 0


def cmd_train_critic(cfg: dict) -> int:
    out = _out_dir(cfg)
    _snapshot(out, "train-critic", cfg)
    transitions = []
    if cfg.get("episodes"):
        for path in cfg["episodes"]:
            transitions += transitions_from_log(EpisodeLog.load(path))
    else:
        if not any(cfg.get(k) for k in ("flow", "synthetic", "scenario")):
            cfg = {**cfg, "scenario": "toy"}
        base = int(cfg["seed"])
        for i in range(int(cfg["collect_seeds"])):
            sub = {**cfg, "seed": base + 1000 + i}
            network, flow = _scenario(sub)
            episode = run_episode(network, flow, random_controller(sub["seed"]), _sim_config(sub))
            transitions += transitions_from_log(episode)
    train_cfg = TrainCfg(lr=float(cfg["lr"]), gamma=float(cfg["gamma"]), target_sync=int(cfg["target_sync"]),
                         steps=int(cfg["steps"]), batch_size=int(cfg["batch_size"]), seed=int(cfg["seed"]))
    result = train(transitions, train_cfg)
    result.params.save(out / "critic.json")
    result.save_loss_curve(out / "loss_curve.csv")
    final = f"{result.losses[-1]:.4f}" if result.losses else "n/a"
    print(f"transitions: {len(transitions)}  steps: {len(result.losses)}  final loss: {final}")
    print(f"weights sha256: {result.params.digest()}")
    return 0


def cmd_filter(cfg: dict) -> int:
    _require(cfg, "records")
    out = _out_dir(cfg)
    _snapshot(out, "filter", cfg)
    records = read_records(cfg["records"])
    kept = filter_trajectories(records, _critic(cfg))
    write_records(kept, out / "filtered.jsonl")
    if cfg.get("ift"):
        export_ift_dataset(kept, cfg["ift"])
    print(f"kept {len(kept)} of {len(records)} records")
    return 0


def cmd_export_ift(cfg: dict) -> int:
    _require(cfg, "records")
    out = _out_dir(cfg)
    _snapshot(out, "export-ift", cfg)
    n = export_ift_dataset(read_records(cfg["records"]), out / "ift.jsonl")
    print(f"exported {n} examples")
    return 0


def cmd_rbc(cfg: dict) -> int:
    if bool(cfg.get("batches")) == bool(cfg.get("records")):
        raise ConfigError("give exactly one of --batches or --records")
    out = _out_dir(cfg)
    _snapshot(out, "rbc", cfg)
    if cfg.get("batches"):
        batches = read_ranking_batches(cfg["batches"])
    else:
        batches = build_ranking_batches(read_records(cfg["records"]), _critic(cfg), beta=float(cfg["beta"]))
        write_ranking_batches(batches, out / "batches.jsonl")
    rows = []
    for b in batches:
        loss, grad = rbc_loss(b)
        rows.append({"ids": list(b.ids), "k": b.k, "beta": b.beta, "loss": loss, "grad": grad.tolist()})
    mean = sum(r["loss"] for r in rows) / len(rows) if rows else 0.0
    (out / "rbc_report.json").write_text(
        json.dumps({"batches": rows, "mean_loss": mean}, indent=2) + "\n", encoding="utf-8")
    for i, r in enumerate(rows):
        print(f"batch {i}: k={r['k']} loss={r['loss']:.6f}")
    print(f"mean loss: {mean:.6f}")
    return 0


def cmd_report(cfg: dict) -> int:
    _require(cfg, "logs")
    paths = cfg["logs"]
    labels = cfg.get("labels") or [Path(p).parent.name or Path(p).stem for p in paths]
    if len(labels) != len(paths):
        raise ConfigError("--labels must match --logs one to one")
    reports = {}
    for label, path in zip(labels, paths):
        if str(path).endswith(".jsonl"):
            reports[label] = MetricsReport.from_log(EpisodeLog.load(path), label)
        else:
            reports[label] = MetricsReport.load(path)
    if cfg.get("csv"):
        write_comparison_csv(reports, cfg["csv"])
    print(format_comparison(reports))
    return 0


HANDLERS = {
    "run": cmd_run,
    "collect": cmd_collect,
    "train-critic": cmd_train_critic,
    "filter": cmd_filter,
    "export-ift": cmd_export_ift,
    "rbc": cmd_rbc,
    "report": cmd_report,
}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ControllerError) and exc.__cause__ is not None:
        return exit_code(exc.__cause__)
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(exc, BackendError):
        return EXIT_BACKEND
    if isinstance(exc, (ParseError, OSError)):
        return EXIT_IO
    if isinstance(exc, (TscError, ValueError)):
        return EXIT_CONFIG
    raise exc


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        return HANDLERS[args.command](cfg)
    except (TscError, OSError, ValueError) as exc:
        code = exit_code(exc)
        print(f"tsclab {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())

