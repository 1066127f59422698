"""Command-line entry point: ``kgbs {gen-data,train,infer,bench,ablate}``.

Settings resolve as CLI flags > config file (JSON or TOML) > built-in
defaults. A config file may hold ``seed``, ``task`` and the sections
``gen``, ``embedding``, ``train``, ``swarm`` and ``bench`` whose keys mirror
the corresponding dataclass fields. Every command writes ``manifest.json``
with the fully resolved settings next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import bench
from .datagen import Dataset, generate, preset, read_dataset, write_dataset
from .embedding import EmbeddingHyper, EmbeddingModel, EmbeddingTable, embed_all, train_embeddings
from .errors import BudgetExhausted, ConfigError, KgbsError, ParseError, TrainingDiverged, ValidationError
from .oracle import RemoteOracle, SimulatedOracle
from .policy import QNetwork
from .swarm import SwarmConfig, infer
from .trainer import RewardParams, TrainConfig, default_oracle_factory, train

log = logging.getLogger("kgbs")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_BUDGET = 4
EXIT_DIVERGED = 5

EMBEDDING_FILE = "embedding.json"
QNET_FILE = "qnet.json"


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    if p.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{p}: {e}") from None
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a table/object")
    return data


def _merge(cls, base, file_section: dict | None, flags: dict):
    """Rebuild dataclass ``base`` with config-file values, then non-None CLI flags."""
    known = {f.name for f in dataclasses.fields(cls)}
    values = dataclasses.asdict(base)
    for source in (file_section or {}, {k: v for k, v in flags.items() if v is not None}):
        unknown = set(source) - known
        if unknown:
            raise ConfigError(f"unknown {cls.__name__} setting(s): {', '.join(sorted(unknown))}")
        values.update(source)
    if "reward" in values and isinstance(values["reward"], dict):
        values["reward"] = RewardParams(**values["reward"])
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None


class Settings:
    """Resolved configuration shared by all subcommands."""

    def __init__(self, args):
        self.file = load_config(args.config) if args.config else {}
        seed = args.seed if args.seed is not None else self.file.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        self.seed = seed
        self.task = getattr(args, "task", None) or self.file.get("task", "default")
        self.gen = _merge(type(preset(self.task)), preset(self.task, seed=seed), self.file.get("gen"), {
            "seed": seed,
            "n_nodes": getattr(args, "nodes", None),
            "n_bias_seeds": getattr(args, "bias_seeds", None),
            "transmission_rate": getattr(args, "transmission_rate", None),
            "diffusion_hops": getattr(args, "hops", None),
            "feature_dim": getattr(args, "feature_dim", None),
            "signal": getattr(args, "signal", None),
            "noise": getattr(args, "noise", None),
        })
        self.embedding = _merge(EmbeddingHyper, EmbeddingHyper(seed=seed), self.file.get("embedding"), {
            "seed": seed,
            "epochs": getattr(args, "epochs", None),
            "learning_rate": getattr(args, "lr", None),
            "d_out": getattr(args, "d_out", None),
        })
        self.train = _merge(TrainConfig, TrainConfig(seed=seed), self.file.get("train"), {
            "seed": seed,
            "n_episodes": getattr(args, "episodes", None),
            "n_tries": getattr(args, "tries", None),
            "max_steps": getattr(args, "max_steps", None),
            "eta": getattr(args, "eta", None),
        })
        self.swarm = _merge(SwarmConfig, SwarmConfig(seed=seed, max_steps=self.train.max_steps),
                            self.file.get("swarm"), {
            "seed": seed,
            "n_agents": getattr(args, "agents", None),
            "q_limit": getattr(args, "budget", None),
            "overlap_penalty": getattr(args, "overlap_penalty", None),
            "win_threshold": getattr(args, "win_threshold", None),
        })

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "task": self.task,
            "gen": dataclasses.asdict(self.gen),
            "embedding": dataclasses.asdict(self.embedding),
            "train": self.train.to_dict(),
            "swarm": dataclasses.asdict(self.swarm),
        }


def _write_manifest(out: Path, command: str, settings: Settings, **extra) -> None:
    record = {"command": command, "config": settings.to_dict()}
    record.update(extra)
    (out / "manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prepare_out(path, force: bool, names) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    clash = [out / n for n in names if (out / n).exists()]
    if clash and not force:
        raise FileExistsError(f"{clash[0]} exists; pass --force to overwrite")
    return out


def _dataset(args, settings: Settings) -> Dataset:
    if getattr(args, "data", None):
        ds = read_dataset(args.data)
        if not ds.graph.has_labels:
            raise ValidationError(f"{args.data}: dataset has no labels")
        return ds
    log.info("no --data given; generating the %r preset with seed %d", settings.task, settings.seed)
    return generate(settings.gen)


def cmd_gen_data(args, settings: Settings) -> int:
    ds = generate(settings.gen)
    paths = write_dataset(ds, args.out, force=args.force,
                          extra_manifest={"command": "gen-data", "task": settings.task})
    log.info("wrote %d nodes, %d bias nodes to %s", ds.graph.node_count, int(ds.labels.sum()), paths[0].parent)
    return EXIT_OK


def cmd_train(args, settings: Settings) -> int:
    ds = _dataset(args, settings)
    g = ds.graph
    out = _prepare_out(args.out, args.force, [EMBEDDING_FILE, QNET_FILE, "train_log.jsonl"])
    if args.embedding:
        ckpt = Path(args.embedding)
        if not ckpt.exists():
            raise FileNotFoundError(f"embedding checkpoint not found: {ckpt}")
        model = EmbeddingModel.load(ckpt)
        table = EmbeddingTable(ds.features, embed_all(model, ds.features, g))
        log.info("loaded embedding checkpoint %s; skipping embedding training", ckpt)
    else:
        result = train_embeddings(g, ds.features, g.labels, settings.embedding)
        model, table = result.model, result.table
        result.write_loss_curve(out / "embedding_loss.jsonl")
    model.save(out / EMBEDDING_FILE)
    cfg = settings.train
    trained = train(g, default_oracle_factory(g, ds.features, cfg), cfg, table)
    trained.qnet.save(out / QNET_FILE)
    trained.write_log(out / "train_log.jsonl")
    _write_manifest(out, "train", settings, data=args.data, embedding_checkpoint=args.embedding)
    last = trained.log[-1]
    print(f"trained {cfg.n_episodes} episodes: final success_rate={last['success_rate']:.3f} "
          f"mean_steps_to_bias={last['mean_steps_to_bias']:.2f}")
    return EXIT_OK


def _load_checkpoint(path: Path, loader, what: str):
    if not path.exists():
        raise FileNotFoundError(f"{what} checkpoint not found: {path} (run `kgbs train --out {path.parent}` first)")
    return loader(path)


def cmd_infer(args, settings: Settings) -> int:
    ds = _dataset(args, settings)
    g = ds.graph
    model_dir = Path(args.model)
    model = _load_checkpoint(model_dir / EMBEDDING_FILE, EmbeddingModel.load, "embedding")
    qnet = _load_checkpoint(model_dir / QNET_FILE, QNetwork.load, "Q-network")
    table = EmbeddingTable(ds.features, embed_all(model, ds.features, g))
    if table.d_out != qnet.action_dim:
        raise ValidationError(f"embedding d_out {table.d_out} does not match Q-network action dim {qnet.action_dim}")
    out = _prepare_out(args.out, args.force, ["trace.jsonl", "metrics.json"])
    cfg = settings.swarm
    if args.max_steps is None and "max_steps" not in settings.file.get("swarm", {}) and "max_steps" in qnet.meta:
        # normalize the step fraction exactly as during training
        cfg = cfg.replace(max_steps=int(qnet.meta["max_steps"]))
        settings.swarm = cfg
    if args.remote_oracle:
        if not args.data:
            raise ConfigError("--remote-oracle needs --data (the oracle process reads the files)")
        d = Path(args.data)
        argv = [sys.executable, "-m", "kgbs.oracle", "--edges", str(d / "edges.tsv"), "--labels",
                str(d / "labels.tsv"), "--features", str(d / "features.tsv"), "--limit", str(cfg.q_limit)]
        with RemoteOracle.spawn(argv) as oracle:
            result = infer(g, oracle, table, qnet, cfg)
    else:
        result = infer(g, SimulatedOracle(g.labels, ds.features, cfg.q_limit), table, qnet, cfg)
    result.write_trace(out / "trace.jsonl")
    record = result.metrics.to_record()
    (out / "metrics.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(out, "infer", settings, data=args.data, model=str(model_dir))
    m = result.metrics
    print(f"bncr={m.bncr:.3f} found={m.found}/{m.planted} interactions={m.interactions} win={m.win}")
    return EXIT_OK


def _bench_config(args, settings: Settings) -> bench.BenchConfig:
    section = settings.file.get("bench", {})
    n_seeds = args.seeds if args.seeds is not None else section.get("seeds", 10)
    if n_seeds < 1:
        raise ConfigError("--seeds must be positive")
    task = args.task or settings.file.get("task", "suite")
    embedding = settings.embedding
    if args.epochs is None and "embedding" not in settings.file:
        embedding = dataclasses.replace(embedding, epochs=bench.BenchConfig().embedding.epochs)
    train_cfg = settings.train
    if "train" not in settings.file:
        defaults = bench.BenchConfig().train
        train_cfg = train_cfg.replace(**{
            k: getattr(defaults, k)
            for k, flag in (("n_episodes", args.episodes), ("n_tries", args.tries), ("max_steps", args.max_steps))
            if flag is None
        })
    swarm = settings.swarm.replace(max_steps=train_cfg.max_steps)
    return bench.BenchConfig(task=task, seeds=tuple(range(settings.seed, settings.seed + n_seeds)),
                             embedding=embedding, train=train_cfg, swarm=swarm)


def _parse_list(text, cast=str):
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ConfigError(f"empty list {text!r}")
    try:
        return [cast(t) for t in items]
    except ValueError:
        raise ConfigError(f"bad list {text!r}") from None


def cmd_bench(args, settings: Settings, default_variants=("full", "dfs", "uniform")) -> int:
    config = _bench_config(args, settings)
    section = settings.file.get("bench", {})
    variants = _parse_list(args.variants) if args.variants else section.get("variants", list(default_variants))
    sweep = _parse_list(args.sweep_agents, int) if args.sweep_agents else section.get("sweep_agents")
    out = _prepare_out(args.out, args.force, ["results.csv", "sweep.csv"])
    suite = bench.Suite(config)
    rows = bench.run_suite(variants, config, out, suite)
    for s in bench.summarize(rows):
        print(f"{s['variant']:>14}  bncr={s['mean_bncr']:.3f}±{s['std_bncr']:.3f}  "
              f"interactions={s['mean_interactions']:.1f}  win_rate={s['win_rate']:.2f}")
    if sweep:
        _, table = bench.sweep_agents(sweep, config, out, suite)
        for r in table:
            print(f"n_agents={r['n_agents']:>3}  step_loss={r['mean_step_loss']:.2f}  win_rate={r['win_rate']:.2f}")
    (out / "manifest.json").write_text(
        bench.bench_manifest(config, command=args.command, variants=variants, sweep_agents=sweep), encoding="utf-8"
    )
    return EXIT_OK


def cmd_ablate(args, settings: Settings) -> int:
    return cmd_bench(args, settings, default_variants=("full",) + tuple(bench.ABLATIONS))


def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, suppress):
        # the copy on each subcommand must not clobber values given before the subcommand
        default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser.add_argument("--config", default=default(None), help="JSON or TOML settings file")
        parser.add_argument("--seed", type=int, default=default(None),
                            help="root seed for every random stream (default 0)")
        parser.add_argument("--out", default=default("out"), help="output directory (created if missing)")
        parser.add_argument("--force", action="store_true", default=default(False), help="overwrite existing outputs")

    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, suppress=True)

    p = argparse.ArgumentParser(prog="kgbs", description="Bias search on knowledge graphs with Q-learning agents.")
    global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def data_flags(sp, task_default_help="default"):
        sp.add_argument("--task", help=f"datagen preset (default {task_default_help})")
        sp.add_argument("--data", help="dataset directory from gen-data (otherwise generated from --task)")

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic labeled graph")
    g.add_argument("--task", help="preset: default, suite, economy, education, immigration, politics, ai, culture")
    g.add_argument("--nodes", type=int)
    g.add_argument("--bias-seeds", type=int)
    g.add_argument("--transmission-rate", type=float)
    g.add_argument("--hops", type=int)
    g.add_argument("--feature-dim", type=int)
    g.add_argument("--signal", type=float)
    g.add_argument("--noise", type=float)

    def train_flags(sp):
        sp.add_argument("--epochs", type=int, help="embedding epochs")
        sp.add_argument("--lr", type=float, help="embedding learning rate")
        sp.add_argument("--d-out", type=int)
        sp.add_argument("--episodes", type=int)
        sp.add_argument("--tries", type=int)
        sp.add_argument("--max-steps", type=int)
        sp.add_argument("--eta", type=float, help="Q-network step size")

    def swarm_flags(sp):
        sp.add_argument("--agents", type=int)
        sp.add_argument("--budget", type=int, help="query limit q_limit")
        sp.add_argument("--overlap-penalty", type=float)
        sp.add_argument("--win-threshold", type=float)

    t = sub.add_parser("train", parents=[common], help="train embeddings and the Q-network")
    data_flags(t)
    train_flags(t)
    t.add_argument("--embedding", help="resume from this embedding checkpoint (skips embedding training)")

    i = sub.add_parser("infer", parents=[common], help="run multi-agent inference with trained checkpoints")
    data_flags(i)
    swarm_flags(i)
    i.add_argument("--max-steps", type=int, help="step normalizer; match the training value")
    i.add_argument("--model", required=True, help="directory holding embedding.json and qnet.json")
    i.add_argument("--remote-oracle", action="store_true", help="query an oracle subprocess over stdio")

    for name, helptext in (("bench", "baselines and agent sweeps over a seeded suite"),
                           ("ablate", "embedding ablations over a seeded suite")):
        b = sub.add_parser(name, parents=[common], help=helptext)
        b.add_argument("--task", help="datagen preset (default suite)")
        train_flags(b)
        swarm_flags(b)
        b.add_argument("--seeds", type=int, help="number of seeds, starting at --seed (default 10)")
        b.add_argument("--variants", help=f"comma list from {','.join(bench.VARIANTS)}")
        b.add_argument("--sweep-agents", help="comma list of agent counts, e.g. 1,2,4,8")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "bench": cmd_bench,
            "ablate": cmd_ablate}


def _setup_logging() -> None:
    level = os.environ.get("KGBS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        settings = Settings(args)
        return COMMANDS[args.command](args, settings)
    except (ConfigError, ValidationError) as e:
        code, msg = EXIT_CONFIG, f"config error: {e}"
    except (OSError, ParseError) as e:
        code, msg = EXIT_IO, f"io error: {e}"
    except BudgetExhausted as e:
        code, msg = EXIT_BUDGET, f"budget exhausted: {e}"
    except TrainingDiverged as e:
        code, msg = EXIT_DIVERGED, f"training diverged: {e}"
    except KgbsError as e:
        code, msg = EXIT_ERROR, f"error: {e}"
    print(f"kgbs: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
