"""Command-line entry points: ``gen-data``, ``train``, ``eval`` and ``attack-demo``.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import dump_config, load_config, parse_config
from .episodes import generate_domain, read_dataset, sample_episode, write_dataset
from .errors import ConfigError, ContractError, FormatError, NumericsError, StyleAdvError
from .evaluation import (EvalSummary, evaluate_accuracies, loss_comparison, summarize,
                         summarize_loss_comparison)
from .model import StyleAdvModel
from .training import episode_streams, meta_train

log = logging.getLogger("styleadv")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
DATASET_SUFFIX = ".sdst"
DEMO_SEED_OFFSET = 104_729


def _prepare_out(path, create):
    out = Path(path)
    if not out.is_dir():
        if not create:
            raise FileNotFoundError(f"output directory {out} does not exist (pass --create)")
        out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    cfg = load_config(args.config) if args.config else parse_config("")
    if args.seed is not None:
        cfg.with_seed(args.seed)
    if args.out:
        cfg.out_dir = args.out
    return cfg


def _write_resolved(cfg, out):
    (out / "config.resolved.ini").write_text(dump_config(cfg))


def _dataset(cfg, spec):
    """Read the domain from ``data_dir`` when a file exists there, else generate it."""
    if cfg.data_dir:
        path = Path(cfg.data_dir) / f"{spec.name}{DATASET_SUFFIX}"
        if path.exists():
            return read_dataset(path)
    return generate_domain(spec)


def _jsonl(path):
    return open(path, "w", buffering=1)


def cmd_gen_data(args):
    cfg = _load(args)
    out = _prepare_out(cfg.out_dir, args.create)
    paths = []
    for entry in cfg.domains:
        path = out / f"{entry.spec.name}{DATASET_SUFFIX}"
        write_dataset(generate_domain(entry.spec), path)
        paths.append(path)
        print(f"wrote {path}")
    _write_resolved(cfg, out)
    return paths


def cmd_train(args):
    cfg = _load(args)
    if args.episodes is not None:
        cfg.train = cfg.train.replace(episodes_per_epoch=args.episodes)
    out = _prepare_out(cfg.out_dir, args.create)
    _write_resolved(cfg, out)
    source = _dataset(cfg, cfg.source)
    val = _dataset(cfg, cfg.validation) if cfg.validation is not None else None
    model = StyleAdvModel(n_classes=source.n_classes, seed=cfg.seed)
    with _jsonl(out / "metrics.jsonl") as stream:
        def emit(record):
            stream.write(json.dumps(record) + "\n")

        result = meta_train(model, source, cfg.train, val=val, on_epoch=emit)
    save_checkpoint(out / "last.sadv", model.state_dict())
    save_checkpoint(out / "best.sadv", result.best_state or model.state_dict())
    print(f"trained {cfg.train.epochs} epochs; best validation accuracy {result.best_val_acc}")
    return result


def _checkpoint_path(cfg, args):
    if args.checkpoint:
        return Path(args.checkpoint)
    return Path(cfg.out_dir) / f"{cfg.eval.checkpoint}.sadv"


def _load_model(path):
    return StyleAdvModel.from_state_dict(load_checkpoint(path))


def cmd_eval(args):
    cfg = _load(args)
    if args.episodes is not None:
        cfg.eval.episodes = args.episodes
    if not cfg.targets:
        raise ConfigError("no target domains configured", "role")
    model = _load_model(_checkpoint_path(cfg, args))
    out = _prepare_out(cfg.out_dir, args.create)
    _write_resolved(cfg, out)
    ft_cfg = cfg.finetune if args.finetune else None
    tag = "eval_ft" if args.finetune else "eval"
    summary = EvalSummary()
    with _jsonl(out / f"{tag}_records.jsonl") as stream:
        for spec in cfg.targets:
            accs = evaluate_accuracies(model, _dataset(cfg, spec), cfg.eval.n_way, cfg.eval.k_shot,
                                       cfg.eval.m_query, cfg.eval.episodes, cfg.seed + spec.domain_id,
                                       ft_cfg=ft_cfg)
            for e, acc in enumerate(accs):
                stream.write(json.dumps({"domain": spec.name, "episode": e, "accuracy": float(acc)}) + "\n")
            summary.domains.append(summarize(spec.name, accs))
    (out / f"{tag}_summary.json").write_text(json.dumps(summary.as_dict(), indent=2) + "\n")
    print(summary.table())
    return summary


def cmd_attack_demo(args):
    cfg = _load(args)
    demo = cfg.demo
    n_episodes = args.episodes if args.episodes is not None else demo.episodes
    if n_episodes < 1:
        raise ContractError("need at least one demo episode")
    model = _load_model(_checkpoint_path(cfg, args))
    out = _prepare_out(cfg.out_dir, args.create)
    _write_resolved(cfg, out)
    source = _dataset(cfg, cfg.source)
    t = cfg.train
    records = []
    with _jsonl(out / "attack_demo.jsonl") as stream:
        for e in range(n_episodes):
            sample_rng, attack_rng = episode_streams(cfg.seed + DEMO_SEED_OFFSET, e)
            episode = sample_episode(source, t.n_way, t.k_shot, t.m_query, sample_rng)
            rec = loss_comparison(model, episode, demo.eps, demo.k_rt, demo.gauss_k, attack_rng,
                                  t.attack.sigma_min)
            rec["episode"] = e
            stream.write(json.dumps(rec) + "\n")
            records.append(rec)
    summary = summarize_loss_comparison(records)
    (out / "attack_demo_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return summary


def build_parser():
    parser = argparse.ArgumentParser(prog="styleadv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, episodes_help=None):
        p.add_argument("--config", help="run configuration file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory (overrides run.out_dir)")
        p.add_argument("--create", action="store_true", help="create the output directory if missing")
        if episodes_help:
            p.add_argument("--episodes", type=int, help=episodes_help)

    common(sub.add_parser("gen-data", help="write one dataset file per configured domain"))
    common(sub.add_parser("train", help="meta-train and write checkpoints plus metrics"),
           "episodes per epoch")
    p = sub.add_parser("eval", help="few-shot evaluation on the target domains")
    common(p, "episodes per target domain")
    p.add_argument("--checkpoint", help="checkpoint file (default: <out>/best.sadv)")
    p.add_argument("--finetune", action="store_true", help="finetune on each episode's support set first")
    p = sub.add_parser("attack-demo", help="compare L_cls under clean, adversarial, random and swapped styles")
    common(p, "number of source episodes")
    p.add_argument("--checkpoint", help="checkpoint file (default: <out>/best.sadv)")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "attack-demo": cmd_attack_demo}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except StyleAdvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
