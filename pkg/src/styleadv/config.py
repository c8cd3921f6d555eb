"""Run configuration: INI-style ``key = value`` sections.

Recognised sections: ``[run]``, ``[train]``, ``[attack]``, ``[eval]``,
``[finetune]``, ``[attack_demo]`` and any number of ``[domain:<name>]``
sections. Without domain sections the default six-domain benchmark is used.
Unknown sections or keys raise :class:`ConfigError` naming the key.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .adversary import AttackConfig
from .episodes import StyleLaw, SyntheticDomainSpec, default_benchmark
from .errors import ConfigError, ContractError
from .training import FinetuneConfig, TrainConfig


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _classes(text):
    out = []
    for part in text.replace(",", " ").split():
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _opt_int(text):
    return None if text.strip().lower() in ("", "auto", "none") else int(text)


def _opt_float(text):
    return None if text.strip().lower() in ("", "auto", "none") else float(text)


RUN_KEYS = {"seed": int, "out_dir": str, "data_dir": str, "benchmark_seed": int,
            "images_per_class": int}
TRAIN_KEYS = {"epochs": int, "episodes_per_epoch": int, "n_way": int, "k_shot": int, "m_query": int,
              "optimizer": str, "lr": float, "augment": str, "gauss_k": float, "weights": _floats,
              "val_episodes": int}
ATTACK_KEYS = {"eps_list": _floats, "k_rt": float, "p_skip": float, "target": str, "method": str,
               "steps": int, "sigma_min": float, "eps_var": float}
EVAL_KEYS = {"episodes": int, "n_way": int, "k_shot": int, "m_query": int, "checkpoint": str}
FINETUNE_KEYS = {"iterations": _opt_int, "lr": _opt_float, "optimizer": str, "pseudo_query": int,
                 "style_k": float, "flip_p": float, "crop_pad": int}
DEMO_KEYS = {"episodes": int, "eps": float, "k_rt": float, "gauss_k": float}
DOMAIN_KEYS = {"id": int, "role": str, "classes": _classes, "images_per_class": int, "gain_mu": _floats,
               "gain_s": float, "bias_mu": _floats, "bias_s": float, "contrast": float, "seed": int,
               "content_seed": int, "noise": float, "size": int}

SECTIONS = {"run": RUN_KEYS, "train": TRAIN_KEYS, "attack": ATTACK_KEYS, "eval": EVAL_KEYS,
            "finetune": FINETUNE_KEYS, "attack_demo": DEMO_KEYS}


@dataclass
class DomainEntry:
    spec: SyntheticDomainSpec
    role: str   # source | validation | target


@dataclass
class EvalConfig:
    episodes: int = 1000
    n_way: int = 5
    k_shot: int = 1
    m_query: int = 15
    checkpoint: str = "best"   # best | last


@dataclass
class DemoConfig:
    episodes: int = 200
    eps: float = 0.08
    k_rt: float = 16 / 255
    gauss_k: float = 16 / 255


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data_dir: str = ""
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    demo: DemoConfig = field(default_factory=DemoConfig)
    domains: list = field(default_factory=list)

    def role(self, role):
        return [d.spec for d in self.domains if d.role == role]

    @property
    def source(self):
        found = self.role("source")
        if len(found) != 1:
            raise ConfigError(f"exactly one source domain required, found {len(found)}", "role")
        return found[0]

    @property
    def validation(self):
        found = self.role("validation")
        return found[0] if found else None

    @property
    def targets(self):
        return self.role("target")

    def with_seed(self, seed):
        self.seed = int(seed)
        self.train = self.train.replace(seed=self.seed)
        return self


def _parse_section(parser, section, schema):
    out = {}
    for key, raw in parser.items(section):
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in [{section}]", key)
        try:
            out[key] = schema[key](raw)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value {raw!r} for {key!r} in [{section}]", key) from None
    return out


def parse_config(text):
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__",
                                       inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from None
    values = {}
    domain_sections = []
    for section in parser.sections():
        if section.startswith("domain:"):
            domain_sections.append(section)
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", section)
        values[section] = _parse_section(parser, section, SECTIONS[section])

    run = values.get("run", {})
    seed = run.get("seed", 0)
    try:
        attack = AttackConfig(**values.get("attack", {}))
        train_kw = dict(values.get("train", {}))
        train = TrainConfig(seed=seed, attack=attack, **train_kw)
        finetune = FinetuneConfig(**values.get("finetune", {}))
    except (ContractError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig(seed=seed, out_dir=run.get("out_dir", "runs/default"), data_dir=run.get("data_dir", ""),
                    train=train, eval=EvalConfig(**values.get("eval", {})), finetune=finetune,
                    demo=DemoConfig(**values.get("attack_demo", {})))
    if cfg.eval.checkpoint not in ("best", "last"):
        raise ConfigError("eval.checkpoint must be 'best' or 'last'", "checkpoint")

    if domain_sections:
        for section in domain_sections:
            kv = _parse_section(parser, section, DOMAIN_KEYS)
            for required in ("id", "role", "classes"):
                if required not in kv:
                    raise ConfigError(f"[{section}] is missing {required!r}", required)
            if kv["role"] not in ("source", "validation", "target"):
                raise ConfigError(f"[{section}] role must be source, validation or target", "role")
            law = StyleLaw(**{k: kv[k] for k in ("gain_mu", "gain_s", "bias_mu", "bias_s", "contrast") if k in kv})
            spec_kw = {k: kv[k] for k in ("images_per_class", "seed", "content_seed", "noise", "size") if k in kv}
            spec = SyntheticDomainSpec(kv["id"], section.split(":", 1)[1], kv["classes"], style=law, **spec_kw)
            cfg.domains.append(DomainEntry(spec, kv["role"]))
    else:
        specs = default_benchmark(run.get("benchmark_seed", 0), run.get("images_per_class", 30))
        roles = ["source", "validation"] + ["target"] * (len(specs) - 2)
        cfg.domains = [DomainEntry(s, r) for s, r in zip(specs, roles)]
    cfg.source  # validates
    return cfg


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)


def _fmt(value):
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    if value is None:
        return "auto"
    if hasattr(value, "value"):
        return str(value.value)
    return repr(value) if isinstance(value, float) else str(value)


def _fmt_classes(classes):
    classes = list(classes)
    if classes == list(range(classes[0], classes[-1] + 1)):
        return f"{classes[0]}-{classes[-1]}"
    return ", ".join(str(c) for c in classes)


def dump_config(cfg):
    """Fully resolved configuration as text; ``parse_config(dump_config(c))`` reproduces ``c``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {"seed": str(cfg.seed), "out_dir": cfg.out_dir, "data_dir": cfg.data_dir}
    parser["train"] = {k: _fmt(getattr(cfg.train, k)) for k in TRAIN_KEYS}
    parser["attack"] = {k: _fmt(getattr(cfg.train.attack, k)) for k in ATTACK_KEYS}
    parser["eval"] = {f.name: _fmt(getattr(cfg.eval, f.name)) for f in fields(cfg.eval)}
    parser["finetune"] = {k: _fmt(getattr(cfg.finetune, k)) for k in FINETUNE_KEYS}
    parser["attack_demo"] = {f.name: _fmt(getattr(cfg.demo, f.name)) for f in fields(cfg.demo)}
    for entry in cfg.domains:
        s = entry.spec
        parser[f"domain:{s.name}"] = {
            "id": str(s.domain_id), "role": entry.role, "classes": _fmt_classes(s.classes),
            "images_per_class": str(s.images_per_class), "gain_mu": _fmt(s.style.gain_mu),
            "gain_s": _fmt(s.style.gain_s), "bias_mu": _fmt(s.style.bias_mu), "bias_s": _fmt(s.style.bias_s),
            "contrast": _fmt(s.style.contrast), "seed": str(s.seed), "content_seed": str(s.content_seed),
            "noise": _fmt(s.noise), "size": str(s.size),
        }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
