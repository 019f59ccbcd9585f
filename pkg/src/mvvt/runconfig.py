"""Run configuration: one ``key = value`` file with a section per module.

Unknown sections and keys are errors. :func:`dump_run_config` writes every
resolved value explicitly, so the written file alone replays a run.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional

from .data import Sampling
from .model import ConfigError, MvvtConfig
from .train import TrainConfig

BUNDLED = ("desk", "reference_n20", "reference_n24")


@dataclass(frozen=True)
class GenerateSettings:
    plants: Optional[int] = None  # None -> archetype default
    days: Optional[int] = None  # None -> archetype max_day; days run 1..n
    height: int = 224
    width: int = 224
    archetypes: Optional[str] = None  # None -> bundled table


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: str = "data"
    crops: tuple = ()  # empty -> every crop present
    generate: GenerateSettings = GenerateSettings()
    model: MvvtConfig = MvvtConfig()
    train: TrainConfig = TrainConfig()
    sampling: Sampling = Sampling()
    split_ratio: float = 0.8
    split_seed: int = 0
    test_plant: Optional[str] = None
    checkpoint: Optional[str] = None
    eval_split: str = "test"

    def with_seed(self, seed: int) -> "RunConfig":
        """Apply one seed to the run and to every seeded component."""
        return replace(self, seed=seed, split_seed=seed, train=replace(self.train, seed=seed),
                       sampling=replace(self.sampling, seed=seed))


# --- value codecs ------------------------------------------------------------


def _none_or(conv):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none") else conv(text)
    return parse


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_tuple(text: str) -> tuple:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _views(text: str):
    parts = _int_tuple(text)
    return parts[0] if len(parts) == 1 else parts


def _crops(text: str) -> tuple:
    low = text.strip().lower()
    return () if low in ("", "all") else tuple(p.strip() for p in text.split(",") if p.strip())


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _field_parser(default):
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


_MODEL_KEYS = {f.name: _field_parser(f.default) for f in fields(MvvtConfig)}
_TRAIN_KEYS = {f.name: _field_parser(f.default) for f in fields(TrainConfig)}
_TRAIN_KEYS["grad_clip"] = _none_or(float)

SCHEMA = {
    "run": {"seed": int, "data": str, "crops": _crops},
    "generate": {"plants": _none_or(int), "days": _none_or(int), "height": int, "width": int,
                 "archetypes": _none_or(str)},
    "model": _MODEL_KEYS,
    "train": _TRAIN_KEYS,
    "sampling": {"views_per_level": _views, "strategy": str, "seed": int, "size": _none_or(_int_tuple)},
    "split": {"ratio": float, "seed": int, "test_plant": _none_or(str)},
    "eval": {"checkpoint": _none_or(str), "split": str},
}


def bundled_config(name: str) -> str:
    return resources.files("mvvt").joinpath("configs", f"{name}.cfg").read_text()


def _read(source) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    if source is None:
        return parser
    path = Path(source)
    if path.is_file():
        text = path.read_text()
    elif str(source) in BUNDLED:
        text = bundled_config(str(source))
    else:
        raise FileNotFoundError(f"config file {source} not found (bundled configs: {', '.join(BUNDLED)})")
    try:
        parser.read_string(text, source=str(source))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from None
    return parser


def parse_run_config(source=None) -> RunConfig:
    """Read a config file path (or bundled name); missing keys keep their defaults."""
    parser = _read(source)
    values: dict = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}] (known: {', '.join(SCHEMA)})")
        for key, text in parser[section].items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}] (known: {', '.join(SCHEMA[section])})")
            try:
                values[(section, key)] = SCHEMA[section][key](text)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} = {text!r}: {exc}") from None
    return build_run_config(values)


def build_run_config(values: dict) -> RunConfig:
    def pick(section):
        return {k: v for (s, k), v in values.items() if s == section}

    run = pick("run")
    seed = run.get("seed", 0)
    try:
        model = MvvtConfig(**pick("model"))
        train = TrainConfig(**{"seed": seed, **pick("train")})
        sampling = Sampling(**{"seed": seed, **pick("sampling")})
        gen = GenerateSettings(**pick("generate"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    split = pick("split")
    ev = pick("eval")
    cfg = RunConfig(
        seed=seed,
        data=run.get("data", "data"),
        crops=run.get("crops", ()),
        generate=gen,
        model=model,
        train=train,
        sampling=sampling,
        split_ratio=split.get("ratio", 0.8),
        split_seed=split.get("seed", seed),
        test_plant=split.get("test_plant"),
        checkpoint=ev.get("checkpoint"),
        eval_split=ev.get("split", "test"),
    )
    if cfg.eval_split not in ("train", "val", "test", "all"):
        raise ConfigError(f"[eval] split must be train, val, test or all, got {cfg.eval_split!r}")
    if not 0.0 < cfg.split_ratio <= 1.0:
        raise ConfigError(f"[split] ratio must lie in (0, 1], got {cfg.split_ratio}")
    return cfg


def run_config_items(cfg: RunConfig) -> dict:
    """Section -> ordered (key, value) pairs of every resolved setting."""
    return {
        "run": [("seed", cfg.seed), ("data", cfg.data), ("crops", cfg.crops or "all")],
        "generate": [(f.name, getattr(cfg.generate, f.name)) for f in fields(GenerateSettings)],
        "model": [(f.name, getattr(cfg.model, f.name)) for f in fields(MvvtConfig)],
        "train": [(f.name, getattr(cfg.train, f.name)) for f in fields(TrainConfig)],
        "sampling": [(f.name, getattr(cfg.sampling, f.name)) for f in fields(Sampling)],
        "split": [("ratio", cfg.split_ratio), ("seed", cfg.split_seed), ("test_plant", cfg.test_plant)],
        "eval": [("checkpoint", cfg.checkpoint), ("split", cfg.eval_split)],
    }


def dump_run_config(cfg: RunConfig) -> str:
    lines = []
    for section, items in run_config_items(cfg).items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in items)
        lines.append("")
    return "\n".join(lines)
