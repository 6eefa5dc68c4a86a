"""Flat ``key=value`` run configuration with dotted section names.

A run config is read from a file, overridden by ``key=value`` arguments on
the command line, checked against the keys the subcommand accepts and then
turned into typed objects.  ``seed`` is mandatory for every subcommand that
draws random numbers.
"""

from __future__ import annotations

from pathlib import Path

from rpnaug.augment import FreeLbConfig, RpnConfig
from rpnaug.errors import ConfigError, DataError, ParseError
from rpnaug.train import PRESETS, TokenAugConfig, TrainConfig


def _bool(text):
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


TRAIN_KEYS = {
    "seed": int, "mode": str, "preset": str, "lr": float, "momentum": float, "epochs": int,
    "batch_size": int, "eval_every": int, "update_schedule": str, "rpn_embedding_grad": _bool,
    "wall_time": _bool,
    "rpn.epsilon": float, "rpn.steps": int, "rpn.shuffle_scope": str, "rpn.mask_padding": _bool,
    "rpn.eq4_literal": _bool,
    "freelb.norm_bound": float, "freelb.step_size": float, "freelb.ascent_steps": int,
    "freelb.init_range": float,
    "token_aug.copies": int, "token_aug.aeda_ratio": float, "token_aug.eda_op": str,
    "token_aug.eda_strength": float,
}
MODEL_KEYS = {
    "model.embed_dim": int, "model.kernel_sizes": _ints, "model.num_filters": int,
    "model.dropout": float, "model.max_len": int, "model.vocab_size": int,
}
DATA_KEYS = {
    "data.manifest": str, "data.train": str, "data.dev": str, "data.test": str,
    "data.text_column": str, "data.label_column": str, "data.has_header": _bool,
    "data.strict": _bool,
    "data.synthetic": _bool, "data.synthetic.samples": int, "data.synthetic.dev_samples": int,
    "data.synthetic.vocab_size": int, "data.synthetic.seq_len": int,
    "data.synthetic.num_classes": int,
}
EVAL_KEYS = {"seed": int, "eval.checkpoint": str, "eval.vocab": str, "eval.split": str}
AUGMENT_KEYS = {
    "seed": int, "augment.input": str, "augment.output": str, "augment.trace": str,
    **{k: v for k, v in TRAIN_KEYS.items() if k.startswith("rpn.")},
}
GRID_KEYS = {"grid.epsilon": _floats, "grid.steps": _ints}
BENCH_KEYS = {"seed": int, "bench.methods": str, "bench.sizes": _ints, "bench.trials": int,
              "bench.copies": int, "bench.batch_size": int, "bench.seq_len": int}

SUBCOMMAND_KEYS = {
    "train": {**TRAIN_KEYS, **MODEL_KEYS, **DATA_KEYS},
    "eval": {**EVAL_KEYS, **{k: v for k, v in DATA_KEYS.items()}, "model.max_len": int},
    "augment": AUGMENT_KEYS,
    "grid": {**TRAIN_KEYS, **MODEL_KEYS, **DATA_KEYS, **GRID_KEYS},
    "bench": BENCH_KEYS,
}

# Subcommands that draw random numbers; eval is deterministic.
SEEDED = ("train", "augment", "grid", "bench")

SYNTHETIC_DEFAULTS = {"data.synthetic.samples": 400, "data.synthetic.dev_samples": 200,
                      "data.synthetic.vocab_size": 60, "data.synthetic.seq_len": 12,
                      "data.synthetic.num_classes": 2}


def parse_pairs(lines, source="<args>") -> dict:
    pairs = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected key=value, got {line!r}", location=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParseError(f"{source}:{lineno}: empty key", location=lineno)
        pairs[key] = value
    return pairs


def read_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    return parse_pairs(path.read_text(encoding="utf-8").splitlines(), str(path))


def resolve(raw: dict, subcommand: str) -> dict:
    """Expand a preset, reject unknown keys and parse values into Python types."""
    allowed = SUBCOMMAND_KEYS[subcommand]
    raw = dict(raw)
    preset = raw.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        raw = {**PRESETS[preset], **raw}
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config keys for {subcommand}: {', '.join(unknown)}")
    if subcommand in SEEDED and "seed" not in raw:
        raise ConfigError("config must set 'seed'; runs never fall back to a clock-based seed")
    values = {}
    for key, text in raw.items():
        try:
            values[key] = allowed[key](text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return values


def _section(values, prefix):
    return {k[len(prefix):]: v for k, v in values.items()
            if k.startswith(prefix) and "." not in k[len(prefix):]}


def train_config(values: dict) -> TrainConfig:
    top = {k: v for k, v in values.items()
           if "." not in k and k != "preset" and k in TrainConfig.__dataclass_fields__}
    return TrainConfig(
        rpn=RpnConfig(**_section(values, "rpn.")),
        freelb=FreeLbConfig(**_section(values, "freelb.")),
        token_aug=TokenAugConfig(**_section(values, "token_aug.")),
        **top,
    )


def rpn_config(values: dict) -> RpnConfig:
    return RpnConfig(**_section(values, "rpn."))


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


def echo(values: dict) -> str:
    """Resolved configuration as sorted ``key=value`` lines."""
    return "".join(f"{k}={format_value(values[k])}\n" for k in sorted(values))
