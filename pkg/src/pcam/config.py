"""Flat key=value run configuration.

One schema covers every command; unknown keys are rejected so config files
cannot silently drift.  Every run writes a resolved snapshot (sorted keys,
17-significant-digit floats) that parses back to the identical run.
"""

from __future__ import annotations

from dataclasses import dataclass

from .numerics import format_float
from .synth import SHAPE_KINDS


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_float_list(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v != "")


def _parse_int_list(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v != "")


def _parse_str_list(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


# key -> (parser, default, description)
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0),
    "model.image_side": (int, 16),
    "model.channels": (int, 1),
    "model.patch_side": (int, 4),
    "model.embed_dim": (int, 32),
    "model.heads": (int, 2),
    "model.layers": (int, 3),
    "model.classes": (int, 4),
    "train.epochs": (int, 12),
    "train.warmup_epochs": (int, 3),
    "train.batch_size": (int, 16),
    "train.lr": (float, 3e-3),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 1e-4),
    "train.beta": (float, 0.05),
    "train.theta": (float, 0.5),
    "train.tau": (float, 2.0),
    "train.w_cls_s": (float, 1.0),
    "train.w_dst": (float, 1.0),
    "train.w_cls_t": (float, 1.0),
    "train.w_pf": (float, 1.0),
    "train.fr_enabled": (_parse_bool, True),
    "train.fr_start_epoch": (int, 0),
    "train.box_layer": (int, 0),
    "train.sign_mode": (str, "pulling"),
    "train.center_form": (str, "normalized"),
    "train.com_grad": (_parse_bool, True),
    "train.stop_teacher": (_parse_bool, True),
    "train.distill_mode": (str, "as_written"),
    "train.refine_source": (_parse_bool, True),
    "train.dual_filter": (_parse_bool, True),
    "train.gamma": (float, 1.0),
    "data.samples_per_domain": (int, 48),
    "data.shapes": (_parse_str_list, ("square", "cross", "diag", "ring")),
    "data.src_ratios": (_parse_float_list, (0.35, 0.35, 0.35, 0.35)),
    "data.tgt_ratios": (_parse_float_list, (0.35, 0.24, 0.15, 0.08)),
    "data.ratio_jitter": (float, 0.03),
    "data.clutter_density": (float, 0.02),
    "data.clutter_intensity": (float, 0.6),
    "data.noise_level": (float, 0.15),
    "data.source_dir": (str, ""),
    "data.target_dir": (str, ""),
    "eval.checkpoint": (str, ""),
    "rollout.checkpoint": (str, ""),
    "rollout.sample_index": (int, 0),
    "protocol.seeds": (_parse_int_list, (0, 1, 2, 3, 4)),
    "sweep.betas": (_parse_float_list, (0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5)),
    "robustness.gammas": (_parse_float_list, (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)),
    "ablate.pf_weights": (_parse_float_list, (0.2, 0.5, 1.0, 2.0)),
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)


def defaults() -> dict:
    return {k: v for k, (_, v) in SCHEMA.items()}


def parse_value(key: str, raw: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    parser = SCHEMA[key][0]
    try:
        return parser(raw)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc


def load_config(path: str | None, overrides: list[str] | None = None,
                seed: int | None = None) -> RunConfig:
    values = defaults()
    if path:
        try:
            with open(path, "r", encoding="ascii") as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        for ln, line in enumerate(lines, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value")
            key, raw = (part.strip() for part in line.split("=", 1))
            values[key] = parse_value(key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split("=", 1))
        values[key] = parse_value(key, raw)
    if seed is not None:
        values["seed"] = int(seed)
    validate(values)
    return RunConfig(values=values)


def validate(values: dict) -> None:
    k = values["model.classes"]
    for key in ("data.shapes", "data.src_ratios", "data.tgt_ratios"):
        if len(values[key]) != k:
            raise ConfigError(f"{key} must list exactly model.classes={k} entries")
    for s in values["data.shapes"]:
        if s not in SHAPE_KINDS:
            raise ConfigError(f"unknown shape {s!r}; choose from {SHAPE_KINDS}")
    if values["model.image_side"] % values["model.patch_side"] != 0:
        raise ConfigError("model.patch_side must divide model.image_side")
    if values["model.embed_dim"] % values["model.heads"] != 0:
        raise ConfigError("model.heads must divide model.embed_dim")
    if not 0.0 <= values["train.beta"] <= 1.0:
        raise ConfigError("train.beta must lie in [0, 1]")
    if not 0.0 <= values["train.gamma"] <= 1.0:
        raise ConfigError("train.gamma must lie in [0, 1]")


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format_float(value)
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


def snapshot(values: dict) -> str:
    return "".join(f"{k}={format_value(values[k])}\n" for k in sorted(values))


def write_snapshot(path: str, values: dict) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(snapshot(values))
