"""Flat ``key = value`` run configuration with a fixed schema.

Lines are ``key = value``; ``#`` starts a comment.  Lists are comma separated
(``encoder_channels = 8, 16, 32``).  Unknown keys are an error.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .data import DISEASES, AugmentParams
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigSchemaError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> list:
    return [int(v) for v in text.split(",") if v.strip()]


def _str_list(text: str) -> list:
    return [v.strip() for v in text.split(",") if v.strip()]


def _opt_float(text: str):
    return None if text.strip().lower() in ("none", "off", "") else float(text)


def _opt_str(text: str):
    return None if text.strip().lower() in ("none", "") else text.strip()


# key -> (parser, default)
SCHEMA = {
    "image_size": (int, 32),
    "encoder_channels": (_int_list, [8, 16, 32]),
    "fc_sizes": (_int_list, [512, 512]),
    "lstm_hidden": (int, 600),
    "num_outputs": (int, 1),
    "freeze_first_n": (int, 0),
    "learning_rate": (float, 0.01),
    "accumulation_k": (int, 8),
    "epochs": (int, 200),
    "seed": (int, 0),
    "threshold": (float, 0.5),
    "use_class_weights": (_bool, True),
    "eval_every": (int, 1),
    "checkpoint_path": (_opt_str, None),
    "clip_norm": (_opt_float, 5.0),
    "augment": (_bool, True),
    "max_rotation_deg": (float, 10.0),
    "crop_scale_min": (float, 0.6),
    "max_images": (int, 50),
    "val_fraction": (float, 0.2),
    "diseases": (_str_list, ["hemorrhage"]),
    "threads": (int, 1),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key: str, raw: str):
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigSchemaError(f"unknown config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            self.values[key] = parser(raw.strip())
        except ValueError as exc:
            raise ConfigSchemaError(f"bad value for {key}: {exc}") from None

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(image_size=v["image_size"], encoder_channels=list(v["encoder_channels"]),
                           fc_sizes=list(v["fc_sizes"]), lstm_hidden=v["lstm_hidden"],
                           num_outputs=v["num_outputs"], freeze_first_n=v["freeze_first_n"])

    def train_config(self) -> TrainConfig:
        v = self.values
        aug = AugmentParams(v["max_rotation_deg"], v["crop_scale_min"], v["augment"])
        return TrainConfig(learning_rate=v["learning_rate"], accumulation_k=v["accumulation_k"],
                           epochs=v["epochs"], seed=v["seed"], threshold=v["threshold"],
                           use_class_weights=v["use_class_weights"], eval_every=v["eval_every"],
                           checkpoint_path=v["checkpoint_path"], clip_norm=v["clip_norm"],
                           augment=aug, threads=v["threads"])

    def label_columns(self) -> list:
        cols = list(DISEASES) if self.values["num_outputs"] == 5 else list(self.values["diseases"])
        bad = [c for c in cols if c not in DISEASES]
        if bad:
            raise ConfigSchemaError(f"unknown disease columns {bad}")
        if len(cols) != self.values["num_outputs"]:
            raise ConfigSchemaError(
                f"{len(cols)} disease columns configured for num_outputs={self.values['num_outputs']}")
        return cols

    def validate(self):
        try:
            self.model_config().validate()
            self.train_config().validate()
        except ValueError as exc:
            raise ConfigSchemaError(str(exc)) from None
        self.label_columns()
        if not 0 < self.values["val_fraction"] < 1:
            raise ConfigSchemaError("val_fraction must lie in (0, 1)")
        if self.values["max_images"] < 1:
            raise ConfigSchemaError("max_images must be >= 1")


def parse_config(text: str, overrides=()) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigSchemaError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        cfg.set(key, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigSchemaError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        cfg.set(key, raw)
    cfg.validate()
    return cfg


def load_config(path, overrides=()) -> RunConfig:
    return parse_config(Path(path).read_text() if path else "", overrides)
