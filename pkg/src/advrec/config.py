"""Run configuration: key=value files with dotted sections, flag overrides.

Every key is validated against the schema below before any work starts;
unknown keys are errors. Command-line flags override file values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError
from .training import TrainConfig


def _boolish(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _lambda_grid(raw: str) -> list[float]:
    values = [float(part) for part in raw.split(",") if part.strip() != ""]
    if not values:
        raise ValueError("empty grid")
    return values


# key -> (caster, default); None default means "no value unless configured"
SCHEMA = {
    "data.name": (str, "dataset"),
    "data.interactions": (str, None),
    "data.demographics": (str, None),
    "data.cache": (str, None),
    "data.k_core": (int, 5),
    "data.age_cap": (float, 60.0),
    "data.item_subsample": (int, 0),
    "data.subsample_seed": (int, 0),
    "train.epochs_adversarial": (int, 200),
    "train.epochs_attack": (int, 50),
    "train.batch_size": (int, 64),
    "train.beta_max": (float, 0.4),
    "train.anneal_steps": (int, 10_000),
    "train.lr": (float, 1e-3),
    "train.adam_beta1": (float, 0.9),
    "train.adam_beta2": (float, 0.999),
    "train.adam_epsilon": (float, 1e-8),
    "train.d_hidden": (int, 600),
    "train.d_latent": (int, 200),
    "train.d_adv_hidden": (int, 128),
    "train.dropout_keep": (float, 0.5),
    "train.activation": (str, "tanh"),
    "train.clip_grad": (float, 0.0),
    "train.continuous_head": (str, "sigmoid"),
    "train.holdout_ratio": (float, 0.2),
    "train.val_every": (int, 1),
    "train.selection": (str, "best"),
    "train.model_seed": (int, 0),
    "train.data_seed": (int, 1),
    "train.adversary_seed": (int, 2),
    "train.fold": (int, 0),
    "train.n_folds": (int, 5),
    "lambda.gender": (float, None),
    "lambda.age": (float, None),
    "grid.gender": (_lambda_grid, None),
    "grid.age": (_lambda_grid, None),
    "out.dir": (str, "runs"),
}


def parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, _, raw = stripped.partition("=")
            values[key.strip()] = raw.strip()
    return values


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def require(self, key: str):
        value = self.values.get(key)
        if value is None:
            raise ConfigError(f"configuration key {key!r} is required for this command")
        return value

    def lambdas(self) -> dict[str, float]:
        out = {}
        for key, value in self.values.items():
            if key.startswith("lambda.") and value is not None:
                out[key.split(".", 1)[1]] = float(value)
        return out

    def grid(self) -> dict[str, list[float]]:
        out = {}
        for key, value in self.values.items():
            if key.startswith("grid.") and value is not None:
                out[key.split(".", 1)[1]] = list(value)
        return out

    def train_config(self) -> TrainConfig:
        v = self.values
        config = TrainConfig(
            epochs_adversarial=v["train.epochs_adversarial"],
            epochs_attack=v["train.epochs_attack"],
            batch_size=v["train.batch_size"],
            beta_max=v["train.beta_max"],
            anneal_steps=v["train.anneal_steps"],
            lr=v["train.lr"],
            adam_beta1=v["train.adam_beta1"],
            adam_beta2=v["train.adam_beta2"],
            adam_epsilon=v["train.adam_epsilon"],
            d_hidden=v["train.d_hidden"],
            d_latent=v["train.d_latent"],
            d_adv_hidden=v["train.d_adv_hidden"],
            dropout_keep=v["train.dropout_keep"],
            activation=v["train.activation"],
            clip_grad=v["train.clip_grad"],
            continuous_head=v["train.continuous_head"],
            holdout_ratio=v["train.holdout_ratio"],
            val_every=v["train.val_every"],
            selection=v["train.selection"],
            model_seed=v["train.model_seed"],
            data_seed=v["train.data_seed"],
            adversary_seed=v["train.adversary_seed"],
            lambdas=self.lambdas(),
        )
        config.validate()
        return config

    def manifest_dict(self) -> dict:
        rendered = {}
        for key, value in sorted(self.values.items()):
            if value is None:
                continue
            rendered[key] = value if not isinstance(value, list) else list(value)
        return rendered


def load_config(path: str | None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Merge schema defaults, a config file and overrides, validating keys."""
    raw: dict[str, str] = {}
    if path is not None:
        raw.update(parse_config_file(path))
    if overrides:
        raw.update(overrides)
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    values = {}
    for key, (caster, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = caster(raw[key])
            except (ValueError, TypeError) as err:
                raise ConfigError(f"bad value for {key}: {raw[key]!r} ({err})") from None
        else:
            values[key] = default
    return RunConfig(values=values)


def apply_seed(config: RunConfig, seed: int) -> None:
    """A single master seed fans out to the three independent streams."""
    config.values["train.model_seed"] = seed
    config.values["train.data_seed"] = seed + 1
    config.values["train.adversary_seed"] = seed + 2


def apply_lambda_flags(config: RunConfig, pairs: list[str]) -> None:
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--lambda expects ATTR=VALUE, got {pair!r}")
        name, _, raw = pair.partition("=")
        key = f"lambda.{name.strip()}"
        if key not in SCHEMA:
            raise ConfigError(f"unknown attribute for --lambda: {name.strip()!r}")
        try:
            config.values[key] = float(raw)
        except ValueError:
            raise ConfigError(f"--lambda {pair!r}: value is not a number") from None
