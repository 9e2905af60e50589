"""Experiment configuration: flat ``key = value`` text with sections.

Every run resolves its full configuration (profile defaults, config file,
command-line overrides) and writes the result next to its outputs; parsing
that file back yields an identical configuration, making any run reproducible
from the emitted text alone.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

from .channel import GeneratorParams
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

STAGE_CHOICES = ("two-stage", "end-to-end")
BASELINE_CHOICES = ("none", "identity")
PROFILES = ("desk", "paper")


@dataclass(frozen=True)
class ExperimentConfig:
    # experiment
    master_seed: int = 42
    profile: str = "desk"
    out_dir: str = "runs/exp"
    # generator
    n_c: int = 256
    n_t: int = 32
    n_cc: int = 32
    delay_centers: tuple[float, ...] = (3.0, 9.0, 18.0)
    angle_centers: tuple[float, ...] = (6.0, 16.0, 26.0)
    delay_spreads: tuple[float, ...] = (1.0, 1.4, 1.8)
    angle_spreads: tuple[float, ...] = (1.2, 1.6, 2.2)
    cluster_powers: tuple[float, ...] = (1.0, 0.5, 0.25)
    cnr_db: float = 10.0
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400
    # model
    gamma: Fraction = Fraction(1, 4)
    leaky_slope: float = 0.3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.99
    # train
    stage: str = "two-stage"
    epochs: int = 100
    batch_size: int = 100
    learning_rate: float = 1e-3
    patience: int | None = None
    # eval
    eval_cnrs: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0)
    eval_gammas: tuple[Fraction, ...] = (Fraction(1, 4),)
    baseline: str = "none"

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}, choose from {PROFILES}")
        if self.stage not in STAGE_CHOICES:
            raise ConfigError(f"unknown training stage {self.stage!r}, choose from {STAGE_CHOICES}")
        if self.baseline not in BASELINE_CHOICES:
            raise ConfigError(f"unknown baseline {self.baseline!r}, choose from {BASELINE_CHOICES}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("split sizes must all be at least 1")
        if self.patience is not None and self.patience < 1:
            raise ConfigError(f"patience must be >= 1 or none, got {self.patience}")
        self.generator_params().validate()
        self.model_config().codeword_len  # raises on non-integer codeword length

    def generator_params(self) -> GeneratorParams:
        return GeneratorParams(
            n_c=self.n_c, n_t=self.n_t, n_cc=self.n_cc,
            delay_centers=self.delay_centers, angle_centers=self.angle_centers,
            delay_spreads=self.delay_spreads, angle_spreads=self.angle_spreads,
            cluster_powers=self.cluster_powers)

    def model_config(self, gamma: Fraction | None = None) -> ModelConfig:
        return ModelConfig(n_cc=self.n_cc, n_t=self.n_t,
                           gamma=self.gamma if gamma is None else gamma,
                           leaky_slope=self.leaky_slope, bn_eps=self.bn_eps,
                           bn_momentum=self.bn_momentum, seed=self.master_seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, seed=self.master_seed,
                           patience=self.patience)

    def split_offsets(self) -> dict[str, int]:
        return {"train": 0, "val": self.n_train, "test": self.n_train + self.n_val}

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


# profile defaults applied over the dataclass defaults
_PROFILE_OVERRIDES: dict[str, dict[str, object]] = {
    "desk": {},
    "paper": {
        "profile": "paper",
        "n_c": 1024,
        "n_train": 100_000,
        "n_val": 30_000,
        "n_test": 20_000,
        "epochs": 1000,
        "batch_size": 1000,
    },
}


def default_config(profile: str = "desk") -> ExperimentConfig:
    if profile not in _PROFILE_OVERRIDES:
        raise ConfigError(f"unknown profile {profile!r}, choose from {PROFILES}")
    return replace(ExperimentConfig(profile=profile), **_PROFILE_OVERRIDES[profile])


# (section, key) -> (field name, kind)
_KINDS = {}
_SECTION_LAYOUT: list[tuple[str, list[str]]] = [
    ("experiment", ["master_seed", "profile", "out_dir"]),
    ("generator", ["n_c", "n_t", "n_cc", "delay_centers", "angle_centers",
                   "delay_spreads", "angle_spreads", "cluster_powers",
                   "cnr_db", "n_train", "n_val", "n_test"]),
    ("model", ["gamma", "leaky_slope", "bn_eps", "bn_momentum"]),
    ("train", ["stage", "epochs", "batch_size", "learning_rate", "patience"]),
    ("eval", ["eval_cnrs", "eval_gammas", "baseline"]),
]
_KEY_NAMES = {"eval_cnrs": "cnr_list", "eval_gammas": "gammas"}
_FIELD_BY_KEY = {(section, _KEY_NAMES.get(name, name)): name
                 for section, names in _SECTION_LAYOUT for name in names}


def _parse_value(field_name: str, raw: str):
    raw = raw.strip()
    kind = _field_kinds()[field_name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw
        if kind == "fraction":
            return Fraction(raw)
        if kind == "float_list":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if kind == "fraction_list":
            return tuple(Fraction(v.strip()) for v in raw.split(",") if v.strip())
        if kind == "opt_int":
            return None if raw.lower() == "none" else int(raw)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse {field_name} value {raw!r}: {exc}") from exc
    raise ConfigError(f"unhandled config kind {kind!r}")


def _format_value(field_name: str, value) -> str:
    kind = _field_kinds()[field_name]
    if kind == "float":
        return repr(float(value))
    if kind == "fraction":
        f = Fraction(value)
        return f"{f.numerator}/{f.denominator}" if f.denominator != 1 else str(f.numerator)
    if kind == "float_list":
        return ", ".join(repr(float(v)) for v in value)
    if kind == "fraction_list":
        return ", ".join(_format_value("gamma", v) for v in value)
    if kind == "opt_int":
        return "none" if value is None else str(value)
    return str(value)


def _field_kinds() -> dict[str, str]:
    if _KINDS:
        return _KINDS
    by_type = {"master_seed": "int", "profile": "str", "out_dir": "str",
               "n_c": "int", "n_t": "int", "n_cc": "int",
               "delay_centers": "float_list", "angle_centers": "float_list",
               "delay_spreads": "float_list", "angle_spreads": "float_list",
               "cluster_powers": "float_list", "cnr_db": "float",
               "n_train": "int", "n_val": "int", "n_test": "int",
               "gamma": "fraction", "leaky_slope": "float", "bn_eps": "float",
               "bn_momentum": "float", "stage": "str", "epochs": "int",
               "batch_size": "int", "learning_rate": "float", "patience": "opt_int",
               "eval_cnrs": "float_list", "eval_gammas": "fraction_list",
               "baseline": "str"}
    _KINDS.update(by_type)
    return _KINDS


def parse_pairs(text: str) -> dict[tuple[str, str], str]:
    """Raw (section, key) -> value strings from config text."""
    pairs: dict[tuple[str, str], str] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno} is not 'key = value': {line!r}")
        if section is None:
            raise ConfigError(f"config line {lineno} appears before any [section]")
        key, _, raw = stripped.partition("=")
        pairs[(section, key.strip())] = raw.strip()
    return pairs


def apply_pairs(cfg: ExperimentConfig, pairs: dict[tuple[str, str], str]) -> ExperimentConfig:
    updates = {}
    for (section, key), raw in pairs.items():
        field_name = _FIELD_BY_KEY.get((section, key))
        if field_name is None:
            raise ConfigError(f"unknown config key [{section}] {key}")
        updates[field_name] = _parse_value(field_name, raw)
    return replace(cfg, **updates)


def parse_config(text: str) -> ExperimentConfig:
    """Config from text: the file's profile supplies the baseline defaults."""
    pairs = parse_pairs(text)
    profile = pairs.get(("experiment", "profile"), "desk")
    return apply_pairs(default_config(profile), pairs)


def render_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, names in _SECTION_LAYOUT:
        lines.append(f"[{section}]")
        for name in names:
            key = _KEY_NAMES.get(name, name)
            lines.append(f"{key} = {_format_value(name, getattr(cfg, name))}")
        lines.append("")
    return "\n".join(lines)


def read_config_file(path) -> ExperimentConfig:
    with open(path) as f:
        return parse_config(f.read())


def write_config_file(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        f.write(render_config(cfg))
