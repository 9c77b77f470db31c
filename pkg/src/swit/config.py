"""Plain-text ``section.key = value`` run configuration.

Sections map onto the library dataclasses (``scenario``, ``augment``,
``encoder``, ``trainer``, ``eval``) plus ``run`` for the root seed and
output directory. Values use a small literal syntax: numbers, ``true`` /
``false``, ``none``, bare words for strings and parenthesised tuples.
Unknown keys are rejected.
"""

from __future__ import annotations

import ast
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentPolicy
from .channel_sim import ScenarioConfig
from .encoder import EncoderConfig
from .errors import ConfigError, SwitError
from .evaluation import EvalConfig
from .trainer import TrainerConfig

SECTIONS: dict[str, type] = {
    "scenario": ScenarioConfig,
    "augment": AugmentPolicy,
    "encoder": EncoderConfig,
    "trainer": TrainerConfig,
    "eval": EvalConfig,
}

# fields owned by the run section or derived from other sections
DERIVED = {
    "scenario": {"seed"},
    "eval": {"seed"},
    "encoder": {"token_width"},
}


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        # one root seed feeds every module; the token width follows the array size
        object.__setattr__(self, "scenario", dataclasses.replace(self.scenario, seed=self.seed))
        object.__setattr__(self, "eval", dataclasses.replace(self.eval, seed=self.seed))
        width = 3 * self.scenario.num_antennas
        object.__setattr__(self, "encoder", dataclasses.replace(self.encoder, token_width=width))


def _keys(section: str) -> list[str]:
    skip = DERIVED.get(section, set())
    return [f.name for f in dataclasses.fields(SECTIONS[section]) if f.name not in skip]


def allowed_keys() -> list[str]:
    keys = [f"{s}.{k}" for s in SECTIONS for k in _keys(s)]
    return keys + ["run.seed", "run.out_dir"]


# --- values -------------------------------------------------------------------------


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        inner = ", ".join(format_value(x) for x in v)
        return f"({inner},)" if len(v) == 1 else f"({inner})"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _literal(text: str):
    low = text.strip().lower()
    if low in ("none", "null", "noiseless"):
        return None
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return ast.literal_eval(
            text.replace("true", "True").replace("false", "False").replace("none", "None")
        )
    except (ValueError, SyntaxError):
        return text.strip()


def _coerce(value, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, key)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(f"{key}: {value!r} matches none of {hint}")
    if origin is tuple:
        if not isinstance(value, (tuple, list)):
            value = (value,)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], key) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{key}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(v, a, key) for v, a in zip(value, args))
    if hint is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if hint is str:
        return value if isinstance(value, str) else format_value(value)
    raise ConfigError(f"{key}: unsupported type {hint}")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


# --- parse / serialize --------------------------------------------------------------


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def from_pairs(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Overlay ``pairs`` on ``base`` (defaults when None)."""
    base = base or RunConfig()
    allowed = set(allowed_keys())
    unknown = sorted(set(pairs) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    sections = {name: {} for name in SECTIONS}
    run = {"seed": base.seed, "out_dir": base.out_dir}
    for key, text in pairs.items():
        section, name = key.split(".", 1)
        if section == "run":
            hint = int if name == "seed" else str
            run[name] = _coerce(text if hint is str else _literal(text), hint, key)
        else:
            hint = _hints(SECTIONS[section])[name]
            raw = text if hint is str else _literal(text)
            sections[section][name] = _coerce(raw, hint, key)
    try:
        built = {
            name: dataclasses.replace(getattr(base, name), **values) for name, values in sections.items()
        }
        return RunConfig(**built, **run)
    except SwitError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    return from_pairs(parse_pairs(text, source))


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        lines.extend(f"{section}.{k} = {format_value(getattr(obj, k))}" for k in _keys(section))
        lines.append("")
    lines.append(f"run.seed = {cfg.seed}")
    lines.append(f"run.out_dir = {cfg.out_dir}")
    return "\n".join(lines) + "\n"
