"""Flat ``key = value`` run configuration with ``--set key=value`` overrides."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace

from .errors import BadConfigError, ParseError, ScalingOutOfRangeError
from .model import ModelConfig
from .training import TrainConfig

ECHO_PREFIX = "# config: "


@dataclass(frozen=True)
class RunConfig:
    skeleton: str = "h36m16"
    dataset: str = ""
    val_dataset: str = ""
    out_dir: str = "runs/posekan"
    F: int = 240
    s: float = 0.2
    alpha: float = 0.03
    grid_size: int = 5
    order: int = 3
    dropout: float = 0.2
    blocks: int = 4
    stack_depth: int = 5
    batch_size: int = 64
    epochs: int = 30
    lr: float = 0.001
    decay: float = 0.99
    decay_every: int = 4
    seed: int = 0
    irc: bool = True
    domain_lo: float = -1.0
    domain_hi: float = 1.0
    checkpoint_every: int = 0
    log_seconds: bool = False

    # -- construction -----------------------------------------------------

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, values, base=None):
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        parsed = {}
        for key, raw in values.items():
            if key not in types:
                raise BadConfigError(f"unknown config key {key!r}")
            parsed[key] = _coerce(key, types[key], raw)
        return replace(base, **parsed)

    @classmethod
    def load(cls, path=None, overrides=(), env=None):
        """Config file (optional) plus ``key=value`` overrides. When neither
        sets ``seed``, ``POSEKAN_SEED`` is used if present."""
        env = os.environ if env is None else env
        values = parse_config_text(open(path).read(), path) if path else {}
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise BadConfigError(f"override {item!r} is not key=value")
            values[key.strip()] = value.strip()
        if "seed" not in values and env.get("POSEKAN_SEED"):
            values["seed"] = env["POSEKAN_SEED"]
        return cls.from_mapping(values).validate()

    # -- validation ---------------------------------------------------------

    def validate(self):
        if not 0.0 < self.s < 1.0:
            raise ScalingOutOfRangeError(f"s={self.s}: must lie in the open interval (0, 1)")
        checks = [
            ("F", self.F >= 1, "must be >= 1"),
            ("alpha", 0.0 <= self.alpha <= 1.0, "must lie in [0, 1]"),
            ("grid_size", self.grid_size >= 1, "must be >= 1"),
            ("order", self.order >= 0, "must be >= 0"),
            ("dropout", 0.0 <= self.dropout < 1.0, "must lie in [0, 1)"),
            ("blocks", self.blocks >= 0, "must be >= 0"),
            ("stack_depth", self.stack_depth >= 0, "must be >= 0"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("lr", self.lr > 0.0, "must be > 0"),
            ("decay", 0.0 < self.decay <= 1.0, "must lie in (0, 1]"),
            ("decay_every", self.decay_every >= 1, "must be >= 1"),
            ("seed", self.seed >= 0, "must be >= 0"),
            ("domain_lo", self.domain_lo < self.domain_hi, "must be below domain_hi"),
            ("checkpoint_every", self.checkpoint_every >= 0, "must be >= 0"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise BadConfigError(f"{key}={getattr(self, key)!r}: {msg}")
        return self

    # -- conversions ----------------------------------------------------------

    def model_config(self):
        return ModelConfig(
            embed_dim=self.F, scaling=self.s, grid_size=self.grid_size, order=self.order,
            dropout=self.dropout, blocks=self.blocks, stack_depth=self.stack_depth,
            irc=self.irc, seed=self.seed, domain_lo=self.domain_lo, domain_hi=self.domain_hi,
        )

    def train_config(self, out_dir=None):
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, alpha=self.alpha, lr=self.lr,
            decay=self.decay, decay_every=self.decay_every, seed=self.seed,
            out_dir=self.out_dir if out_dir is None else out_dir,
            checkpoint_every=self.checkpoint_every, log_seconds=self.log_seconds,
            config_echo=self.echo(),
        )

    def echo(self):
        """One-line rendering that :meth:`from_echo` parses back exactly."""
        parts = [f"{k}={_render(v)}" for k, v in asdict(self).items()]
        return ECHO_PREFIX + "; ".join(parts)

    @classmethod
    def from_echo(cls, line):
        if not line.startswith(ECHO_PREFIX):
            raise BadConfigError("not a config echo line")
        values = {}
        for part in line[len(ECHO_PREFIX) :].rstrip("\n").split("; "):
            key, _, value = part.partition("=")
            values[key] = value
        return cls.from_mapping(values).validate()


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key, typ, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise BadConfigError(f"{key}={raw!r}: expected {getattr(typ, '__name__', typ)}") from None
    return raw


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError(f"{source}: expected 'key = value'", line=lineno)
        values[key.strip()] = value.strip()
    return values


def help_text():
    lines = ["configuration keys (defaults):"]
    for f in fields(RunConfig):
        lines.append(f"  {f.name:<17s} {_render(f.default)}")
    return "\n".join(lines)
