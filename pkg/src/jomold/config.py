"""Experiment configuration, loaded from TOML.

Example::

    seeds = [1, 2, 3]
    train_fraction = 0.8

    [generator]
    num_videos = 2000
    p_audio_only = 0.05

    [optim]
    lr = 0.05
    batch_size = 64

    [denoise]
    mode = "jomold"          # none | jomold | inmold | audio_only | visual_only | constant_ratio(0.3)
    warmup_epochs = 0.9
"""

from __future__ import annotations

import dataclasses
import re
import sys
from dataclasses import dataclass, field

from .errors import ConfigError
from .synthgen import GeneratorConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DENOISE_MODES = ("none", "jomold", "inmold", "audio_only", "visual_only", "constant_ratio")
_CONST_RE = re.compile(r"^constant_ratio\(\s*([0-9.eE+-]+)\s*\)$")


@dataclass(frozen=True)
class OptimConfig:
    # the attention blocks carry no weights, so the few linear heads need a large step
    lr: float = 0.1
    decay: float = 0.25
    step_epochs: int = 6
    epochs: int = 25
    batch_size: int = 64

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay ** (epoch // self.step_epochs)


@dataclass(frozen=True)
class DenoiseConfig:
    mode: str = "jomold"
    theta_audio: float = 0.6
    theta_visual: float = 1.8
    warmup_epochs: float = 0.9
    mean_over: str = "all"
    # ablation switches
    estimator_cross_modal: bool = False
    skip_cross_modal_in_denoise: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    denoise: DenoiseConfig = field(default_factory=DenoiseConfig)
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    train_fraction: float = 0.8
    threshold: float = 0.5
    positive_only: bool = False

    def validate(self) -> None:
        self.generator.validate()
        parse_mode(self.denoise.mode)
        o = self.optim
        checks = [
            (o.lr > 0, "lr", "lr must be positive"),
            (o.epochs >= 1, "epochs", "epochs must be >= 1"),
            (o.batch_size >= 1, "batch_size", "batch_size must be >= 1"),
            (o.step_epochs >= 1, "step_epochs", "step_epochs must be >= 1"),
            (0 < o.decay <= 1, "decay", "decay must lie in (0, 1]"),
            (self.denoise.theta_audio > 0, "theta_audio", "theta_audio must be positive"),
            (self.denoise.theta_visual > 0, "theta_visual", "theta_visual must be positive"),
            (self.denoise.warmup_epochs >= 0, "warmup_epochs", "warmup_epochs must be non-negative"),
            (self.denoise.mean_over in ("all", "positives"), "mean_over",
             f"mean_over must be 'all' or 'positives', got {self.denoise.mean_over!r}"),
            (0 < self.train_fraction < 1, "train_fraction", "train_fraction must lie in (0, 1)"),
            (0 < self.threshold < 1, "threshold", "threshold must lie in (0, 1)"),
            (len(self.seeds) > 0, "seeds", "seeds must not be empty"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(msg, key=key)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some sections or fields updated, e.g. ``denoise={"mode": "none"}``."""
        updates = {}
        for key, value in sections.items():
            current = getattr(self, key)
            if isinstance(value, dict) and dataclasses.is_dataclass(current):
                updates[key] = dataclasses.replace(current, **value)
            else:
                updates[key] = value
        return dataclasses.replace(self, **updates)

    def to_dict(self) -> dict:
        return {
            "generator": self.generator.to_dict(),
            "optim": dataclasses.asdict(self.optim),
            "denoise": dataclasses.asdict(self.denoise),
            "seeds": list(self.seeds),
            "train_fraction": self.train_fraction,
            "threshold": self.threshold,
            "positive_only": self.positive_only,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}",
                              key=sorted(unknown)[0])
        kwargs = {}
        if "generator" in d:
            kwargs["generator"] = GeneratorConfig.from_dict(d.pop("generator"))
        for key, klass in (("optim", OptimConfig), ("denoise", DenoiseConfig)):
            if key in d:
                section = d.pop(key)
                names = {f.name for f in dataclasses.fields(klass)}
                bad = set(section) - names
                if bad:
                    raise ConfigError(f"unknown [{key}] keys: {sorted(bad)}", key=sorted(bad)[0])
                kwargs[key] = klass(**section)
        if "seeds" in d:
            kwargs["seeds"] = tuple(int(s) for s in d.pop("seeds"))
        kwargs.update(d)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def parse_mode(mode: str) -> tuple[str, float | None]:
    """Split a mode string into its kind and the constant ratio, if any."""
    m = _CONST_RE.match(mode.strip())
    if m:
        rho = float(m.group(1))
        if not 0 <= rho <= 1:
            raise ConfigError(f"constant ratio must lie in [0, 1], got {rho}", key="mode")
        return "constant_ratio", rho
    if mode not in DENOISE_MODES or mode == "constant_ratio":
        raise ConfigError(
            f"unknown denoise mode {mode!r}; expected one of none, jomold, inmold, "
            "audio_only, visual_only, constant_ratio(<rho>)",
            key="mode",
        )
    return mode, None


def _key_line(text: str, key: str | None) -> int | None:
    if not key:
        return None
    pat = re.compile(rf"^\s*(?:{re.escape(key)}\s*=|\[\s*{re.escape(key)}\s*\])")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if pat.match(line):
            return lineno
    return None


def load_config(path) -> ExperimentConfig:
    """Parse and validate a TOML config; errors name the offending line."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    text = data.decode("utf-8", errors="replace")
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # the decoder's message already carries "(at line L, column C)"
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return ExperimentConfig.from_dict(raw)
    except ConfigError as exc:
        line = _key_line(text, exc.key)
        where = f"{path}:{line}" if line else str(path)
        raise ConfigError(f"{where}: {exc}", key=exc.key) from exc
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
