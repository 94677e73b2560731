"""Experiment configuration in a flat ``section.key = value`` text format.

Grammar (one entry per line)::

    line    := blank | comment | entry
    comment := "#" anything
    entry   := section "." key "=" value
    value   := int | float | true | false | bare-string | list
    list    := value ("," value)*        # empty list: "none"

Keys are fixed by the dataclasses below; unknown keys and out-of-range values
are rejected at load. :func:`dumps` writes every key in a fixed order, so
``loads(dumps(cfg)) == cfg``.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields

from .schedule import ConfigError


@dataclass(frozen=True)
class RunSection:
    seed: int = 0


@dataclass(frozen=True)
class ScheduleSection:
    T: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.06


@dataclass(frozen=True)
class DataSection:
    distribution: str = "gaussian"
    dim: int = 8
    n: int = 8192
    seed: int = 0
    components: int = 2
    separation: float = 3.0
    mean: tuple[float, ...] = (0.0,)
    var: tuple[float, ...] = (1.0,)
    content_dim: int = 4
    speaker_dim: int = 4
    f0_frames: int = 8


@dataclass(frozen=True)
class ModelSection:
    width: int = 128
    depth: int = 2
    f0_emb_dim: int = 8
    t_freqs: int = 8
    t_emb_dim: int = 16
    cond_width: int = 32


@dataclass(frozen=True)
class TeacherSection:
    iters: int = 20000
    batch: int = 256
    lr: float = 1e-3
    optimizer: str = "adam"
    lr_schedule: str = "cosine"
    p_uncond: float = 0.1
    ema: float = 0.999


@dataclass(frozen=True)
class LcdSection:
    iters: int = 4000
    batch: int = 256
    mu: float = 0.95
    omega: float = 0.3
    k: int = 10
    lr: float = 5e-5
    optimizer: str = "sgd"
    lr_schedule: str = "constant"
    sigma_data: float = 0.5
    s_c: float = 10.0
    gap_every: int = 100
    checkpoint_every: int = 0


@dataclass(frozen=True)
class InferenceSection:
    N: int = 1
    taus: tuple[int, ...] = ()
    use_ema: bool = False
    guidance: bool = False
    n_samples: int = 2000
    component: int = 0


@dataclass(frozen=True)
class BenchSection:
    trials: int = 7
    warmups: int = 2
    n_samples: int = 1
    methods: tuple[str, ...] = ("teacher-100", "lcm-1", "lcm-2", "lcm-4")


@dataclass(frozen=True)
class PathsSection:
    out: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    lcd: LcdSection = field(default_factory=LcdSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    bench: BenchSection = field(default_factory=BenchSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def __post_init__(self):
        validate(self)

    def replace(self, **dotted) -> "ExperimentConfig":
        """Copy with ``section__key=value`` overrides, e.g. ``cfg.replace(lcd__mu=0.0)``."""
        sections: dict[str, dict] = {}
        for key, value in dotted.items():
            sec, name = key.split("__", 1)
            sections.setdefault(sec, {})[name] = value
        kw = {sec: dataclasses.replace(getattr(self, sec), **vals) for sec, vals in sections.items()}
        return dataclasses.replace(self, **kw)


def _section_types(cls) -> dict[str, dict[str, object]]:
    hints = typing.get_type_hints(cls)
    out = {}
    for f in fields(cls):
        sec_cls = hints[f.name]
        out[f.name] = typing.get_type_hints(sec_cls)
    return out


_SCHEMA = _section_types(ExperimentConfig)


def _parse_scalar(text: str, typ, where: str):
    if typ is bool:
        if text in ("true", "false"):
            return text == "true"
        raise ConfigError(f"{where}: expected true/false, got {text!r}")
    if typ is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {text!r}") from None
    if typ is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {text!r}") from None
    return text


def _parse_value(text: str, typ, where: str):
    if typing.get_origin(typ) is tuple:
        item = typing.get_args(typ)[0]
        if text == "none":
            return ()
        return tuple(_parse_scalar(p.strip(), item, where) for p in text.split(","))
    return _parse_scalar(text, typ, where)


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v) if v else "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def loads(text: str) -> ExperimentConfig:
    values: dict[str, dict] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} has no section")
        sec, name = key.split(".", 1)
        if sec not in _SCHEMA or name not in _SCHEMA[sec]:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if name in values.get(sec, {}):
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values.setdefault(sec, {})[name] = _parse_value(value, _SCHEMA[sec][name], f"line {lineno} ({key})")
    hints = typing.get_type_hints(ExperimentConfig)
    return ExperimentConfig(**{sec: hints[sec](**vals) for sec, vals in values.items()})


def dumps(cfg: ExperimentConfig) -> str:
    lines = []
    for sec in fields(cfg):
        section = getattr(cfg, sec.name)
        for f in fields(section):
            lines.append(f"{sec.name}.{f.name} = {_format_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return loads(fh.read())


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate(cfg: ExperimentConfig) -> None:
    s, d, m, t, lc, i, b = cfg.schedule, cfg.data, cfg.model, cfg.teacher, cfg.lcd, cfg.inference, cfg.bench
    _check(s.T >= 1, "schedule.T must be >= 1")
    _check(0 < s.beta_min <= s.beta_max < 1, "need 0 < schedule.beta_min <= schedule.beta_max < 1")
    _check(d.distribution in ("gaussian", "mixture"), "data.distribution must be gaussian or mixture")
    _check(d.dim >= 1 and d.n >= 1, "data.dim and data.n must be >= 1")
    _check(d.distribution != "mixture" or d.components >= 2, "a mixture needs data.components >= 2")
    _check(len(d.mean) in (1, d.dim) and len(d.var) in (1, d.dim), "data.mean/var need 1 or dim entries")
    _check(all(v > 0 for v in d.var), "data.var entries must be positive")
    _check(min(d.content_dim, d.speaker_dim, d.f0_frames) >= 1, "data condition sizes must be >= 1")
    _check(min(m.width, m.f0_emb_dim, m.t_freqs, m.t_emb_dim, m.cond_width) >= 1, "model sizes must be >= 1")
    _check(1 <= m.depth <= 4, "model.depth must be in 1..4")
    _check(t.iters >= 0 and t.batch >= 1 and t.lr >= 0, "teacher iters/batch/lr out of range")
    _check(0 <= t.p_uncond <= 1, "teacher.p_uncond must lie in [0, 1]")
    _check(0 <= t.ema < 1, "teacher.ema must lie in [0, 1)")
    for sec in (t, lc):
        _check(sec.optimizer in ("sgd", "adam"), "optimizer must be sgd or adam")
        _check(sec.lr_schedule in ("constant", "cosine"), "lr_schedule must be constant or cosine")
    _check(lc.iters >= 0 and lc.batch >= 1 and lc.lr >= 0, "lcd iters/batch/lr out of range")
    _check(0 <= lc.mu <= 1, "lcd.mu must lie in [0, 1]")
    _check(lc.omega >= 0, "lcd.omega must be >= 0")
    _check(1 <= lc.k <= s.T - 1, "lcd.k must lie in [1, T - 1]")
    _check(lc.sigma_data > 0 and lc.s_c > 0, "lcd.sigma_data and lcd.s_c must be positive")
    _check(lc.gap_every >= 1 and lc.checkpoint_every >= 0, "lcd.gap_every >= 1, lcd.checkpoint_every >= 0")
    _check(1 <= i.N <= s.T, "inference.N must lie in [1, T]")
    _check(all(1 <= x <= s.T - 1 for x in i.taus), "inference.taus must lie in [1, T - 1]")
    _check(all(a > b for a, b in zip(i.taus, i.taus[1:])), "inference.taus must be strictly decreasing")
    _check(i.n_samples >= 1 and i.component >= 0, "inference.n_samples >= 1, inference.component >= 0")
    _check(b.trials >= 5 and b.warmups >= 0 and b.n_samples >= 1, "bench.trials >= 5, bench.n_samples >= 1")
