"""Run configuration and its flat ``section.key = value`` text format."""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .network import DftConfig
from .trainer import PatchCycleSchedule, TrainPlan, preset_plan


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 2e-2


@dataclass
class DataConfig:
    root: str = ""
    kind: str = "rain"
    params: str = ""


@dataclass
class EvalConfig:
    y_channel: bool = True
    sample_steps: int = 4


def _default_plan(stage):
    return preset_plan("derain", stage)


@dataclass
class RunConfig:
    model: DftConfig = field(default_factory=DftConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    coarse: TrainPlan = field(default_factory=lambda: _default_plan("coarse"))
    fine: TrainPlan = field(default_factory=lambda: _default_plan("fine"))
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def plan(self, stage):
        plan = self.coarse if stage == "coarse" else self.fine
        return dataclasses.replace(plan, seed=self.seed)

    def to_text(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in flatten(self).items())

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


# TrainPlan fields that never appear in config files
_PLAN_SKIP = {"stage", "seed", "patch_cycle"}


def flatten(cfg):
    out = {}
    for sec in ("model", "schedule", "coarse", "fine", "data", "eval"):
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            if isinstance(obj, TrainPlan) and f.name in _PLAN_SKIP:
                continue
            out[f"{sec}.{f.name}"] = getattr(obj, f.name)
        if isinstance(obj, TrainPlan):
            out[f"{sec}.patch_cycle"] = obj.patch_cycle.entries
            out[f"{sec}.patch_period"] = obj.patch_cycle.period
    out["seed"] = cfg.seed
    return out


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        if v and isinstance(v[0], (list, tuple)):
            return ", ".join(f"{p}x{b}" for p, b in v)
        return ", ".join(_format(x) for x in v)
    return str(v)


def _parse_like(text, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, (list, tuple)):
        items = [s.strip() for s in text.split(",") if s.strip()]
        if default and isinstance(default[0], (list, tuple)):
            entries = []
            for item in items:
                p, b = item.lower().split("x")
                entries.append((int(p), int(b)))
            return entries
        elem = default[0] if default else 0
        vals = [_parse_like(s, elem) for s in items]
        return tuple(vals) if isinstance(default, tuple) else vals
    return text


def parse_lines(lines):
    pairs = {}
    problems = []
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {n}: expected 'key = value', got {raw.strip()!r}")
            continue
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    if problems:
        raise ConfigError(problems)
    return pairs


def from_pairs(pairs, base=None):
    """Apply ``{dotted_key: text}`` overrides on top of ``base`` (full-scale defaults)."""
    base = base or RunConfig()
    flat = flatten(base)
    problems = []
    values = dict(flat)
    for key, text in pairs.items():
        if key not in flat:
            problems.append(f"{key}: unknown key")
            continue
        try:
            values[key] = _parse_like(text, flat[key])
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    if problems:
        raise ConfigError(problems)
    return build(values, problems)


def build(values, problems=None):
    problems = problems if problems is not None else []

    def section(prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in values.items() if k.startswith(prefix + ".")}

    parts = {}
    for name, cls in (("model", DftConfig), ("schedule", ScheduleConfig), ("data", DataConfig), ("eval", EvalConfig)):
        try:
            parts[name] = cls(**section(name))
        except (ValueError, TypeError) as exc:
            problems.append(f"{name}: {exc}")
    for stage in ("coarse", "fine"):
        kw = section(stage)
        try:
            cycle = PatchCycleSchedule(kw.pop("patch_cycle"), kw.pop("patch_period"))
            parts[stage] = TrainPlan(stage=stage, patch_cycle=cycle, **kw)
        except (ValueError, TypeError) as exc:
            problems.append(f"{stage}: {exc}")
    s = parts.get("schedule")
    if s is not None:
        if s.T < 1:
            problems.append("schedule.T: must be >= 1")
        if not (0 < s.beta_1 <= s.beta_T < 1):
            problems.append("schedule.beta_1/beta_T: need 0 < beta_1 <= beta_T < 1")
    if problems:
        raise ConfigError(problems)
    return RunConfig(seed=int(values["seed"]), **parts)


def load_config(path=None, overrides=None, base=None):
    pairs = {}
    if path is not None:
        pairs.update(parse_lines(Path(path).read_text(encoding="utf-8").splitlines()))
    pairs.update(overrides or {})
    return from_pairs(pairs, base=base)


def config_from_text(text):
    return from_pairs(parse_lines(text.splitlines()))
