"""Run configuration.

Config files are flat ``key = value`` lines whose keys are the dotted field
paths of :class:`RunConfig` (TOML syntax, so strings are quoted)::

    schedule_mode = "combined"
    target.name = "gmm_grid"
    target.dim = 2
    target.sigma = 0.3
    family.k_comp = 25
    dual.eps_tr = 0.3
    dual.eps_ent = 0.3
    loop.buffer_size = 100000
    loop.seed = 1
    output.run_dir = "runs/gmm"

Every key below ``target.`` other than ``name`` and ``dim`` is a target
parameter (see :mod:`cmt.targets`). Unknown keys are errors.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dual import DualConfig
from .mixture import FitConfig
from .targets import TargetSpec

SCHEDULE_MODES = ("combined", "tr_only", "ent_only", "fixed_linear")
BUFFER_KINDS = ("mc", "quadrature")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FamilyConfig:
    k_comp: int = 1
    var_floor: float = 1e-6
    weight_floor: float = 1e-8
    em_tol: float = 1e-7
    em_max_iters: int = 20
    component_floor: float = 1e-4
    init_entropy_scale: float = 1.5
    init_jitter: float = 0.5
    init_center: tuple | None = None

    def fit_config(self, seed: int) -> FitConfig:
        return FitConfig(self.var_floor, self.weight_floor, self.em_tol, self.em_max_iters,
                         self.component_floor, seed)


@dataclass(frozen=True)
class DualSettings:
    eps_tr: float = 0.3
    eps_ent: float = 0.5
    multiplier_max: float = 1e10
    init_guess: float = 1e-20
    tol: float = 1e-8


@dataclass(frozen=True)
class LoopConfig:
    buffer_size: int = 10_000
    max_steps: int = 100
    terminal_multiplier_tol: float = 1e-6
    refresh_buffer_every_step: bool = True
    seed: int = 0
    buffer_kind: str = "mc"
    eval_size: int | None = None
    # minibatch size and gradient steps per annealing step; only families
    # fitted iteratively consume them, weighted EM uses the whole buffer
    batch_size: int | None = None
    iters_per_step: int | None = None


@dataclass(frozen=True)
class OutputConfig:
    run_dir: str = "runs/default"
    emit_model_snapshots: bool = False
    record_wall_ms: bool = False


@dataclass(frozen=True)
class RunConfig:
    target: TargetSpec = field(default_factory=lambda: TargetSpec("gauss1d"))
    family: FamilyConfig = field(default_factory=FamilyConfig)
    dual: DualSettings = field(default_factory=DualSettings)
    loop: LoopConfig = field(default_factory=LoopConfig)
    schedule_mode: str = "combined"
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        object.__setattr__(self, "target", self.target.resolved())
        if self.schedule_mode not in SCHEDULE_MODES:
            raise ConfigError(f"schedule_mode must be one of {SCHEDULE_MODES}, got {self.schedule_mode!r}")
        if self.loop.buffer_kind not in BUFFER_KINDS:
            raise ConfigError(f"loop.buffer_kind must be one of {BUFFER_KINDS}")
        if self.loop.buffer_kind == "quadrature" and self.target.dim > 2:
            raise ConfigError("quadrature buffers need a target with dim <= 2")
        if self.loop.max_steps < 1:
            raise ConfigError("loop.max_steps must be >= 1")
        floor = 10 * self.family.k_comp * self.target.dim
        if self.loop.buffer_kind == "mc" and self.loop.buffer_size < floor:
            raise ConfigError(
                f"loop.buffer_size={self.loop.buffer_size} below 10 * k_comp * dim = {floor}"
            )
        if self.family.k_comp < 1:
            raise ConfigError("family.k_comp must be >= 1")
        self.dual_config()

    def dual_config(self) -> DualConfig:
        d = self.dual
        try:
            return DualConfig(
                eps_tr=d.eps_tr,
                eps_ent=d.eps_ent,
                tr_enabled=self.schedule_mode in ("combined", "tr_only"),
                ent_enabled=self.schedule_mode in ("combined", "ent_only"),
                multiplier_max=d.multiplier_max,
                init_guess=d.init_guess,
                tol=d.tol,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, flat: dict) -> "RunConfig":
        merged = to_flat(self)
        merged.update(flat)
        return from_flat(merged)


_SECTIONS = {"family": FamilyConfig, "dual": DualSettings, "loop": LoopConfig, "output": OutputConfig}


def to_flat(cfg: RunConfig) -> dict:
    """Dotted-key view of ``cfg``, the inverse of :func:`from_flat`."""
    out = {"schedule_mode": cfg.schedule_mode, "target.name": cfg.target.name, "target.dim": cfg.target.dim}
    for k, v in cfg.target.params.items():
        out[f"target.{k}"] = v
    for section in _SECTIONS:
        for k, v in asdict(getattr(cfg, section)).items():
            out[f"{section}.{k}"] = list(v) if isinstance(v, tuple) else v
    return out


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def from_flat(flat: dict) -> RunConfig:
    target_name = flat.get("target.name", "gauss1d")
    target_dim = flat.get("target.dim")
    params = {}
    sections: dict[str, dict] = {s: {} for s in _SECTIONS}
    schedule_mode = flat.get("schedule_mode", "combined")
    for key, value in flat.items():
        if key in ("target.name", "target.dim", "schedule_mode"):
            continue
        head, _, tail = key.partition(".")
        if head == "target" and tail:
            params[tail] = value
        elif head in _SECTIONS and tail:
            allowed = {f.name for f in fields(_SECTIONS[head])}
            if tail not in allowed:
                raise ConfigError(f"unknown config key {key!r}")
            sections[head][tail] = tuple(value) if isinstance(value, list) else value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return RunConfig(
            target=TargetSpec(target_name, target_dim, params),
            family=FamilyConfig(**sections["family"]),
            dual=DualSettings(**sections["dual"]),
            loop=LoopConfig(**sections["loop"]),
            schedule_mode=schedule_mode,
            output=OutputConfig(**sections["output"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config_text(text: str) -> dict:
    try:
        return _flatten(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return from_flat(parse_config_text(fh.read()))


def load_grid(path) -> dict:
    """Sweep grid: each dotted key maps to a list of values."""
    with open(path, encoding="utf-8") as fh:
        grid = parse_config_text(fh.read())
    for k, v in grid.items():
        if not isinstance(v, list) or not v:
            raise ConfigError(f"grid key {k!r} must map to a non-empty list")
    return grid


def dump_config(cfg: RunConfig) -> str:
    """Flat TOML text that :func:`load_config` reads back to ``cfg``."""
    lines = []
    for k, v in to_flat(cfg).items():
        if v is None:
            continue
        lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


__all__ = [
    "ConfigError", "FamilyConfig", "DualSettings", "LoopConfig", "OutputConfig", "RunConfig",
    "load_config", "load_grid", "from_flat", "to_flat", "dump_config", "replace",
]
