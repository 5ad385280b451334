"""Plain-text key=value configuration: parsing, canonical serialization,
typed run configs with section prefixes (e.g. ``sched3d.steps=50``), and
config hashing for manifests.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    """Raised for malformed key=value text or unknown/ill-typed keys."""


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' lines are comments, blanks ignored."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {ln}: empty key")
        if key in out:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def format_kv(mapping: dict[str, str]) -> str:
    return "\n".join(f"{k} = {mapping[k]}" for k in sorted(mapping)) + "\n"


def _coerce(value: str, ftype, key: str):
    try:
        if ftype is int:
            return int(value)
        if ftype is float:
            return float(value)
        if ftype is bool:
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if ftype is str:
            return value
        # remaining supported type: tuple of floats
        return tuple(float(v) for v in value.split())
    except ValueError:
        raise ConfigError(f"bad value {value!r} for key {key!r}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    if isinstance(v, tuple):
        return " ".join(f"{x:.17g}" for x in v)
    return str(v)


def _apply_section(obj, prefix: str, kv: dict[str, str], consumed: set[str]):
    by_name = {f.name: f for f in fields(obj)}
    for key, value in kv.items():
        if not key.startswith(prefix + "."):
            continue
        name = key[len(prefix) + 1 :]
        if name not in by_name:
            raise ConfigError(f"unknown key {key!r}")
        ftype = by_name[name].type
        if isinstance(ftype, str):  # postponed annotations
            ftype = {"int": int, "float": float, "bool": bool, "str": str}.get(
                ftype, tuple
            )
        setattr(obj, name, _coerce(value, ftype, key))
        consumed.add(key)


def _dump_section(obj, prefix: str, out: dict[str, str]):
    for f in fields(obj):
        out[f"{prefix}.{f.name}"] = _format_value(getattr(obj, f.name))


@dataclass
class ScheduleConfig:
    kind: str = "cosine"  # 'linear_beta' | 'cosine'
    steps: int = 50


@dataclass
class RenderConfig:
    width: int = 64
    height: int = 64
    n_views: int = 8
    elevation_deg: float = 30.0
    radius: float = 2.2
    fov_y_deg: float = 50.0
    s_sharpness: float = 20.0
    samples: int = 32  # per-ray samples for in-loop guidance renders
    final_samples: int = 128  # per-ray samples for outputs and metrics
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    near: float = 0.0  # 0 -> radius - sqrt(3), clamped at 0.05
    far: float = 0.0  # 0 -> radius + sqrt(3)


@dataclass
class SamplerConfig:
    steps: int = 50  # shared step count; both schedules must match it
    grid_n: int = 32
    gamma_3d: float = 3.0
    gamma_2d: float = 7.5
    enable_2d_to_3d: bool = True
    enable_3d_to_2d: bool = True
    teacher_forced_3d: bool = False  # feed ground-truth views to the 3D branch
    teacher_forced_2d: bool = False  # feed ground-truth renders to the 2D branch
    deterministic: bool = False  # noise-free (DDIM-style) updates
    seed: int = 0
    snapshot_every: int = 10
    label: str = "default"


@dataclass
class Oracle3dConfig:
    lambda_c: float = 0.5  # pull toward the hull implied by conditioning views
    lambda_p: float = 0.3  # pull toward the prior occupancy SDF
    bias: str = "none"  # 'none' | 'sdf_warp'
    bias_amplitude: float = 0.0


@dataclass
class Oracle2dConfig:
    lambda_c: float = 0.5  # pull toward the conditioning renders
    bias: str = "none"  # 'none' | 'hue_shift' | 'view_shift'
    shift_px: int = 0
    hue_amount: float = 0.0
    labels: str = "default"  # whitespace-separated label vocabulary


@dataclass
class PriorConfig:
    coarse_n: int = 16
    noise_t_frac: float = 0.4  # schedule fraction used when noising the code
    drop_probability: float = 0.1  # paired-evaluation drop rate, recorded in manifests
    squash_gain: float = 12.0
    squash_center: float = 0.4
    occupancy_threshold: float = 1.0


@dataclass
class HullConfig:
    inside_evidence: float = 0.99  # evidence needed to call a voxel inside
    silhouette_eps: float = 0.1  # |rgb - background| threshold for coverage
    # the soft density shell makes rendered silhouettes systematically fat;
    # shrink is calibrated on the canonical sphere render at sharpness 20
    shrink: float = 0.22
    # silhouettes say nothing about interior depth, so the hull acts as a
    # carving shell: inside distances are clamped at this world-unit depth
    interior_cap: float = 0.07


@dataclass
class DistillConfig:
    hires_n: int = 64
    opacity_threshold: float = 0.01  # per-voxel opacity for the occupancy bound
    dilate: int = 1
    iters: int = 500
    step: float = 0.015
    w_density: float = 1.0
    w_render: float = 0.1
    render_width: int = 48
    render_height: int = 48
    render_samples: int = 48
    seed: int = 0
    halve_on_increase: bool = True
    divergence_factor: float = 10.0


@dataclass
class RefineConfig:
    t_lo_frac: float = 0.02
    t_hi_frac: float = 0.5
    iters: int = 200
    step: float = 0.003
    render_width: int = 48
    render_height: int = 48
    render_samples: int = 48
    seed: int = 0


@dataclass
class RunConfig:
    sched3d: ScheduleConfig = field(default_factory=ScheduleConfig)
    sched2d: ScheduleConfig = field(default_factory=ScheduleConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    oracle3d: Oracle3dConfig = field(default_factory=Oracle3dConfig)
    oracle2d: Oracle2dConfig = field(default_factory=Oracle2dConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    hull: HullConfig = field(default_factory=HullConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)

    _SECTIONS = (
        "sched3d",
        "sched2d",
        "render",
        "sampler",
        "oracle3d",
        "oracle2d",
        "prior",
        "hull",
        "distill",
        "refine",
    )

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "RunConfig":
        cfg = cls()
        consumed: set[str] = set()
        for name in cls._SECTIONS:
            _apply_section(getattr(cfg, name), name, kv, consumed)
        unknown = set(kv) - consumed
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls.from_mapping(parse_kv_text(text))

    def to_mapping(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for name in self._SECTIONS:
            _dump_section(getattr(self, name), name, out)
        return out

    def to_text(self) -> str:
        return format_kv(self.to_mapping())

    def validate(self) -> None:
        if self.sched3d.steps != self.sampler.steps or self.sched2d.steps != self.sampler.steps:
            raise ConfigError(
                "sampler.steps must match sched3d.steps and sched2d.steps "
                "(the two chains advance in lockstep)"
            )
        if not (0.0 <= self.oracle3d.lambda_c <= 1.0 and 0.0 <= self.oracle2d.lambda_c <= 1.0):
            raise ConfigError("lambda_c must lie in [0, 1]")
        if not 0.0 <= self.oracle3d.lambda_p <= 1.0:
            raise ConfigError("lambda_p must lie in [0, 1]")
        if not 0.0 <= self.prior.drop_probability <= 1.0:
            raise ConfigError("prior.drop_probability must lie in [0, 1]")
        if not 0.0 <= self.refine.t_lo_frac < self.refine.t_hi_frac <= 1.0:
            raise ConfigError("refine range must satisfy 0 <= lo < hi <= 1")
        if abs(self.render.elevation_deg) > 89.0:
            raise ConfigError("camera elevation capped at +/-89 degrees")


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(cfg.to_text().encode("utf-8")).hexdigest()


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return RunConfig.from_text(fh.read())


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())


def write_manifest(path, mapping: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_kv(mapping))


def read_manifest(path) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_text(fh.read())


def dataclass_replace(obj, **changes):
    return dataclasses.replace(obj, **changes)
