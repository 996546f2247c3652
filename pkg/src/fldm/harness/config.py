"""Experiment configuration: JSON in, validated dataclasses out.

Every field has a default, so ``{}`` is a valid config. Unknown keys are
rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

from ..fusion import FusionMode


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 1)."""


DENOISER_KINDS = ("analytic", "trained")
INVERSION_MODES = ("shared", "separate")
NULL_TEXT_ROLES = ("video", "image", "both")


@dataclass(frozen=True)
class WorldSettings:
    codec_seed: int = 7
    embedder_seed: int = 11
    mean_scale: float = 2.0
    # optional explicit prior (SyntheticVideoPrior.to_dict layout); replaces the standard one
    prior: dict | None = None
    source: str = "source"
    target: str = "target"


@dataclass(frozen=True)
class ScheduleSettings:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class TrainingSettings:
    steps: int = 3000
    batch_size: int = 128
    lr: float = 0.05
    hidden: int = 64
    cond_dim: int = 8
    p_uncond: float = 0.15
    seed: int = 0
    n_videos: int = 1000
    data_seed: int = 0


@dataclass(frozen=True)
class DenoiserSettings:
    image: str = "analytic"
    video: str = "analytic"
    # per-role step counts; both must equal schedule.T when given
    image_T: int | None = None
    video_T: int | None = None
    training: TrainingSettings = field(default_factory=TrainingSettings)
    weights_dir: str | None = None


@dataclass(frozen=True)
class BranchGuidance:
    text_scale: float = 12.5
    image_scale: float | None = None
    image_cond: str | None = None


@dataclass(frozen=True)
class GuidanceSettings:
    video: BranchGuidance = field(default_factory=BranchGuidance)
    image: BranchGuidance = field(default_factory=BranchGuidance)
    # "dual": image branch uses text 12.5 / image 1.5 with the source class as image condition
    preset: str | None = None


@dataclass(frozen=True)
class FusionSettings:
    tau: int = 25
    alpha_tau: float = 0.5
    mode: str = "linear"


@dataclass(frozen=True)
class NullTextSettings:
    enabled: str = "auto"  # auto: on when the branch denoiser is trained
    roles: str = "both"
    inner_steps: int = 10
    step_size: float = 3e-2


@dataclass(frozen=True)
class InversionSettings:
    mode: str = "shared"
    null_text: NullTextSettings = field(default_factory=NullTextSettings)


@dataclass(frozen=True)
class SweepSettings:
    alphas: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    taus: tuple[int, ...] = (0, 10, 25, 40, 50)


@dataclass(frozen=True)
class BootstrapSettings:
    n_resamples: int = 2000
    confidence: float = 0.95
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldSettings = field(default_factory=WorldSettings)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    denoisers: DenoiserSettings = field(default_factory=DenoiserSettings)
    guidance: GuidanceSettings = field(default_factory=GuidanceSettings)
    fusion: FusionSettings = field(default_factory=FusionSettings)
    inversion: InversionSettings = field(default_factory=InversionSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    bootstrap: BootstrapSettings = field(default_factory=BootstrapSettings)
    seeds: tuple[int, ...] = tuple(range(20))
    output_dir: str = "out"

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def fingerprint(self) -> str:
        """Stable hash of everything that can change results.

        ``output_dir`` is excluded: the same experiment written elsewhere
        keeps its fingerprint.
        """
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return replace(self, seeds=tuple(int(s) for s in seeds))

    def with_output_dir(self, out: str | Path) -> "ExperimentConfig":
        return replace(self, output_dir=str(out))

    def branch_guidance(self, role: str) -> BranchGuidance:
        g = getattr(self.guidance, role)
        if self.guidance.preset == "dual" and role == "image":
            return BranchGuidance(12.5, 1.5, g.image_cond or self.world.source)
        return g

    def null_text_for(self, role: str) -> bool:
        nt = self.inversion.null_text
        kind = getattr(self.denoisers, role)
        if nt.enabled == "off" or kind != "trained":
            return False
        if role == "image" and self.inversion.mode == "shared":
            return False  # the image branch starts from the video inversion
        return nt.roles in (role, "both")


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    extra = sorted(set(data) - set(known))
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {extra}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        elif name in ("alphas", "taus", "seeds"):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{name}: expected a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    (ExperimentConfig, "world"): WorldSettings,
    (ExperimentConfig, "schedule"): ScheduleSettings,
    (ExperimentConfig, "denoisers"): DenoiserSettings,
    (ExperimentConfig, "guidance"): GuidanceSettings,
    (ExperimentConfig, "fusion"): FusionSettings,
    (ExperimentConfig, "inversion"): InversionSettings,
    (ExperimentConfig, "sweep"): SweepSettings,
    (ExperimentConfig, "bootstrap"): BootstrapSettings,
    (DenoiserSettings, "training"): TrainingSettings,
    (GuidanceSettings, "video"): BranchGuidance,
    (GuidanceSettings, "image"): BranchGuidance,
    (InversionSettings, "null_text"): NullTextSettings,
}


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check cross-field constraints; returns ``cfg`` for chaining."""
    from ..schedule import ScheduleError, make_linear_schedule
    from ..world import SyntheticVideoPrior, WorldError

    s = cfg.schedule
    if not _is_int(s.T):
        raise ConfigError("schedule.T must be an integer")
    try:
        make_linear_schedule(s.T, s.beta_start, s.beta_end)
    except (ScheduleError, TypeError) as exc:
        raise ConfigError(f"schedule: {exc}") from None

    w = cfg.world
    if w.prior is not None:
        try:
            prior = SyntheticVideoPrior.from_dict(w.prior)
        except (WorldError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"world.prior: {exc}") from None
        labels = prior.labels
    else:
        labels = ["source", "target"]
        if not _is_num(w.mean_scale) or w.mean_scale <= 0:
            raise ConfigError("world.mean_scale must be positive")
    for key in ("source", "target"):
        if getattr(w, key) not in labels:
            raise ConfigError(f"world.{key}: unknown class {getattr(w, key)!r} (known: {labels})")
    if w.source == w.target:
        raise ConfigError("world.source and world.target must differ")
    for key in ("codec_seed", "embedder_seed"):
        if not _is_int(getattr(w, key)) or getattr(w, key) < 0:
            raise ConfigError(f"world.{key} must be a non-negative integer")

    dn = cfg.denoisers
    for role in ("image", "video"):
        if getattr(dn, role) not in DENOISER_KINDS:
            raise ConfigError(f"denoisers.{role} must be one of {DENOISER_KINDS}")
        rT = getattr(dn, f"{role}_T")
        if rT is not None and rT != s.T:
            raise ConfigError(
                f"denoisers.{role}_T={rT} differs from schedule.T={s.T}: "
                "fused denoisers must share one noise schedule"
            )
    tr = dn.training
    if not (_is_int(tr.steps) and tr.steps >= 0 and _is_int(tr.batch_size) and tr.batch_size > 0):
        raise ConfigError("denoisers.training: steps >= 0 and batch_size > 0 required")
    if not (_is_num(tr.lr) and tr.lr > 0 and 0 <= tr.p_uncond < 1 and tr.n_videos > 0):
        raise ConfigError("denoisers.training: lr > 0, p_uncond in [0, 1), n_videos > 0 required")

    if cfg.guidance.preset not in (None, "dual"):
        raise ConfigError("guidance.preset must be null or 'dual'")
    for role in ("image", "video"):
        g = cfg.branch_guidance(role)
        if not _is_num(g.text_scale) or g.text_scale < 0:
            raise ConfigError(f"guidance.{role}.text_scale must be a number >= 0")
        if g.image_scale is not None:
            if not _is_num(g.image_scale) or g.image_scale < 0:
                raise ConfigError(f"guidance.{role}.image_scale must be a number >= 0")
            if getattr(dn, role) == "trained":
                raise ConfigError(f"guidance.{role}: dual guidance needs an analytic denoiser")
            cond = g.image_cond or w.source
            if cond not in labels:
                raise ConfigError(f"guidance.{role}.image_cond: unknown class {cond!r}")

    fu = cfg.fusion
    if not _is_int(fu.tau) or not 0 <= fu.tau <= s.T:
        raise ConfigError(f"fusion.tau must be an integer in [0, {s.T}]")
    if not _is_num(fu.alpha_tau) or not 0 <= fu.alpha_tau <= 1:
        raise ConfigError("fusion.alpha_tau must lie in [0, 1]")
    if fu.mode not in [m.value for m in FusionMode]:
        raise ConfigError(f"fusion.mode must be one of {[m.value for m in FusionMode]}")

    inv = cfg.inversion
    if inv.mode not in INVERSION_MODES:
        raise ConfigError(f"inversion.mode must be one of {INVERSION_MODES}")
    nt = inv.null_text
    if nt.enabled not in ("auto", "off"):
        raise ConfigError("inversion.null_text.enabled must be 'auto' or 'off'")
    if nt.roles not in NULL_TEXT_ROLES:
        raise ConfigError(f"inversion.null_text.roles must be one of {NULL_TEXT_ROLES}")
    if not (_is_int(nt.inner_steps) and nt.inner_steps >= 0 and _is_num(nt.step_size) and nt.step_size > 0):
        raise ConfigError("inversion.null_text: inner_steps >= 0 and step_size > 0 required")

    sw = cfg.sweep
    if not sw.alphas or not all(_is_num(a) and 0 <= a <= 1 for a in sw.alphas):
        raise ConfigError("sweep.alphas must be a non-empty list of values in [0, 1]")
    if not sw.taus or not all(_is_int(t) and 0 <= t <= s.T for t in sw.taus):
        raise ConfigError(f"sweep.taus must be a non-empty list of integers in [0, {s.T}]")

    b = cfg.bootstrap
    if not (_is_int(b.n_resamples) and b.n_resamples > 0 and 0 < b.confidence < 1):
        raise ConfigError("bootstrap: n_resamples > 0 and confidence in (0, 1) required")

    if not cfg.seeds or not all(_is_int(x) and x >= 0 for x in cfg.seeds):
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds must be distinct")
    return cfg


def config_from_dict(data: dict) -> ExperimentConfig:
    try:
        cfg = _build(ExperimentConfig, data, "config")
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return validate(cfg)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(data)


def standard_config() -> ExperimentConfig:
    """The pinned standard-world experiment shipped with the package."""
    text = resources.files("fldm.harness").joinpath("standard_world.json").read_text()
    return config_from_dict(json.loads(text))


def parse_seeds(spec: str) -> tuple[int, ...]:
    """``"0-19"``, ``"1,5,9"`` or a mix such as ``"0-4,10"``."""
    out: list[int] = []
    try:
        for part in spec.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                lo, hi = part.split("-", 1)
                lo_i, hi_i = int(lo), int(hi)
                if hi_i < lo_i:
                    raise ConfigError(f"empty seed range {part!r}")
                out.extend(range(lo_i, hi_i + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot parse seeds {spec!r}") from None
    if not out:
        raise ConfigError("no seeds given")
    return tuple(out)
