"""End-to-end pipeline and the experiment commands.

One *cell* is one seed: the source video is sampled, encoded and inverted
once, then every variant the command asks for (alpha values, tau values,
schedule modes, baselines) is run from the same inverted latents. Cells are
independent and may run in a process pool; rows are always written in seed
order so the output does not depend on ``jobs``.
"""

from __future__ import annotations

import csv
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..ddim import GuidanceConfig, ddim_invert_loop, ddim_sample_loop
from ..denoisers import (
    AnalyticGaussianDenoiser,
    Denoiser,
    Role,
    TrainingConfig,
    load_denoiser,
    save_denoiser,
    train_denoiser,
)
from ..denoisers.trained import epsilon_mse
from ..fusion import FusionConfig, FusionMode, FusionTrace, fldm_edit
from ..metrics import MetricsReport, evaluate_video
from ..null_text import NullTextOptions, NullTextResult, null_text_invert
from ..schedule import NoiseSchedule, make_linear_schedule
from ..world import (
    FrozenEmbedder,
    LatentCodec,
    SyntheticVideoPrior,
    decode,
    encode,
    sample_video,
    standard_world,
    write_video_csv,
)
from .config import ExperimentConfig
from .stats import Interval, bootstrap_mean, bootstrap_paired_difference

logger = logging.getLogger(__name__)


class HarnessError(RuntimeError):
    """Runtime failure of a command (CLI exit code 2)."""


@dataclass
class Context:
    cfg: ExperimentConfig
    prior: SyntheticVideoPrior
    codec: LatentCodec
    embedder: FrozenEmbedder
    schedule: NoiseSchedule
    video: Denoiser
    image: Denoiser
    fingerprint: str


def build_world(cfg: ExperimentConfig):
    w = cfg.world
    prior, codec, embedder = standard_world(w.codec_seed, w.embedder_seed, w.mean_scale)
    if w.prior is not None:
        prior = SyntheticVideoPrior.from_dict(w.prior)
        codec = LatentCodec.random(prior.d, w.codec_seed)
        embedder = FrozenEmbedder.build(prior, seed=w.embedder_seed)
    return prior, codec, embedder


def training_set(cfg: ExperimentConfig, prior: SyntheticVideoPrior, codec: LatentCodec):
    """Latent training videos with labels cycling through the classes."""
    tr = cfg.denoisers.training
    rng = np.random.default_rng(np.random.SeedSequence([tr.data_seed, 17]))
    labels = [prior.labels[i % len(prior.labels)] for i in range(tr.n_videos)]
    X = np.stack([encode(codec, sample_video(prior, c, rng)) for c in labels])
    return X, labels


def _training_config(cfg: ExperimentConfig) -> TrainingConfig:
    tr = cfg.denoisers.training
    return TrainingConfig(
        steps=tr.steps, batch_size=tr.batch_size, lr=tr.lr, hidden=tr.hidden,
        cond_dim=tr.cond_dim, p_uncond=tr.p_uncond, seed=tr.seed,
    )


def train_role(cfg, prior, codec, schedule, role: Role, data=None):
    X, labels = data if data is not None else training_set(cfg, prior, codec)
    return train_denoiser(X, labels, schedule, _training_config(cfg), role)


def build_context(cfg: ExperimentConfig) -> Context:
    prior, codec, embedder = build_world(cfg)
    s = cfg.schedule
    schedule = make_linear_schedule(s.T, s.beta_start, s.beta_end)
    dens: dict[str, Denoiser] = {}
    data = None
    for role in ("video", "image"):
        kind = getattr(cfg.denoisers, role)
        if kind == "analytic":
            dens[role] = AnalyticGaussianDenoiser(prior, schedule, Role(role), codec)
        elif cfg.denoisers.weights_dir is not None:
            dens[role] = load_denoiser(Path(cfg.denoisers.weights_dir) / f"{role}_denoiser", schedule)
            if dens[role].role is not Role(role):
                raise HarnessError(f"{role}_denoiser weights hold a {dens[role].role.value}-role model")
        else:
            if data is None:
                data = training_set(cfg, prior, codec)
            logger.info("training %s-role denoiser", role)
            dens[role] = train_role(cfg, prior, codec, schedule, Role(role), data)
    return Context(cfg, prior, codec, embedder, schedule, dens["video"], dens["image"], cfg.fingerprint())


# -- per-seed preparation -------------------------------------------------------


@dataclass
class Prepared:
    seed: int
    video: np.ndarray  # clean source video, pixel space
    z0: np.ndarray
    zT_video: np.ndarray
    zT_image: np.ndarray
    guidance_video: GuidanceConfig
    guidance_image: GuidanceConfig
    null_text: dict[str, NullTextResult] = field(default_factory=dict)


def source_video(ctx: Context, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    return sample_video(ctx.prior, ctx.cfg.world.source, rng)


def _plain_guidance(ctx: Context, role: str) -> GuidanceConfig:
    g = ctx.cfg.branch_guidance(role)
    if g.image_scale is None:
        return GuidanceConfig(g.text_scale)
    return GuidanceConfig(g.text_scale, g.image_scale, g.image_cond or ctx.cfg.world.source)


def prepare(ctx: Context, seed: int) -> Prepared:
    cfg = ctx.cfg
    src = cfg.world.source
    x = source_video(ctx, seed)
    z0 = encode(ctx.codec, x)
    nt = cfg.inversion.null_text
    opts = NullTextOptions(inner_steps=nt.inner_steps, step_size=nt.step_size)
    inverted, guidance, results = {}, {}, {}
    roles = ("video",) if cfg.inversion.mode == "shared" else ("video", "image")
    for role in roles:
        den = getattr(ctx, role)
        plain = _plain_guidance(ctx, role)
        if cfg.null_text_for(role):
            res = null_text_invert(den, z0, src, GuidanceConfig(plain.text_scale), ctx.schedule, opts)
            inverted[role], guidance[role], results[role] = res.z_T, res.guidance(plain.text_scale), res
        else:
            inverted[role], _ = ddim_invert_loop(den, z0, src, ctx.schedule)
            guidance[role] = plain
    if cfg.inversion.mode == "shared":
        inverted["image"] = inverted["video"]
        guidance["image"] = _plain_guidance(ctx, "image")
    return Prepared(
        seed, x, z0, inverted["video"], inverted["image"], guidance["video"], guidance["image"], results
    )


# -- variants ----------------------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    method: str  # "fused", "video-only" or "image-only"
    fusion: FusionConfig | None = None
    key: tuple = ()


@dataclass
class CellResult:
    variant: Variant
    seed: int
    report: MetricsReport | None = None
    video: np.ndarray | None = None  # decoded output, kept only on request
    trace: FusionTrace | None = None
    error: str = ""


def run_variant(ctx: Context, prep: Prepared, v: Variant) -> tuple[np.ndarray, FusionTrace | None]:
    target = ctx.cfg.world.target
    if v.method == "fused":
        return fldm_edit(
            ctx.video, ctx.image, prep.zT_video, prep.zT_image, target,
            prep.guidance_video, prep.guidance_image, ctx.schedule, v.fusion,
        )
    if v.method == "video-only":
        z, _ = ddim_sample_loop(ctx.video, prep.zT_video, target, prep.guidance_video, ctx.schedule)
        return z, None
    if v.method == "image-only":
        z, _ = ddim_sample_loop(ctx.image, prep.zT_image, target, prep.guidance_image, ctx.schedule)
        return z, None
    raise HarnessError(f"unknown method {v.method!r}")


def run_cell(ctx: Context, seed: int, variants: list[Variant], keep: bool = False):
    """All variants of one seed. A failure marks every variant of the cell."""
    try:
        prep = prepare(ctx, seed)
    except Exception as exc:  # noqa: BLE001 - recorded as error rows
        logger.debug("cell %d failed:\n%s", seed, traceback.format_exc())
        msg = f"{type(exc).__name__}: {exc}"
        return None, [CellResult(v, seed, error=msg) for v in variants]
    out = []
    for v in variants:
        try:
            z, trace = run_variant(ctx, prep, v)
            video = decode(ctx.codec, z)
            rep = evaluate_video(ctx.embedder, video, ctx.cfg.world.target, seed, ctx.fingerprint)
            out.append(CellResult(v, seed, rep, video if keep else None, trace))
        except Exception as exc:  # noqa: BLE001
            out.append(CellResult(v, seed, error=f"{type(exc).__name__}: {exc}"))
    return (prep if keep else None), out


_WORKER_CTX: Context | None = None


def _init_worker(ctx: Context) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _worker(args):
    seed, variants = args
    _, results = run_cell(_WORKER_CTX, seed, variants)
    for r in results:
        r.video = None
    return results


def run_cells(ctx: Context, variants: list[Variant], jobs: int = 1) -> list[CellResult]:
    """Every (seed, variant) result, seed-major in config order."""
    seeds = list(ctx.cfg.seeds)
    if jobs <= 1 or len(seeds) == 1:
        chunks = [run_cell(ctx, s, variants)[1] for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(ctx,)) as pool:
            chunks = list(pool.map(_worker, [(s, variants) for s in seeds]))
    return [r for chunk in chunks for r in chunk]


# -- output helpers -------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
    return path


def _seed_list(cfg: ExperimentConfig) -> str:
    return ";".join(str(s) for s in cfg.seeds)


def _metric(results: list[CellResult], pick: Callable[[CellResult], bool], name: str) -> np.ndarray:
    return np.array([
        getattr(r.report, name) if r.report is not None else np.nan
        for r in results if pick(r)
    ])


def _boot(ctx: Context, x) -> Interval:
    b = ctx.cfg.bootstrap
    return bootstrap_mean(x, b.n_resamples, b.confidence, b.seed)


def _boot_diff(ctx: Context, a, b_) -> Interval:
    b = ctx.cfg.bootstrap
    return bootstrap_paired_difference(a, b_, b.n_resamples, b.confidence, b.seed)


SUMMARY_METRICS = [
    "n", "frame_consistency_mean", "frame_consistency_lo", "frame_consistency_hi",
    "textual_alignment_mean", "textual_alignment_lo", "textual_alignment_hi",
]
CONTRAST_HEADER = ["metric", "a", "b", "mean_diff", "lo", "hi", "n", "seeds", "config_fingerprint"]


def _summary(ctx: Context, results: list[CellResult], pick) -> list:
    fc = _boot(ctx, _metric(results, pick, "frame_consistency"))
    ta = _boot(ctx, _metric(results, pick, "textual_alignment"))
    return [fc.n, fc.mean, fc.lo, fc.hi, ta.mean, ta.lo, ta.hi]


def _contrast_rows(ctx: Context, results, a_name, a_pick, b_name, b_pick) -> list[list]:
    rows = []
    for metric in ("frame_consistency", "textual_alignment"):
        iv = _boot_diff(ctx, _metric(results, a_pick, metric), _metric(results, b_pick, metric))
        rows.append([metric, a_name, b_name, iv.mean, iv.lo, iv.hi, iv.n, _seed_list(ctx.cfg), ctx.fingerprint])
    return rows


@dataclass
class CommandResult:
    files: list[Path]
    n_errors: int
    results: list[CellResult]


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "error.json").unlink(missing_ok=True)  # left over from an earlier failed run
    resolved = dict(cfg.to_dict(), fingerprint=cfg.fingerprint())
    (out / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    return out


def _n_errors(results: list[CellResult]) -> int:
    return sum(1 for r in results if r.error)


def _fusion(cfg: ExperimentConfig, tau=None, alpha_tau=None, mode=None) -> FusionConfig:
    f = cfg.fusion
    return FusionConfig(
        cfg.schedule.T,
        f.tau if tau is None else tau,
        f.alpha_tau if alpha_tau is None else alpha_tau,
        FusionMode(f.mode if mode is None else mode),
    )


# -- commands -------------------------------------------------------------------------


def cmd_edit(cfg: ExperimentConfig, jobs: int = 1, ctx: Context | None = None) -> CommandResult:
    """Encode, invert, fuse, decode and score every seed; keeps all artifacts."""
    ctx = ctx or build_context(cfg)
    out = _prepare_out(cfg)
    variant = Variant("fused", _fusion(cfg))
    files, rows, results = [], [], []
    for seed in cfg.seeds:
        prep, (res,) = run_cell(ctx, seed, [variant], keep=True)
        results.append(res)
        if prep is not None:
            files.append(out / f"edit_seed{seed}_source.csv")
            write_video_csv(files[-1], prep.video)
            for role, nt in prep.null_text.items():
                nt.save(out / f"edit_seed{seed}_nulltext_{role}")
                files += [out / f"edit_seed{seed}_nulltext_{role}.json", out / f"edit_seed{seed}_nulltext_{role}.csv"]
        if res.report is not None:
            files.append(out / f"edit_seed{seed}_edited.csv")
            write_video_csv(files[-1], res.video)
            files.append(out / f"edit_seed{seed}_trace.csv")
            res.trace.to_csv(files[-1])
            rep = res.report
            rows.append([seed, rep.frame_consistency, rep.textual_alignment, rep.n_frames,
                         res.trace.n_fused, ctx.fingerprint, ""])
        else:
            rows.append([seed, None, None, None, None, ctx.fingerprint, res.error])
    files.append(write_csv(
        out / "edit_metrics.csv",
        ["seed", "frame_consistency", "textual_alignment", "n_frames", "n_fused", "config_fingerprint", "error"],
        rows,
    ))
    return CommandResult(files, _n_errors(results), results)


def cmd_sweep_alpha(cfg: ExperimentConfig, jobs: int = 1, ctx: Context | None = None) -> CommandResult:
    ctx = ctx or build_context(cfg)
    out = _prepare_out(cfg)
    alphas = list(cfg.sweep.alphas)
    variants = [Variant("fused", _fusion(cfg, alpha_tau=a), key=(a,)) for a in alphas]
    results = run_cells(ctx, variants, jobs)
    fp = ctx.fingerprint
    cells = write_csv(
        out / "sweep_alpha_cells.csv",
        ["alpha", "seed", "frame_consistency", "textual_alignment", "n_fused", "config_fingerprint", "error"],
        (
            [r.variant.key[0], r.seed,
             r.report.frame_consistency if r.report else None,
             r.report.textual_alignment if r.report else None,
             r.trace.n_fused if r.trace else None, fp, r.error]
            for r in results
        ),
    )
    summary = write_csv(
        out / "sweep_alpha.csv",
        ["alpha"] + SUMMARY_METRICS + ["seeds", "config_fingerprint"],
        (
            [a] + _summary(ctx, results, lambda r, a=a: r.variant.key == (a,)) + [_seed_list(cfg), fp]
            for a in alphas
        ),
    )
    hi, lo = max(alphas), min(alphas)
    contrast = write_csv(
        out / "sweep_alpha_contrast.csv", CONTRAST_HEADER,
        _contrast_rows(ctx, results,
                       f"alpha={hi!r}", lambda r: r.variant.key == (hi,),
                       f"alpha={lo!r}", lambda r: r.variant.key == (lo,)),
    )
    return CommandResult([cells, summary, contrast], _n_errors(results), results)


def cmd_sweep_tau(cfg: ExperimentConfig, jobs: int = 1, ctx: Context | None = None) -> CommandResult:
    ctx = ctx or build_context(cfg)
    out = _prepare_out(cfg)
    taus = list(cfg.sweep.taus)
    variants = [Variant("fused", _fusion(cfg, tau=t), key=(t,)) for t in taus]
    variants.append(Variant("video-only", key=("none",)))
    results = run_cells(ctx, variants, jobs)
    fp = ctx.fingerprint

    def div(r):
        return r.trace.first_fused_divergence() if r.trace else None

    cells = write_csv(
        out / "sweep_tau_cells.csv",
        ["method", "tau", "seed", "frame_consistency", "textual_alignment", "n_fused",
         "first_fused_divergence", "config_fingerprint", "error"],
        (
            ["no-fusion" if r.variant.method == "video-only" else "fused",
             "" if r.variant.key == ("none",) else r.variant.key[0], r.seed,
             r.report.frame_consistency if r.report else None,
             r.report.textual_alignment if r.report else None,
             r.trace.n_fused if r.trace else (0 if r.report else None), div(r), fp, r.error]
            for r in results
        ),
    )
    rows = []
    for t in taus:
        pick = lambda r, t=t: r.variant.key == (t,)  # noqa: E731
        divs = [div(r) for r in results if pick(r) and div(r) is not None]
        rows.append(["fused", t] + _summary(ctx, results, pick)
                    + [cfg.schedule.T - t, float(np.mean(divs)) if divs else None, _seed_list(cfg), fp])
    rows.append(["no-fusion", ""] + _summary(ctx, results, lambda r: r.variant.key == ("none",))
                + [0, None, _seed_list(cfg), fp])
    summary = write_csv(
        out / "sweep_tau.csv",
        ["method", "tau"] + SUMMARY_METRICS + ["n_fused", "first_fused_divergence_mean", "seeds", "config_fingerprint"],
        rows,
    )
    return CommandResult([cells, summary], _n_errors(results), results)


def final_image_weight(fusion: FusionConfig) -> float:
    """Weight of the image branch at the last fused step."""
    if fusion.n_fused == 0:
        return 0.0
    if fusion.mode is FusionMode.FIXED:
        return 1.0 - fusion.alpha_tau
    return fusion.alpha_increment()


def cmd_ablate_schedule(cfg: ExperimentConfig, jobs: int = 1, ctx: Context | None = None) -> CommandResult:
    ctx = ctx or build_context(cfg)
    out = _prepare_out(cfg)
    modes = [FusionMode.FIXED, FusionMode.LINEAR]
    variants = [Variant("fused", _fusion(cfg, mode=m), key=(m.value,)) for m in modes]
    results = run_cells(ctx, variants, jobs)
    fp = ctx.fingerprint
    cells = write_csv(
        out / "ablate_schedule_cells.csv",
        ["mode", "seed", "frame_consistency", "textual_alignment", "final_image_weight",
         "config_fingerprint", "error"],
        (
            [r.variant.key[0], r.seed,
             r.report.frame_consistency if r.report else None,
             r.report.textual_alignment if r.report else None,
             final_image_weight(r.variant.fusion), fp, r.error]
            for r in results
        ),
    )
    summary = write_csv(
        out / "ablate_schedule.csv",
        ["mode"] + SUMMARY_METRICS + ["final_image_weight", "seeds", "config_fingerprint"],
        (
            [v.key[0]] + _summary(ctx, results, lambda r, v=v: r.variant.key == v.key)
            + [final_image_weight(v.fusion), _seed_list(cfg), fp]
            for v in variants
        ),
    )
    contrast = write_csv(
        out / "ablate_schedule_contrast.csv", CONTRAST_HEADER,
        _contrast_rows(ctx, results,
                       "linear", lambda r: r.variant.key == ("linear",),
                       "fixed", lambda r: r.variant.key == ("fixed",)),
    )
    return CommandResult([cells, summary, contrast], _n_errors(results), results)


BASELINE_METHODS = ("video-only", "image-only", "fused")


def cmd_baselines(cfg: ExperimentConfig, jobs: int = 1, ctx: Context | None = None) -> CommandResult:
    ctx = ctx or build_context(cfg)
    out = _prepare_out(cfg)
    variants = [Variant(m, _fusion(cfg) if m == "fused" else None, key=(m,)) for m in BASELINE_METHODS]
    results = run_cells(ctx, variants, jobs)
    fp = ctx.fingerprint
    rows = write_csv(
        out / "baselines.csv",
        ["method", "seed", "frame_consistency", "textual_alignment", "config_fingerprint", "error"],
        (
            [r.variant.method, r.seed,
             r.report.frame_consistency if r.report else None,
             r.report.textual_alignment if r.report else None, fp, r.error]
            for r in results
        ),
    )
    summary = write_csv(
        out / "baselines_summary.csv",
        ["method"] + SUMMARY_METRICS + ["seeds", "config_fingerprint"],
        (
            [m] + _summary(ctx, results, lambda r, m=m: r.variant.method == m) + [_seed_list(cfg), fp]
            for m in BASELINE_METHODS
        ),
    )
    contrast = write_csv(
        out / "baselines_contrast.csv", CONTRAST_HEADER,
        _contrast_rows(ctx, results,
                       "video-only", lambda r: r.variant.method == "video-only",
                       "image-only", lambda r: r.variant.method == "image-only"),
    )
    return CommandResult([rows, summary, contrast], _n_errors(results), results)


def cmd_train(cfg: ExperimentConfig, jobs: int = 1) -> CommandResult:
    """Train the roles marked ``trained`` (both when none is), save weights,
    and compare held-out noise-prediction MSE with the analytic oracle."""
    prior, codec, _ = build_world(cfg)
    s = cfg.schedule
    schedule = make_linear_schedule(s.T, s.beta_start, s.beta_end)
    out = _prepare_out(cfg)
    roles = [r for r in ("image", "video") if getattr(cfg.denoisers, r) == "trained"] or ["image", "video"]
    data = training_set(cfg, prior, codec)
    tr = cfg.denoisers.training
    hrng = np.random.default_rng(np.random.SeedSequence([tr.data_seed, 23]))
    n_held = 256
    h_labels = [prior.labels[i % len(prior.labels)] for i in range(n_held)]
    H = np.stack([encode(codec, sample_video(prior, c, hrng)) for c in h_labels])
    h_t = hrng.integers(1, s.T + 1, size=n_held)
    h_eps = hrng.standard_normal(H.shape)
    files, log_rows, summary = [], [], []
    for role in roles:
        model = train_role(cfg, prior, codec, schedule, Role(role), data)
        files += list(save_denoiser(model, out / f"{role}_denoiser"))
        losses = model.meta["losses"]
        log_rows += [[role, i, float(v)] for i, v in enumerate(losses)]
        oracle = AnalyticGaussianDenoiser(prior, schedule, Role(role), codec)
        mse = epsilon_mse(model, H, h_labels, h_t, h_eps, schedule)
        ref = epsilon_mse(oracle, H, h_labels, h_t, h_eps, schedule)
        tail = float(np.mean(losses[-100:])) if len(losses) else None
        summary.append([role, model.n_params, tr.steps, tail, mse, ref, mse / ref, tr.seed, cfg.fingerprint()])
    files.append(write_csv(out / "train_log.csv", ["role", "step", "loss"], log_rows))
    files.append(write_csv(
        out / "train_summary.csv",
        ["role", "n_params", "steps", "final_loss_smoothed", "heldout_mse", "analytic_mse",
         "mse_ratio", "seed", "config_fingerprint"],
        summary,
    ))
    return CommandResult(files, 0, [])


COMMANDS: dict[str, Callable[..., CommandResult]] = {
    "edit": cmd_edit,
    "sweep-alpha": cmd_sweep_alpha,
    "sweep-tau": cmd_sweep_tau,
    "ablate-schedule": cmd_ablate_schedule,
    "baselines": cmd_baselines,
    "train": cmd_train,
}
