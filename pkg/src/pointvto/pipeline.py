"""Pseudo-pair construction, staged training, hard-pair mining and windowed inference."""
from __future__ import annotations

import configparser
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .diffusion import (NoiseSchedule, ddim_step, forward_diffuse_batch, initial_noise, ldm_loss,
                        min_snr_weights, sampling_timesteps)
from .metrics import ssim
from .model import ConditioningBundle, Denoiser, DenoiserConfig, set_trainable
from .numerics import ParamGroup
from .points import (MaskPyramid, PointAlignment, SoftAlignmentMask, align_from_oracle,
                     build_pyramid, build_soft_masks, perturb_alignment)
from .scene import SceneTruth, garment_image

log = logging.getLogger(__name__)

STAGE_GROUPS = {
    1: (ParamGroup.POSE_ENCODER, ParamGroup.GARMENT_ENCODER, ParamGroup.DENOISER),
    2: (ParamGroup.TEMPORAL,),
    3: (ParamGroup.PSA, ParamGroup.PTA),
}


@dataclass
class TryOnSample:
    """One pseudo/ground-truth video pair; all images are float arrays in [0, 1]."""

    x_ps: np.ndarray  # (T, H, W, 3)
    x_gt: np.ndarray  # (T, H, W, 3)
    g: np.ndarray  # (Hg, Wg, 3), garment mask applied
    m_g: np.ndarray  # (Hg, Wg)
    pose: np.ndarray  # (T, H, W)
    a: np.ndarray  # (T, H, W, 3) agnostic video
    m: np.ndarray  # (T, H, W) agnostic mask
    truth: SceneTruth
    alignment: PointAlignment | None = None
    pseudo_garment: int = -1

    @property
    def num_frames(self) -> int:
        return self.x_gt.shape[0]

    def tryon_mask(self, frame: int) -> np.ndarray:
        return self.truth.visible_mask(frame)

    def region(self) -> np.ndarray:
        """Union of the patch footprints, (T, H, W)."""
        return np.stack([self.truth.patch_mask(t) for t in range(self.num_frames)])


def make_sample(truth: SceneTruth, pseudo_gid: int, corruption: float = 0.0,
                seed: int = 0, K: int = 16) -> TryOnSample:
    x_gt = truth.render(truth.garment_a)
    x_ps = truth.render(pseudo_gid)
    if corruption > 0:
        rng = np.random.default_rng(seed)
        region = np.stack([truth.patch_mask(t) for t in range(truth.num_frames)])
        noise = rng.normal(0.0, corruption, size=x_ps.shape) * region[..., None]
        x_ps = np.clip(x_ps + noise, 0.0, 1.0)
    g, m_g = garment_image(truth.garment_a)
    m = truth.agnostic_mask()
    a = np.where(m[..., None], 0.5, x_gt)
    align = None
    frames = truth.visible_frames()
    if frames:
        rng = np.random.default_rng(seed + 1)
        anchor = int(rng.choice(frames))
        align = align_from_oracle(truth, truth.visible_mask(anchor), anchor, K, K,
                                  int(rng.integers(2**31)))
    return TryOnSample(x_ps, x_gt, g, m_g, truth.pose_map(), a, m, truth, align, int(pseudo_gid))


def build_pseudo_pairs(scenes: Sequence[SceneTruth], corruption: float = 0.0, seed: int = 0,
                       garments_per_scene: int = 1, K: int = 16) -> list[TryOnSample]:
    """Pair each ground-truth render with counterfactual renders in other garments.

    The exact counterfactual renderer stands in for a pre-trained
    mask-based try-on model; ``corruption`` adds Gaussian artefacts inside
    the try-on region.
    """
    out = []
    for i, truth in enumerate(scenes):
        gids = [truth.garment_b] + list(truth.extra_garments)
        if len(gids) < garments_per_scene:
            raise ValueError(f"scene {truth.seed} carries only {len(gids)} pseudo garments")
        for j, gid in enumerate(gids[:garments_per_scene]):
            out.append(make_sample(truth, gid, corruption, seed + 1000 * i + j, K))
    return out


# -- batching ---------------------------------------------------------------

def _signed(x: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(x * 2.0 - 1.0, dtype=torch.float32)


def _video(x: np.ndarray) -> torch.Tensor:  # (T, H, W, 3) -> (T, 3, H, W)
    return _signed(x).permute(0, 3, 1, 2)


def sample_alignment(sample: TryOnSample, frames: Sequence[int], K: int, M: int,
                     rng: np.random.Generator) -> PointAlignment:
    """Fresh oracle alignment for a clip: random visible anchor, M points."""
    visible = [f for f in frames if sample.truth.visible_mask(f).any()]
    if not visible:
        return PointAlignment.empty(len(frames), K)
    anchor = int(rng.choice(visible))
    full = align_from_oracle(sample.truth, sample.truth.visible_mask(anchor), anchor, M, K,
                             int(rng.integers(2**31)))
    idx = list(frames)
    return PointAlignment(full.frame_points[idx], full.garment_points, full.valid[idx], anchor=anchor)


def stack_pyramids(aligns: Sequence[PointAlignment], frame_hw, garment_hw, factors) -> MaskPyramid:
    pyrs = [build_pyramid(build_soft_masks(a, frame_hw, garment_hw, dtype=torch.float32), factors)
            for a in aligns]
    return MaskPyramid({f: SoftAlignmentMask(torch.stack([p[f].person for p in pyrs]),
                                             torch.stack([p[f].garment for p in pyrs]))
                        for f in factors})


def make_batch(samples: Sequence[TryOnSample], frames: Sequence[Sequence[int]],
               mask_based: bool = False):
    """Ground-truth latents and conditioning for clips ``frames[i]`` of ``samples[i]``."""
    z0 = torch.stack([_video(s.x_gt[list(f)]) for s, f in zip(samples, frames)])
    if mask_based:
        cond_frames = torch.stack([_video(s.a[list(f)]) for s, f in zip(samples, frames)])
        mc = torch.stack([torch.as_tensor(s.m[list(f)], dtype=torch.float32)[:, None]
                          for s, f in zip(samples, frames)])
    else:
        cond_frames = torch.stack([_video(s.x_ps[list(f)]) for s, f in zip(samples, frames)])
        mc = None
    pose = torch.stack([torch.as_tensor(s.pose[list(f)], dtype=torch.float32)[:, None]
                        for s, f in zip(samples, frames)])
    garment = torch.stack([_signed(s.g).permute(2, 0, 1) * torch.as_tensor(s.m_g, dtype=torch.float32)
                           for s in samples])
    return z0, ConditioningBundle(cond_frames, pose, garment, mc)


# -- configuration ----------------------------------------------------------

@dataclass
class StageConfig:
    stage: int
    video_proportion: float
    iterations: int
    paper_iterations: int
    lr: float = 1e-3
    paper_lr: float = 5e-5
    image_batch: int = 8
    video_batch: int = 1
    paper_image_batch: int = 128
    paper_video_batch: int = 8
    frames_per_clip: int = 8
    paper_frames_per_clip: int = 16
    agnostic_ratio: float = 0.2
    hard_threshold: float = 0.75
    min_points: int = 1
    min_snr_gamma: float = 5.0  # 0 disables the weighting
    train_error_rate: float = 0.0  # stage-3 alignments get U(0, this) of their pairs perturbed

    @property
    def trainable_groups(self) -> tuple[ParamGroup, ...]:
        return STAGE_GROUPS[self.stage]

    @property
    def use_pet(self) -> bool:
        return self.stage == 3


def default_stage(stage: int) -> StageConfig:
    # iteration counts and the stage-3 rate are sized for a CPU smoke run at 32x32
    if stage == 1:
        return StageConfig(1, 0.3, 1000, 40000)
    if stage == 2:
        return StageConfig(2, 0.9, 500, 40000)
    if stage == 3:
        return StageConfig(3, 0.5, 3000, 20000, lr=1e-2, train_error_rate=0.5)
    raise ValueError(f"unknown stage {stage}")


@dataclass
class RunConfig:
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    sample_steps: int = 10
    mine_timestep: int = 25
    seed: int = 0
    stages: dict = field(default_factory=lambda: {s: default_stage(s) for s in (1, 2, 3)})

    def noise_schedule(self) -> NoiseSchedule:
        return self.model.noise_schedule()


_MODEL_KEYS = {"channels": int, "frames": int, "K": int, "pet_levels": "bools",
               "self_attn_levels": "bools", "pta_garment_token": bool, "seed": int,
               "num_steps": int, "schedule": str, "prediction": str}
_RUN_KEYS = {"sample_steps": int, "mine_timestep": int, "seed": int}


class ConfigError(ValueError):
    pass


def _convert(kind, raw: str, key: str):
    try:
        if kind == "bools":
            return tuple(_convert(bool, v.strip(), key) for v in raw.split(","))
        if kind is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str) -> RunConfig:
    """Read ``key = value`` sections [run], [model], [stage1..3]; unknown keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    cp.read_string(text)
    cfg = RunConfig()
    stage_fields = {f.name: f.type for f in dataclasses.fields(StageConfig) if f.name != "stage"}
    for section in cp.sections():
        items = cp[section]
        if section == "run":
            for k, v in items.items():
                if k not in _RUN_KEYS:
                    raise ConfigError(f"unknown key [{section}] {k}")
                setattr(cfg, k, _convert(_RUN_KEYS[k], v, k))
        elif section == "model":
            for k, v in items.items():
                if k not in _MODEL_KEYS:
                    raise ConfigError(f"unknown key [{section}] {k}")
                setattr(cfg.model, k, _convert(_MODEL_KEYS[k], v, k))
        elif section in ("stage1", "stage2", "stage3"):
            st = cfg.stages[int(section[-1])]
            for k, v in items.items():
                if k not in stage_fields:
                    raise ConfigError(f"unknown key [{section}] {k}")
                kind = {"int": int, "float": float}[stage_fields[k]]
                setattr(st, k, _convert(kind, v, k))
        else:
            raise ConfigError(f"unknown section [{section}]")
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = ["[run]"]
    lines += [f"{k} = {getattr(cfg, k)}" for k in _RUN_KEYS]
    lines += ["", "[model]"]
    for k, kind in _MODEL_KEYS.items():
        v = getattr(cfg.model, k)
        lines.append(f"{k} = {','.join(str(b) for b in v) if kind == 'bools' else v}")
    for s in (1, 2, 3):
        lines += ["", f"[stage{s}]"]
        st = cfg.stages[s]
        lines += [f"{f.name} = {getattr(st, f.name)}" for f in dataclasses.fields(StageConfig)
                  if f.name != "stage"]
    return "\n".join(lines) + "\n"


# -- training ---------------------------------------------------------------

@dataclass
class TrainState:
    stage: int
    losses: list
    video_iterations: int
    iterations: int


class TrainingError(RuntimeError):
    pass


def draw_batch(cfg: StageConfig, data: Sequence[TryOnSample], rng: np.random.Generator):
    """One iteration's data form and members: (is_video, mask_based, sample indices, frame lists)."""
    video = bool(rng.random() < cfg.video_proportion)
    mask_based = bool(rng.random() < cfg.agnostic_ratio)
    if video:
        picks = rng.integers(len(data), size=cfg.video_batch)
        clips = []
        for p in picks:
            T = data[p].num_frames
            L = min(cfg.frames_per_clip, T)
            s0 = int(rng.integers(T - L + 1))
            clips.append(list(range(s0, s0 + L)))
    else:
        picks = rng.integers(len(data), size=cfg.image_batch)
        clips = [[int(rng.integers(data[p].num_frames))] for p in picks]
    return video, mask_based, picks, clips


def train_stage(cfg: StageConfig, data: Sequence[TryOnSample], model: Denoiser,
                schedule: NoiseSchedule, seed: int = 0,
                progress: Callable[[int, float], None] | None = None) -> TrainState:
    """Optimize only the stage's parameter groups with the noise-prediction loss.

    Each iteration draws either a batch of single frames or a batch of
    clips, with probability ``video_proportion`` for clips.
    """
    if not data:
        raise TrainingError("no training samples")
    if schedule != model.schedule:
        raise TrainingError("training schedule differs from the model's own schedule")
    rng = np.random.default_rng(seed)
    params = set_trainable(model, cfg.trainable_groups)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    K = model.cfg.K
    factors = model.cfg.level_factors
    losses, n_video = [], 0
    model.train()
    for it in range(cfg.iterations):
        video, mask_based, picks, clips = draw_batch(cfg, data, rng)
        n_video += video
        samples = [data[p] for p in picks]
        z0, cond = make_batch(samples, clips, mask_based)
        masks = None
        if cfg.use_pet:
            aligns = [sample_alignment(s, c, K, int(rng.integers(cfg.min_points, K + 1)), rng)
                      for s, c in zip(samples, clips)]
            if cfg.train_error_rate > 0:
                aligns = [perturb_alignment(a, float(rng.uniform(0, cfg.train_error_rate)),
                                            int(rng.integers(2**31)), model.cfg.frame_hw,
                                            model.cfg.garment_hw) for a in aligns]
            masks = stack_pyramids(aligns, model.cfg.frame_hw, model.cfg.garment_hw, factors)
        t = torch.as_tensor(rng.integers(1, schedule.num_steps + 1, size=len(samples)))
        eps = torch.as_tensor(rng.standard_normal(z0.shape), dtype=torch.float32)
        z_t = forward_diffuse_batch(z0, t, eps, schedule)
        pred = model(z_t, t, cond, masks, use_pet=cfg.use_pet)
        w = min_snr_weights(t, schedule, cfg.min_snr_gamma) if cfg.min_snr_gamma > 0 else None
        loss = ldm_loss(pred, eps, w)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if progress is not None:
            progress(it, losses[-1])
    model.eval()
    set_trainable(model, [g for g in ParamGroup])
    return TrainState(cfg.stage, losses, n_video, cfg.iterations)


# -- inference --------------------------------------------------------------

def _window_offsets(length: int, window: int, stride: int) -> list[int]:
    if not 1 <= stride <= window <= length:
        raise ValueError(f"need 1 <= stride <= window <= length, got {stride}, {window}, {length}")
    offs = list(range(0, length - window + 1, stride))
    if offs[-1] + window < length:
        offs.append(length - window)
    return offs


def window_plan(length: int, window: int, stride: int) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Window spans and their (n_windows, length) blend weights.

    Each window contributes a triangular ramp; weights are normalized so
    they sum to one per frame.
    """
    spans = [(o, o + window) for o in _window_offsets(length, window, stride)]
    ramp = np.minimum(np.arange(1, window + 1), np.arange(window, 0, -1)).astype(np.float64)
    w = np.zeros((len(spans), length))
    for i, (a, b) in enumerate(spans):
        w[i, a:b] = ramp
    return spans, w / w.sum(axis=0, keepdims=True)


@torch.no_grad()
def sliding_window_infer(model: Denoiser, cond: ConditioningBundle, window: int, stride: int,
                         schedule: NoiseSchedule, seed: int, steps: int | None = None,
                         masks_for: Callable[[int, int], MaskPyramid | None] | None = None,
                         use_pet: bool = True) -> torch.Tensor:
    """DDIM over a long clip where every step blends windowed noise predictions."""
    B, L = cond.frames.shape[:2]
    H, W = cond.frames.shape[-2:]
    spans, weights = window_plan(L, window, stride)
    wt = torch.as_tensor(weights, dtype=torch.float32)
    z = initial_noise((B, L, 3, H, W), seed)
    ts = sampling_timesteps(schedule, steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps = torch.zeros_like(z)
        for k, (a, b) in enumerate(spans):
            masks = masks_for(a, b) if masks_for is not None else None
            e = model(z[:, a:b], t, cond.frames_slice(a, b), masks, use_pet=use_pet)
            eps[:, a:b] += wt[k, a:b].reshape(1, -1, 1, 1, 1) * e
        z = ddim_step(z, eps, t, t_prev, schedule, clip=1.0)
        if not torch.isfinite(z).all():
            raise FloatingPointError(f"non-finite latent at sampling step {i} (t={t})")
    return z


def to_video(z: torch.Tensor) -> np.ndarray:
    """(T, 3, H, W) latents in [-1, 1] -> (T, H, W, 3) in [0, 1]."""
    return np.clip((z.double().numpy().transpose(0, 2, 3, 1) + 1.0) / 2.0, 0.0, 1.0)


def infer_video(model: Denoiser, frames: np.ndarray, pose: np.ndarray, garment: np.ndarray,
                garment_mask: np.ndarray, schedule: NoiseSchedule, seed: int,
                alignment: PointAlignment | None = None, steps: int | None = None,
                window: int | None = None, stride: int | None = None,
                mask: np.ndarray | None = None) -> np.ndarray:
    """Try-on from raw arrays in [0, 1]: frames (T, H, W, 3), pose (T, H, W), garment (Hg, Wg, 3).

    ``mask`` switches to the mask-based paradigm: ``frames`` is then the
    agnostic video and ``mask`` its (T, H, W) agnostic mask.
    """
    T = frames.shape[0]
    mc = None if mask is None else torch.as_tensor(mask, dtype=torch.float32)[None, :, None]
    cond = ConditioningBundle(_video(frames)[None], torch.as_tensor(pose, dtype=torch.float32)[None, :, None],
                              (_signed(garment).permute(2, 0, 1)
                               * torch.as_tensor(garment_mask, dtype=torch.float32))[None], mc)
    window = T if window is None else window
    stride = window if stride is None else stride
    masks_for = None
    if alignment is not None:
        if alignment.num_frames != T:
            raise ValueError(f"alignment covers {alignment.num_frames} frames, video has {T}")
        masks_for = lambda a, b: stack_pyramids(  # noqa: E731
            [alignment.frames(a, b)], model.cfg.frame_hw, model.cfg.garment_hw, model.cfg.level_factors)
    z = sliding_window_infer(model, cond, window, stride, schedule, seed, steps, masks_for,
                             use_pet=alignment is not None)
    return to_video(z[0])


def infer_sample(model: Denoiser, sample: TryOnSample, schedule: NoiseSchedule, seed: int,
                 alignment: PointAlignment | None = None, steps: int | None = None,
                 window: int | None = None, stride: int | None = None,
                 mask_based: bool = False) -> np.ndarray:
    """Generate the try-on video for one sample; returns (T, H, W, 3) in [0, 1]."""
    if mask_based:
        return infer_video(model, sample.a, sample.pose, sample.g, sample.m_g, schedule, seed,
                           alignment, steps, window, stride, mask=sample.m)
    return infer_video(model, sample.x_ps, sample.pose, sample.g, sample.m_g, schedule, seed,
                       alignment, steps, window, stride)


# -- hard mining ------------------------------------------------------------

def region_ssim(pred: np.ndarray, target: np.ndarray, region: np.ndarray) -> float:
    """SSIM map averaged over region pixels of every frame."""
    vals = [ssim(p, q, mask=r) for p, q, r in zip(pred, target, region) if r.any()]
    return float(np.mean(vals)) if vals else 1.0


@torch.no_grad()
def reconstruction_score(model: Denoiser, sample: TryOnSample, schedule: NoiseSchedule,
                         t: int, seed: int) -> float:
    """Region SSIM of a single-step clean estimate from a noised ground truth."""
    T = sample.num_frames
    z0, cond = make_batch([sample], [range(T)])
    eps = initial_noise(z0.shape, seed)
    tt = torch.tensor([t])
    z_t = forward_diffuse_batch(z0, tt, eps, schedule)
    pred = model(z_t, tt, cond, None, use_pet=False)
    ab = schedule.at(t)
    x0 = (z_t - math.sqrt(1 - ab) * pred) / math.sqrt(ab)
    return region_ssim(to_video(x0[0]), sample.x_gt, sample.region())


def select_hard(scores: Sequence[float], threshold: float = 0.75) -> list[int]:
    return [i for i, s in enumerate(scores) if s < threshold]


def mine_hard_pairs(samples: Sequence[TryOnSample], model: Denoiser | None,
                    threshold: float = 0.75, schedule: NoiseSchedule | None = None,
                    t: int = 25, seed: int = 0,
                    score_fn: Callable[[TryOnSample], float] | None = None
                    ) -> tuple[list[TryOnSample], list[float]]:
    """Samples whose reconstruction SSIM is strictly below ``threshold``."""
    if score_fn is None:
        schedule = schedule or NoiseSchedule.scaled_linear()
        score_fn = lambda s: reconstruction_score(model, s, schedule, t, seed)  # noqa: E731
    scores = [float(score_fn(s)) for s in samples]
    return [samples[i] for i in select_hard(scores, threshold)], scores
