"""Training loops, multi-stage generation with editing, per-sample decoder
adaptation, and batch dataset synthesis.

The inference path is: encode the defect-free source, run free DDIM steps
from noise, then latent-editing steps (blend the latent with the source
under the dilated latent mask before each denoise), then pixel-editing
steps (decode, blend with the source image under the full-resolution
defect mask, re-encode, denoise), and finally re-blend in pixel space.
The decoder is then fine-tuned per sample to pin non-defect pixels to the
source while keeping the generated defect.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .errors import FitError, ParameterError, StateError
from .models import ConditionSet, ModelBundle, PromptSpec, state_dict_hash
from .schedule import NoiseSchedule, ddim_step, plan_timesteps
from .trimap import build_trimap, dilate_downsample, estimate_foreground, synth_defect_mask

PROMPT_DROPOUT = 0.1
ADAM_BETAS = (0.9, 0.999)
WEIGHT_DECAY = 0.01


@dataclass
class GenerationConfig:
    """Stage lengths and sampling knobs for multi-stage generation."""

    t1: int = 50
    t2: int = 30
    t3: int = 5
    eta: float = 0.0
    guidance_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.t1, self.t2, self.t3) < 0 or self.t1 + self.t2 + self.t3 < 1:
            raise ParameterError("need t1, t2, t3 >= 0 with at least one step")


@dataclass
class AdaptConfig:
    """Online decoder adaptation: AdamW on L_i + lambda_con * L_d."""

    t_ft: int = 200
    lambda_con: float = 100.0
    learning_rate: float = 1e-4
    betas: tuple[float, float] = ADAM_BETAS
    weight_decay: float = WEIGHT_DECAY

    def __post_init__(self):
        if self.t_ft < 0:
            raise ParameterError("t_ft must be >= 0")
        if self.lambda_con < 0:
            raise ParameterError("lambda_con must be >= 0")


@dataclass
class DefectSample:
    """One generated defective image with its aligned mask and provenance."""

    image: np.ndarray
    mask: np.ndarray
    trimap: np.ndarray
    prompt: PromptSpec
    source_id: int
    seed: int
    adapted: bool


@dataclass
class TrainSample:
    """A genuine defective training sample: image, trimap and prompt."""

    image: np.ndarray
    trimap: np.ndarray
    prompt: PromptSpec


def rotation_augment(
    seed_ng: list[tuple[np.ndarray, np.ndarray]],
    n: int,
    rng: np.random.Generator,
    min_support: int = 4,
) -> list[tuple[np.ndarray, np.ndarray, int]]:
    """Rotated copies of genuine defective samples.

    Rotating the whole image keeps the statistical coupling between the
    defect pixels and the surrounding texture, which pasting defect crops
    onto unrelated backgrounds destroys.  Returns ``(image, mask, seed_index)``
    triples; draws whose rotated mask shrinks below ``min_support`` pixels
    are redrawn.
    """
    if n < 0:
        raise ParameterError("augmentation count must be >= 0")
    if not seed_ng:
        raise ParameterError("need at least one seed sample to augment")
    out: list[tuple[np.ndarray, np.ndarray, int]] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 100 * n:
            raise FitError("rotation augmentation kept losing the defect mask")
        j = int(rng.integers(len(seed_ng)))
        img, mask = seed_ng[j]
        angle = float(rng.uniform(0.0, 360.0))
        rot_img = ndimage.rotate(img, angle, reshape=False, mode="reflect", order=1)
        rot_mask = ndimage.rotate(
            mask.astype(np.float64), angle, reshape=False, order=0
        ) >= 0.5
        if int(rot_mask.sum()) < min_support:
            continue
        out.append((
            np.clip(rot_img, 0.0, 1.0).astype(np.float32),
            rot_mask.astype(np.uint8),
            j,
        ))
    return out


@dataclass
class StageTrace:
    """Per-step latents recorded during generation.

    ``latents`` holds the latent after every DDIM update, across all
    stages; ``post_blend`` holds the latent right after each latent-space
    blend in the editing stage.
    """

    timesteps: list[int] = field(default_factory=list)
    latents: list[np.ndarray] = field(default_factory=list)
    post_blend: list[np.ndarray] = field(default_factory=list)


def _to_bchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images)).float().permute(0, 3, 1, 2)


def train_codec(
    images: np.ndarray,
    bundle: ModelBundle,
    epochs: int = 20,
    lr: float = 1e-3,
    rng: torch.Generator | None = None,
    batch_size: int = 16,
    holdout_frac: float = 0.1,
) -> tuple[dict, float]:
    """Train the latent codec with pixel L2 and record held-out MAE.

    Returns the trained state dict and ``epsilon_codec`` (also stored on
    the bundle).
    """
    if len(images) == 0:
        raise ParameterError("codec training needs a nonempty dataset")
    if rng is None:
        rng = torch.Generator().manual_seed(0)

    n = len(images)
    n_hold = max(1, int(round(holdout_frac * n))) if n > 1 else 0
    perm = torch.randperm(n, generator=rng).numpy()
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    if len(train_idx) == 0:
        train_idx = perm
    x_all = _to_bchw(images)

    codec = bundle.codec
    codec.train()
    opt = torch.optim.AdamW(
        codec.parameters(), lr=lr, betas=ADAM_BETAS, weight_decay=WEIGHT_DECAY
    )
    for _ in range(epochs):
        order = train_idx[torch.randperm(len(train_idx), generator=rng).numpy()]
        for lo in range(0, len(order), batch_size):
            xb = x_all[order[lo : lo + batch_size]]
            recon = codec.decoder(codec.encoder(xb))
            loss = torch.mean((recon - xb) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
    codec.eval()

    eval_idx = hold_idx if n_hold else train_idx
    with torch.no_grad():
        recon = codec.decoder(codec.encoder(x_all[eval_idx]))
        eps_codec = float(torch.mean(torch.abs(recon - x_all[eval_idx])))
    bundle.epsilon_codec = eps_codec
    return codec.state_dict(), eps_codec


def ldm_loss(
    batch: tuple[np.ndarray, np.ndarray | None, list[PromptSpec]],
    bundle: ModelBundle,
    sched: NoiseSchedule,
    rng: torch.Generator,
    prompt_dropout: float = PROMPT_DROPOUT,
) -> torch.Tensor:
    """Noise-prediction objective: mean squared error between the drawn
    noise and the denoiser's prediction at a uniformly sampled timestep.

    With probability ``prompt_dropout`` a sample's prompt is replaced by
    the learned null sequence.  ``batch = (images, trimaps, prompts)``;
    ``trimaps=None`` disables the control branch.
    """
    images, trimaps, prompts = batch
    if len(images) == 0:
        raise ParameterError("empty batch")
    if len(prompts) != len(images):
        raise ParameterError("prompt count mismatches batch")
    if trimaps is not None and len(trimaps) != len(images):
        raise ParameterError("trimap count mismatches batch")

    b = len(images)
    xb = _to_bchw(np.asarray(images))
    with torch.no_grad():
        z0 = bundle.codec.encoder(xb)

    t = torch.randint(0, sched.t_train, (b,), generator=rng)
    eps = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
    ab = torch.from_numpy(sched.alpha_bars[t.numpy()]).to(z0.dtype)
    ab = ab[:, None, None, None]
    z_t = torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps

    if prompt_dropout > 0.0:
        drop = torch.rand(b, generator=rng).numpy() < prompt_dropout
        prompts = [
            PromptSpec(empty=True) if d else p for p, d in zip(prompts, drop)
        ]
    prompt_emb = bundle.prompt(prompts)

    control = None
    if trimaps is not None:
        tri = torch.from_numpy(np.ascontiguousarray(trimaps)).float()[:, None]
        control = bundle.control(tri, bundle.denoiser.time_mlp(t))

    eps_hat = bundle.denoiser(z_t, t, prompt_emb, control=control)
    return torch.mean((eps - eps_hat) ** 2)


def pretrain_denoiser(
    domain_images: np.ndarray,
    bundle: ModelBundle,
    sched: NoiseSchedule,
    steps: int = 2000,
    lr: float = 1e-3,
    rng: torch.Generator | None = None,
    batch_size: int = 16,
) -> list[float]:
    """Pretrain the denoiser on the domain dataset, control branch inactive.

    Prompts are the null sequence (the domain set has no defect labels).
    The denoiser is frozen on return.  Returns the per-step loss trace.
    """
    if not bundle.is_frozen("codec"):
        raise StateError("codec must be trained and frozen before pretraining")
    if rng is None:
        rng = torch.Generator().manual_seed(0)
    images = np.asarray(domain_images)
    if len(images) == 0:
        raise ParameterError("empty domain dataset")

    bundle.denoiser.train()
    opt = torch.optim.AdamW(
        bundle.denoiser.parameters(), lr=lr, betas=ADAM_BETAS,
        weight_decay=WEIGHT_DECAY,
    )
    trace = []
    for _ in range(steps):
        idx = torch.randint(0, len(images), (min(batch_size, len(images)),),
                            generator=rng).numpy()
        prompts = [PromptSpec(empty=True)] * len(idx)
        loss = ldm_loss((images[idx], None, prompts), bundle, sched, rng,
                        prompt_dropout=0.0)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
    bundle.denoiser.eval()
    bundle.freeze("denoiser")
    return trace


def finetune_control(
    samples: list[TrainSample],
    bundle: ModelBundle,
    sched: NoiseSchedule,
    steps: int = 800,
    lr: float = 1e-3,
    rng: torch.Generator | None = None,
    batch_size: int = 8,
) -> list[float]:
    """Fine-tune the control branch and prompt embedder on genuine defects.

    The control encoder is initialized from the frozen denoiser encoder;
    the denoiser and codec are asserted bit-unchanged afterwards.
    """
    if len(samples) < 1:
        raise ParameterError("need at least one defect sample")
    if not bundle.is_frozen("denoiser"):
        raise StateError("denoiser must be pretrained and frozen")
    if rng is None:
        rng = torch.Generator().manual_seed(0)

    bundle.control.init_encoder_from(bundle.denoiser)
    frozen_hashes = {
        name: state_dict_hash(getattr(bundle, name))
        for name in ("codec", "denoiser")
    }

    images = np.stack([s.image for s in samples])
    trimaps = np.stack([s.trimap for s in samples])
    prompts = [s.prompt for s in samples]

    bundle.control.train()
    params = list(bundle.control.parameters()) + list(bundle.prompt.parameters())
    opt = torch.optim.AdamW(params, lr=lr, betas=ADAM_BETAS,
                            weight_decay=WEIGHT_DECAY)
    trace = []
    for _ in range(steps):
        idx = torch.randint(0, len(samples), (min(batch_size, len(samples)),),
                            generator=rng).numpy()
        loss = ldm_loss(
            (images[idx], trimaps[idx], [prompts[i] for i in idx]),
            bundle, sched, rng,
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
    bundle.control.eval()

    for name, before in frozen_hashes.items():
        after = state_dict_hash(getattr(bundle, name))
        if after != before:
            raise StateError(f"frozen component {name!r} changed during fine-tuning")
    return trace


def _predict_eps(bundle, z, t, cond, null_cond, guidance_scale):
    eps = bundle.denoise_eps(z, t, cond)
    if guidance_scale != 1.0:
        eps_null = bundle.denoise_eps(z, t, null_cond)
        eps = eps_null + guidance_scale * (eps - eps_null)
    return eps


def generate(
    x_ok: np.ndarray,
    trimap: np.ndarray,
    defect_mask: np.ndarray,
    prompt: PromptSpec,
    bundle: ModelBundle,
    sched: NoiseSchedule,
    cfg: GenerationConfig,
    rng: torch.Generator,
) -> tuple[np.ndarray, StageTrace]:
    """Multi-stage denoising with latent- and pixel-space editing.

    Returns the blended clean latent (decode it, or pass it to
    :func:`adapt_decoder`, to obtain the defective image) and the stage
    trace.
    """
    if bundle.epsilon_codec is None:
        raise StateError("bundle has no trained codec (epsilon_codec unset)")
    cfg_lat = (bundle.config.latent_size, bundle.config.latent_size)

    z_ok = bundle.encode(x_ok)
    mz = dilate_downsample(defect_mask, cfg_lat).astype(np.float32)[..., None]
    mask_px = defect_mask.astype(np.float32)[..., None]
    full_mask = bool(defect_mask.astype(bool).all())

    plan = plan_timesteps(sched.t_train, cfg.t1, cfg.t2, cfg.t3)
    steps = plan.steps.tolist()
    t_prevs = steps[1:] + [-1]
    b1, b2 = plan.stage_boundaries

    cond = ConditionSet(prompt=bundle.embed_prompt(prompt), trimap=trimap)
    null_cond = ConditionSet(
        prompt=bundle.embed_prompt(PromptSpec(empty=True)), trimap=trimap
    )

    z = torch.randn(
        (cfg_lat[0], cfg_lat[1], bundle.config.latent_channels), generator=rng
    ).numpy().astype(np.float32)

    trace = StageTrace()

    def denoise_to(z, t, t_prev):
        eps = _predict_eps(bundle, z, t, cond, null_cond, cfg.guidance_scale)
        zt = torch.from_numpy(z)
        out = ddim_step(zt, torch.from_numpy(eps), t, t_prev, sched,
                        eta=cfg.eta, rng=rng)
        return out.numpy()

    for i, (t, t_prev) in enumerate(zip(steps, t_prevs)):
        if b1 <= i < b2:
            z = z * mz + z_ok * (1.0 - mz)
            trace.post_blend.append(z.copy())
        elif i >= b2 and not full_mask:
            x_t = bundle.decode(z)
            x_blend = x_t * mask_px + x_ok * (1.0 - mask_px)
            z = bundle.encode(x_blend.astype(np.float32))
        z = denoise_to(z, t, t_prev)
        trace.timesteps.append(t)
        trace.latents.append(z.copy())

    # Final pixel-space blend pins the non-defect region to the source.
    if not full_mask:
        x0 = bundle.decode(z)
        x_blend = x0 * mask_px + x_ok * (1.0 - mask_px)
        z = bundle.encode(x_blend.astype(np.float32))
    return z, trace


def adapt_decoder(
    z_star: np.ndarray,
    x_ok: np.ndarray,
    mask: np.ndarray,
    bundle: ModelBundle,
    cfg: AdaptConfig,
) -> tuple[torch.nn.Module, np.ndarray, list[tuple[float, float]]]:
    """Per-sample decoder fine-tuning on a clone of the bundle decoder.

    The anchor image is decoded once with the pristine clone and held
    fixed; the loop then minimizes the sum of squared errors to the source
    outside the mask plus ``lambda_con`` times the squared error to the
    anchor inside it.  Returns the adapted clone, the refined image, and
    the per-step (L_i, L_d) trace.
    """
    if not np.isin(mask, (0, 1)).all():
        raise ParameterError("mask must be binary")
    clone = bundle.clone_decoder()
    z = _to_bchw(z_star[None])
    with torch.no_grad():
        x_star = clone(z)
    if cfg.t_ft == 0:
        return clone, x_star[0].permute(1, 2, 0).numpy(), []

    x_src = _to_bchw(x_ok[None])
    m = torch.from_numpy(mask.astype(np.float32))[None, None]
    m_bar = 1.0 - m
    opt = torch.optim.AdamW(
        clone.parameters(), lr=cfg.learning_rate, betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )
    trace = []
    for _ in range(cfg.t_ft):
        x_tilde = clone(z)
        l_i = torch.sum((x_tilde - x_src) ** 2 * m_bar)
        l_d = torch.sum((x_tilde - x_star) ** 2 * m)
        loss = l_i + cfg.lambda_con * l_d
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append((float(l_i.detach()), float(l_d.detach())))
    with torch.no_grad():
        x_out = clone(z)
    return clone, x_out[0].permute(1, 2, 0).numpy(), trace


@dataclass
class DatasetRun:
    """Outcome of a batch synthesis run."""

    samples: list[DefectSample]
    skipped: int
    sample_seeds: list[int]


def _make_one(
    sample_seed: int,
    src_idx: int,
    prompt: PromptSpec,
    ok_images: np.ndarray,
    seed_masks: list[np.ndarray],
    bundle: ModelBundle,
    sched: NoiseSchedule,
    gen_cfg: GenerationConfig,
    adapt_cfg: AdaptConfig | None,
    fg_kind: str,
) -> DefectSample:
    np_rng = np.random.default_rng(sample_seed)
    torch_rng = torch.Generator().manual_seed(sample_seed)
    x_ok = ok_images[src_idx]
    fg = estimate_foreground(x_ok, kind=fg_kind)
    mask = synth_defect_mask(seed_masks, fg, rng=np_rng)
    tri = build_trimap(fg, mask)
    z_star, _ = generate(x_ok, tri, mask, prompt, bundle, sched, gen_cfg, torch_rng)
    if adapt_cfg is not None and adapt_cfg.t_ft > 0:
        _, image, _ = adapt_decoder(z_star, x_ok, mask, bundle, adapt_cfg)
        adapted = True
    else:
        image = bundle.decode(z_star)
        adapted = False
    return DefectSample(
        image=image, mask=mask, trimap=tri, prompt=prompt,
        source_id=src_idx, seed=sample_seed, adapted=adapted,
    )


def generate_dataset(
    n: int,
    ok_images: np.ndarray,
    seed_masks: list[np.ndarray],
    prompts: list[PromptSpec],
    bundle: ModelBundle,
    sched: NoiseSchedule,
    gen_cfg: GenerationConfig,
    adapt_cfg: AdaptConfig | None,
    rng: np.random.Generator,
    fg_kind: str = "texture",
    retry_budget: int = 10,
    workers: int = 1,
) -> DatasetRun:
    """Synthesize ``n`` defective samples; each records its replay seed.

    Per-sample placement failures are retried with fresh randomness up to
    ``retry_budget`` times, then counted and skipped.  Sample plans are
    drawn up front so the result is identical for any worker count.
    """
    if n < 0:
        raise ParameterError("n must be >= 0")
    if n > 0 and (len(ok_images) == 0 or not seed_masks or not prompts):
        raise ParameterError("need nonempty sources to generate samples")

    plans = [
        (
            int(rng.integers(2**31)),
            int(rng.integers(len(ok_images))),
            prompts[int(rng.integers(len(prompts)))],
            [int(rng.integers(2**31)) for _ in range(retry_budget)],
        )
        for _ in range(n)
    ]

    def attempt(plan):
        sample_seed, src_idx, prompt, retries = plan
        for s in [sample_seed] + retries:
            try:
                return _make_one(
                    s, src_idx, prompt, ok_images, seed_masks, bundle,
                    sched, gen_cfg, adapt_cfg, fg_kind,
                )
            except FitError:
                continue
        return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(attempt, plans))
    else:
        results = [attempt(p) for p in plans]

    samples = [r for r in results if r is not None]
    return DatasetRun(
        samples=samples,
        skipped=n - len(samples),
        sample_seeds=[s.seed for s in samples],
    )
