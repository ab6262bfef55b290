import types

import numpy as np
import pytest
import torch

from defectgen.errors import ParameterError, StateError
from defectgen.models import (
    CodecDecoder,
    ModelBundle,
    ModelConfig,
    PromptSpec,
    state_dict_hash,
)
from defectgen.pipeline import (
    AdaptConfig,
    GenerationConfig,
    TrainSample,
    adapt_decoder,
    finetune_control,
    generate,
    generate_dataset,
    ldm_loss,
    pretrain_denoiser,
    rotation_augment,
    train_codec,
)
from defectgen.schedule import NoiseSchedule, ddim_step, make_schedule, plan_timesteps
from defectgen.trimap import build_trimap, dilate_downsample

TINY = ModelConfig(
    image_size=16, factor=4, latent_channels=2, codec_widths=(8, 8),
    denoiser_channels=(8, 8), zeta_widths=(4, 4), d_lang=8, time_dim=8,
)
SCHED = make_schedule(50)
GEN = GenerationConfig(t1=3, t2=2, t3=1, seed=0)


@pytest.fixture(scope="module")
def bundle():
    b = ModelBundle(TINY, seed=0)
    b.epsilon_codec = 0.05  # stand-in; generation only requires it to be set
    return b


def _texture(rng, n=4, size=16):
    x = rng.random((n, size, size, 3)).astype(np.float32)
    return 0.3 + 0.4 * x


def _mask_and_trimap(size=16):
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[5:9, 6:11] = 1
    fg = np.ones((size, size), dtype=np.uint8)
    return mask, build_trimap(fg, mask)


# ---------------------------------------------------------------------------
# loss objective
# ---------------------------------------------------------------------------


def _flat_schedule(t_train, alpha_bar):
    """A degenerate schedule whose alpha_bar is constant at every step."""
    betas = np.full(t_train, 1e-3)
    return NoiseSchedule(
        t_train=t_train, betas=betas, alphas=1 - betas,
        alpha_bars=np.full(t_train, alpha_bar), sigmas=np.zeros(t_train),
    )


def _stub_bundle(denoise_fn, latent_shape=(4, 16, 16)):
    """Minimal object exposing the attributes the loss objective touches."""
    c, h, w = latent_shape

    def encode(xb):
        return torch.zeros(xb.shape[0], c, h, w)

    def prompt(specs):
        return torch.zeros(len(specs), 2, 8)

    return types.SimpleNamespace(
        codec=types.SimpleNamespace(encoder=encode),
        prompt=prompt,
        denoiser=denoise_fn,
    )


def test_ldm_loss_zero_for_oracle_denoiser():
    # With latents encoded to zero and alpha_bar = 0.75, the noised latent
    # is exactly 0.5 * eps (both factors are exact binary floats), so a
    # denoiser that doubles its input recovers eps bit for bit.
    sched = _flat_schedule(8, 0.75)
    fake = _stub_bundle(lambda z, t, emb, control=None: 2.0 * z)
    images = np.zeros((4, 8, 8, 3), dtype=np.float32)
    prompts = [PromptSpec(empty=True)] * 4
    rng = torch.Generator().manual_seed(0)
    loss = ldm_loss((images, None, prompts), fake, sched, rng, prompt_dropout=0.0)
    assert float(loss) == 0.0


def test_ldm_loss_near_one_for_zero_denoiser():
    # Predicting zero noise leaves mean(eps^2), which concentrates at 1
    # over >= 16k standard normal entries.
    sched = make_schedule(100)
    fake = _stub_bundle(lambda z, t, emb, control=None: torch.zeros_like(z))
    images = np.zeros((16, 8, 8, 3), dtype=np.float32)  # 16*4*16*16 = 16384
    prompts = [PromptSpec(empty=True)] * 16
    rng = torch.Generator().manual_seed(1)
    loss = float(ldm_loss((images, None, prompts), fake, sched, rng,
                          prompt_dropout=0.0))
    assert abs(loss - 1.0) <= 0.05


def test_ldm_loss_validation(bundle):
    rng = torch.Generator().manual_seed(0)
    with pytest.raises(ParameterError):
        ldm_loss((np.zeros((0, 16, 16, 3), np.float32), None, []), bundle, SCHED, rng)
    imgs = np.zeros((2, 16, 16, 3), np.float32)
    with pytest.raises(ParameterError):
        ldm_loss((imgs, None, [PromptSpec()]), bundle, SCHED, rng)
    with pytest.raises(ParameterError):
        ldm_loss((imgs, np.zeros((1, 16, 16), np.float32),
                  [PromptSpec(), PromptSpec()]), bundle, SCHED, rng)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def test_train_codec_fits_constant_images():
    b = ModelBundle(TINY, seed=1)
    images = np.full((8, 16, 16, 3), 0.35, dtype=np.float32)
    _, eps = train_codec(images, b, epochs=400, lr=1e-2,
                         rng=torch.Generator().manual_seed(0))
    assert eps <= 1e-3
    assert b.epsilon_codec == eps


def test_train_codec_epochs_zero_keeps_weights():
    b = ModelBundle(TINY, seed=2)
    before = state_dict_hash(b.codec)
    images = _texture(np.random.default_rng(0))
    _, eps = train_codec(images, b, epochs=0, rng=torch.Generator().manual_seed(0))
    assert state_dict_hash(b.codec) == before
    assert np.isfinite(eps)
    with pytest.raises(ParameterError):
        train_codec(images[:0], b)


def test_pretrain_requires_frozen_codec_and_converges():
    b = ModelBundle(TINY, seed=3)
    rng = np.random.default_rng(1)
    images = _texture(rng, n=8)
    with pytest.raises(StateError):
        pretrain_denoiser(images, b, SCHED, steps=1)
    train_codec(images, b, epochs=5, rng=torch.Generator().manual_seed(0))
    b.freeze("codec")
    trace = pretrain_denoiser(images, b, SCHED, steps=60, lr=2e-3,
                              rng=torch.Generator().manual_seed(0))
    assert len(trace) == 60
    assert np.mean(trace[-10:]) < np.mean(trace[:10])
    assert b.is_frozen("denoiser")


def test_finetune_control_leaves_frozen_parts_untouched():
    b = ModelBundle(TINY, seed=4)
    rng = np.random.default_rng(2)
    images = _texture(rng, n=6)
    train_codec(images, b, epochs=3, rng=torch.Generator().manual_seed(0))
    b.freeze("codec")
    with pytest.raises(ParameterError):
        finetune_control([], b, SCHED, steps=1)
    with pytest.raises(StateError):
        finetune_control(
            [TrainSample(images[0], np.full((16, 16), 0.5, np.float32),
                         PromptSpec(0, 0))],
            b, SCHED, steps=1,
        )
    pretrain_denoiser(images, b, SCHED, steps=5, rng=torch.Generator().manual_seed(0))
    mask, tri = _mask_and_trimap()
    samples = [TrainSample(images[i], tri, PromptSpec(0, i % 3)) for i in range(4)]
    before = {n: state_dict_hash(getattr(b, n)) for n in ("codec", "denoiser")}
    ctrl_before = state_dict_hash(b.control)
    trace = finetune_control(samples, b, SCHED, steps=10,
                             rng=torch.Generator().manual_seed(0))
    assert len(trace) == 10
    assert state_dict_hash(b.codec) == before["codec"]
    assert state_dict_hash(b.denoiser) == before["denoiser"]
    assert state_dict_hash(b.control) != ctrl_before


def test_rotation_augment_properties():
    rng = np.random.default_rng(0)
    img = _texture(rng, n=1)[0]
    mask, _ = _mask_and_trimap()
    seeds = [(img, mask), (1.0 - img, mask)]
    out = rotation_augment(seeds, 6, np.random.default_rng(1))
    assert len(out) == 6
    for aug_img, aug_mask, j in out:
        assert aug_img.shape == img.shape and aug_img.dtype == np.float32
        assert aug_mask.dtype == np.uint8
        assert 0.0 <= aug_img.min() and aug_img.max() <= 1.0
        assert aug_mask.sum() >= 4
        assert 0 <= j < len(seeds)
    again = rotation_augment(seeds, 6, np.random.default_rng(1))
    for (a, am, aj), (b, bm, bj) in zip(out, again):
        assert np.array_equal(a, b) and np.array_equal(am, bm) and aj == bj
    assert rotation_augment(seeds, 0, np.random.default_rng(2)) == []
    with pytest.raises(ParameterError):
        rotation_augment([], 1, np.random.default_rng(3))
    with pytest.raises(ParameterError):
        rotation_augment(seeds, -1, np.random.default_rng(4))


# ---------------------------------------------------------------------------
# multi-stage generation
# ---------------------------------------------------------------------------


def test_generate_empty_mask_returns_source_latent(bundle):
    rng = np.random.default_rng(3)
    x_ok = _texture(rng, n=1)[0]
    mask = np.zeros((16, 16), dtype=np.uint8)
    tri = np.full((16, 16), 0.5, dtype=np.float32)
    z, _ = generate(x_ok, tri, mask, PromptSpec(0, 0), bundle, SCHED, GEN,
                    torch.Generator().manual_seed(0))
    z_ok = bundle.encode(x_ok)
    assert np.abs(z - z_ok).mean() <= 1e-6


def test_generate_full_mask_matches_free_diffusion(bundle):
    rng = np.random.default_rng(4)
    x_ok = _texture(rng, n=1)[0]
    mask = np.ones((16, 16), dtype=np.uint8)
    tri = build_trimap(np.ones((16, 16), np.uint8), mask)
    prompt = PromptSpec(0, 1)
    z, trace = generate(x_ok, tri, mask, prompt, bundle, SCHED, GEN,
                        torch.Generator().manual_seed(7))

    # reference: plain DDIM from the same seeded init with no editing
    from defectgen.models import ConditionSet
    gen = torch.Generator().manual_seed(7)
    z_ref = torch.randn((4, 4, 2), generator=gen).numpy().astype(np.float32)
    cond = ConditionSet(prompt=bundle.embed_prompt(prompt), trimap=tri)
    plan = plan_timesteps(SCHED.t_train, GEN.t1, GEN.t2, GEN.t3)
    steps = plan.steps.tolist()
    ref_latents = []
    for t, t_prev in zip(steps, steps[1:] + [-1]):
        eps = bundle.denoise_eps(z_ref, t, cond)
        z_ref = ddim_step(torch.from_numpy(z_ref), torch.from_numpy(eps),
                          t, t_prev, SCHED).numpy()
        ref_latents.append(z_ref)
    assert len(trace.latents) == len(ref_latents)
    for got, want in zip(trace.latents, ref_latents):
        assert np.array_equal(got, want)
    assert np.array_equal(z, ref_latents[-1])


def test_generate_is_deterministic(bundle):
    rng = np.random.default_rng(5)
    x_ok = _texture(rng, n=1)[0]
    mask, tri = _mask_and_trimap()
    outs = [
        generate(x_ok, tri, mask, PromptSpec(0, 0), bundle, SCHED, GEN,
                 torch.Generator().manual_seed(11))[0]
        for _ in range(5)
    ]
    for z in outs[1:]:
        assert np.array_equal(z, outs[0])


def test_generate_blend_traces_respect_mask(bundle):
    rng = np.random.default_rng(6)
    x_ok = _texture(rng, n=1)[0]
    mask, tri = _mask_and_trimap()
    z_ok = bundle.encode(x_ok)
    mz = dilate_downsample(mask, (4, 4)).astype(bool)
    _, trace = generate(x_ok, tri, mask, PromptSpec(0, 0), bundle, SCHED, GEN,
                        torch.Generator().manual_seed(1))
    assert len(trace.post_blend) == GEN.t2
    for z in trace.post_blend:
        assert np.array_equal(z[~mz], z_ok[~mz])


def test_generate_requires_trained_codec():
    b = ModelBundle(TINY, seed=5)  # epsilon_codec unset
    x_ok = np.full((16, 16, 3), 0.5, dtype=np.float32)
    mask, tri = _mask_and_trimap()
    with pytest.raises(StateError):
        generate(x_ok, tri, mask, PromptSpec(0, 0), b, SCHED, GEN,
                 torch.Generator().manual_seed(0))


def test_generation_config_validation():
    with pytest.raises(ParameterError):
        GenerationConfig(t1=0, t2=0, t3=0)
    with pytest.raises(ParameterError):
        GenerationConfig(t1=-1, t2=2, t3=1)
    with pytest.raises(ParameterError):
        AdaptConfig(t_ft=-1)
    with pytest.raises(ParameterError):
        AdaptConfig(lambda_con=-0.5)


# ---------------------------------------------------------------------------
# online decoder adaptation
# ---------------------------------------------------------------------------


def test_adapt_zero_steps_is_identity(bundle):
    rng = np.random.default_rng(7)
    z_star = rng.standard_normal((4, 4, 2)).astype(np.float32)
    x_ok = _texture(rng, n=1)[0]
    mask, _ = _mask_and_trimap()
    clone, image, trace = adapt_decoder(z_star, x_ok, mask, bundle,
                                        AdaptConfig(t_ft=0))
    assert trace == []
    assert np.array_equal(image, bundle.decode(z_star))
    assert state_dict_hash(clone) == state_dict_hash(bundle.codec.decoder)


def test_adapt_reduces_source_error_outside_mask(bundle):
    rng = np.random.default_rng(8)
    z_star = rng.standard_normal((4, 4, 2)).astype(np.float32)
    x_ok = _texture(rng, n=1)[0]
    mask, _ = _mask_and_trimap()
    _, image, trace = adapt_decoder(z_star, x_ok, mask, bundle,
                                    AdaptConfig(t_ft=80))
    l_i = [a for a, _ in trace]
    assert l_i[-1] < l_i[0]
    outside = ~mask.astype(bool)
    raw = bundle.decode(z_star)
    raw_err = np.abs(raw[outside] - x_ok[outside]).mean()
    new_err = np.abs(image[outside] - x_ok[outside]).mean()
    assert new_err < raw_err
    # the original bundle decoder is untouched
    assert np.array_equal(bundle.decode(z_star), raw)


def test_adapt_lambda_controls_defect_consistency(bundle):
    rng = np.random.default_rng(9)
    z_star = rng.standard_normal((4, 4, 2)).astype(np.float32)
    x_ok = _texture(rng, n=1)[0]
    mask, _ = _mask_and_trimap()
    cfg_hi = AdaptConfig(t_ft=60, lambda_con=1000.0)
    cfg_lo = AdaptConfig(t_ft=60, lambda_con=0.0)
    _, _, tr_hi = adapt_decoder(z_star, x_ok, mask, bundle, cfg_hi)
    _, _, tr_lo = adapt_decoder(z_star, x_ok, mask, bundle, cfg_lo)
    assert tr_hi[-1][1] < tr_lo[-1][1]  # final L_d smaller under strong anchor


def test_adapt_rejects_soft_mask(bundle):
    z_star = np.zeros((4, 4, 2), dtype=np.float32)
    x_ok = np.full((16, 16, 3), 0.5, dtype=np.float32)
    mask = np.full((16, 16), 0.5)
    with pytest.raises(ParameterError):
        adapt_decoder(z_star, x_ok, mask, bundle, AdaptConfig(t_ft=1))


def test_adapt_objective_gradients_match_finite_differences():
    # Double-precision central differences through a sub-1k-parameter
    # decoder on the exact adaptation objective.
    cfg = ModelConfig(image_size=8, factor=2, latent_channels=2,
                      codec_widths=(2,), denoiser_channels=(2, 4),
                      zeta_widths=(2,), d_lang=8, time_dim=8)
    torch.manual_seed(0)
    dec = CodecDecoder(cfg).double()
    n_params = sum(p.numel() for p in dec.parameters())
    assert n_params <= 1000

    g = torch.Generator().manual_seed(1)
    z = torch.randn(1, 2, 4, 4, dtype=torch.float64, generator=g)
    x_src = torch.rand(1, 3, 8, 8, dtype=torch.float64, generator=g)
    with torch.no_grad():
        x_star = dec(z) + 0.1
    m = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
    m[..., 2:5, 3:6] = 1.0
    lam = 100.0

    def loss_fn():
        x = dec(z)
        l_i = torch.sum((x - x_src) ** 2 * (1 - m))
        l_d = torch.sum((x - x_star) ** 2 * m)
        return l_i + lam * l_d

    grads = torch.autograd.grad(loss_fn(), list(dec.parameters()))
    params = list(dec.parameters())
    rng = np.random.default_rng(10)
    for _ in range(50):
        pi = int(rng.integers(len(params)))
        p, gr = params[pi], grads[pi]
        idx = tuple(int(rng.integers(d)) for d in p.shape)
        h = 1e-6
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss_fn().item()
            p[idx] = orig - h
            down = loss_fn().item()
            p[idx] = orig
        fd = (up - down) / (2 * h)
        denom = max(abs(fd), abs(gr[idx].item()), 1e-8)
        assert abs(fd - gr[idx].item()) / denom <= 1e-3, (pi, idx)


# ---------------------------------------------------------------------------
# batch synthesis
# ---------------------------------------------------------------------------


def _seed_masks(size=16):
    s = np.zeros((size, size), dtype=np.uint8)
    s[6:9, 5:10] = 1
    return [s]


def test_generate_dataset_empty_and_validation(bundle):
    rng = np.random.default_rng(0)
    run = generate_dataset(0, _texture(rng), _seed_masks(), [PromptSpec(0, 0)],
                           bundle, SCHED, GEN, None, rng)
    assert run.samples == [] and run.skipped == 0
    with pytest.raises(ParameterError):
        generate_dataset(-1, _texture(rng), _seed_masks(), [PromptSpec(0, 0)],
                         bundle, SCHED, GEN, None, rng)
    with pytest.raises(ParameterError):
        generate_dataset(2, _texture(rng), [], [PromptSpec(0, 0)],
                         bundle, SCHED, GEN, None, rng)


def test_generate_dataset_invariants_and_replay(bundle):
    ok = _texture(np.random.default_rng(1))
    prompts = [PromptSpec(0, d) for d in range(3)]
    adapt = AdaptConfig(t_ft=5)

    run1 = generate_dataset(3, ok, _seed_masks(), prompts, bundle, SCHED, GEN,
                            adapt, np.random.default_rng(42))
    assert run1.skipped == 0
    assert len(run1.samples) == 3
    for s in run1.samples:
        assert s.image.shape == (16, 16, 3)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert s.mask.any()
        assert np.all(s.trimap[s.mask.astype(bool)] == 1.0)
        assert s.adapted
        assert 0 <= s.source_id < len(ok)

    run2 = generate_dataset(3, ok, _seed_masks(), prompts, bundle, SCHED, GEN,
                            adapt, np.random.default_rng(42))
    assert run1.sample_seeds == run2.sample_seeds
    for a, b in zip(run1.samples, run2.samples):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)

    run3 = generate_dataset(3, ok, _seed_masks(), prompts, bundle, SCHED, GEN,
                            adapt, np.random.default_rng(42), workers=3)
    for a, b in zip(run1.samples, run3.samples):
        assert np.array_equal(a.image, b.image)


def test_generate_dataset_counts_unplaceable_masks(bundle):
    ok = _texture(np.random.default_rng(2))
    big = np.zeros((16, 16), dtype=np.uint8)
    big[1:15, 1:15] = 1

    # object foreground of a constant-ish texture is everything, so force a
    # tiny foreground through a custom fg kind is not possible here; instead
    # shrink the source of placements by using an oversized seed on a small
    # object image
    obj = np.full((4, 16, 16, 3), 0.2, dtype=np.float32)
    obj[:, 7:9, 7:9, :] = 0.9  # 2x2 bright object
    run = generate_dataset(2, obj, [big], [PromptSpec(0, 0)], bundle, SCHED,
                           GEN, None, np.random.default_rng(3),
                           fg_kind="object", retry_budget=2)
    assert run.skipped == 2
    assert run.samples == []
