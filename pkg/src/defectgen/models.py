"""The trainable networks: latent codec, conditional denoiser with a
trimap control branch, and the prompt embedder, behind a bundle that
enforces the shape contracts and the per-module freeze policy.

Array contract at the bundle surface: images are channel-last float
``(H, W, 3)`` in [0, 1], latents are channel-last ``(H_z, W_z, C_z)``.
The underlying torch modules use ``(B, C, H, W)``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ParameterError

_WEIGHT_FILES = ("codec", "denoiser", "control", "prompt")


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and vocabulary of one model instance."""

    image_size: int = 64
    factor: int = 8
    latent_channels: int = 4
    codec_widths: tuple[int, ...] = (32, 64, 64)
    denoiser_channels: tuple[int, int] = (32, 64)
    zeta_widths: tuple[int, ...] = (16, 32, 32)
    d_lang: int = 32
    time_dim: int = 64
    objects: tuple[str, ...] = ("surface",)
    defects: tuple[str, ...] = ("blob", "scratch", "spot")

    def __post_init__(self):
        levels = int(round(math.log2(self.factor)))
        if 2**levels != self.factor:
            raise ParameterError(f"factor {self.factor} must be a power of two")
        if self.image_size % self.factor != 0:
            raise ParameterError("image_size must be divisible by factor")
        if len(self.codec_widths) != levels or len(self.zeta_widths) != levels:
            raise ParameterError("codec/zeta widths must have log2(factor) entries")

    @property
    def latent_size(self) -> int:
        return self.image_size // self.factor


PAPER_SCALE = ModelConfig(
    image_size=256, factor=8, latent_channels=4,
    codec_widths=(64, 128, 128), denoiser_channels=(64, 128),
    zeta_widths=(32, 64, 64), d_lang=64,
)


@dataclass(frozen=True)
class PromptSpec:
    """Token pair naming the object category and defect type."""

    object_token: int = 0
    defect_token: int = 0
    empty: bool = False


@dataclass
class ConditionSet:
    """Conditioning fed to the denoiser: prompt embedding plus trimap.

    ``trimap`` is the pixel-resolution control map; ``None`` disables the
    control branch (unconditional-on-trimap denoising).
    """

    prompt: np.ndarray
    trimap: np.ndarray | None = None


def _groups(ch: int) -> int:
    return 8 if ch % 8 == 0 else 1


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0)
            * torch.arange(half, dtype=torch.get_default_dtype())
            / max(half - 1, 1)
        ).to(t.device)
        args = t.float().to(freqs.dtype)[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
        return self.mlp(emb)


class ResBlock(nn.Module):
    def __init__(self, ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch), ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, ch)
        self.norm2 = nn.GroupNorm(_groups(ch), ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, h: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        out = self.conv1(torch.nn.functional.silu(self.norm1(h)))
        out = out + self.time_proj(temb)[:, :, None, None]
        out = self.conv2(torch.nn.functional.silu(self.norm2(out)))
        return h + out


class CrossAttention(nn.Module):
    """Single-head attention from spatial features onto the prompt sequence."""

    def __init__(self, ch: int, d_lang: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.to_q = nn.Conv2d(ch, ch, 1)
        self.to_k = nn.Linear(d_lang, ch)
        self.to_v = nn.Linear(d_lang, ch)
        self.proj = nn.Conv2d(ch, ch, 1)
        self.scale = ch**-0.5

    def forward(self, h: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, c, hh, ww = h.shape
        q = self.to_q(self.norm(h)).reshape(b, c, hh * ww).transpose(1, 2)
        k = self.to_k(context)  # (B, L, C)
        v = self.to_v(context)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, c, hh, ww)
        return h + self.proj(out)


class SelfAttention2d(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.to_q = nn.Conv2d(ch, ch, 1)
        self.to_k = nn.Conv2d(ch, ch, 1)
        self.to_v = nn.Conv2d(ch, ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)
        self.scale = ch**-0.5

    def forward(self, h: torch.Tensor, context=None) -> torch.Tensor:
        b, c, hh, ww = h.shape
        x = self.norm(h)
        q = self.to_q(x).reshape(b, c, hh * ww).transpose(1, 2)
        k = self.to_k(x).reshape(b, c, hh * ww)
        v = self.to_v(x).reshape(b, c, hh * ww).transpose(1, 2)
        attn = torch.softmax(q @ k * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, c, hh, ww)
        return h + self.proj(out)


class DenoiserEncoder(nn.Module):
    """Two-resolution encoder; attention is cross (prompt) or self (control)."""

    def __init__(self, in_ch: int, channels: tuple[int, int], time_dim: int,
                 attention: str, d_lang: int = 0):
        super().__init__()
        c1, c2 = channels
        self.in_conv = nn.Conv2d(in_ch, c1, 3, padding=1)
        self.res1 = ResBlock(c1, time_dim)
        self.down = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.res2 = ResBlock(c2, time_dim)
        if attention == "cross":
            self.attn = CrossAttention(c2, d_lang)
        elif attention == "self":
            self.attn = SelfAttention2d(c2)
        else:
            raise ParameterError(f"unknown attention kind {attention!r}")

    def forward(self, z, temb, context=None):
        h1 = self.res1(self.in_conv(z), temb)
        h2 = self.res2(self.down(h1), temb)
        h2 = self.attn(h2, context)
        return h1, h2


class Denoiser(nn.Module):
    """Noise-prediction U-Net; control features merge into the decoder by
    element-wise addition at matching resolutions."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2 = cfg.denoiser_channels
        self.time_mlp = TimeEmbedding(cfg.time_dim)
        self.encoder = DenoiserEncoder(
            cfg.latent_channels, cfg.denoiser_channels, cfg.time_dim,
            attention="cross", d_lang=cfg.d_lang,
        )
        self.mid = ResBlock(c2, cfg.time_dim)
        self.up = nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1)
        self.res_out = ResBlock(c1, cfg.time_dim)
        self.out_norm = nn.GroupNorm(_groups(c1), c1)
        self.out_conv = nn.Conv2d(c1, cfg.latent_channels, 3, padding=1)

    def forward(self, z, t, prompt_emb, control=None):
        temb = self.time_mlp(t)
        h1, h2 = self.encoder(z, temb, prompt_emb)
        m = self.mid(h2, temb)
        if control is not None:
            m = m + control[1]
        u = self.up(m)
        if control is not None:
            u = u + control[0]
        u = self.res_out(u + h1, temb)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(u)))


class ControlBranch(nn.Module):
    """Trimap conditioning: embedding block to latent resolution followed by
    a structural copy of the denoiser encoder with self-attention."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = 1
        for w in cfg.zeta_widths:
            layers += [nn.Conv2d(in_ch, w, 3, stride=2, padding=1), nn.SiLU()]
            in_ch = w
        layers.append(nn.Conv2d(in_ch, cfg.latent_channels, 3, padding=1))
        self.zeta = nn.Sequential(*layers)
        self.encoder = DenoiserEncoder(
            cfg.latent_channels, cfg.denoiser_channels, cfg.time_dim,
            attention="self",
        )
        c1, c2 = cfg.denoiser_channels
        self.proj1 = nn.Conv2d(c1, c1, 1)
        self.proj2 = nn.Conv2d(c2, c2, 1)
        # zero-init projections: the branch starts as an exact no-op
        nn.init.zeros_(self.proj1.weight)
        nn.init.zeros_(self.proj1.bias)
        nn.init.zeros_(self.proj2.weight)
        nn.init.zeros_(self.proj2.bias)

    def embed(self, trimap: torch.Tensor) -> torch.Tensor:
        """The convolutional embedding of the trimap at latent resolution."""
        return self.zeta(trimap)

    def forward(self, trimap: torch.Tensor, temb: torch.Tensor):
        h1, h2 = self.encoder(self.zeta(trimap), temb)
        return self.proj1(h1), self.proj2(h2)

    def init_encoder_from(self, denoiser: Denoiser) -> list[str]:
        """Copy every encoder parameter whose name and shape match the
        pretrained denoiser encoder (the attention modules differ)."""
        src = dict(denoiser.encoder.state_dict())
        own = self.encoder.state_dict()
        copied = []
        for name, tensor in own.items():
            if name in src and src[name].shape == tensor.shape:
                own[name] = src[name].clone()
                copied.append(name)
        self.encoder.load_state_dict(own)
        return copied


class PromptEmbedder(nn.Module):
    """Learned token-embedding table over the closed (object, defect)
    vocabulary; the empty prompt maps to a dedicated null sequence."""

    SEQ_LEN = 2

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_obj = len(cfg.objects)
        self.n_def = len(cfg.defects)
        self.obj_table = nn.Embedding(self.n_obj, cfg.d_lang)
        self.def_table = nn.Embedding(self.n_def, cfg.d_lang)
        self.null_seq = nn.Parameter(torch.randn(self.SEQ_LEN, cfg.d_lang) * 0.02)

    def forward(self, specs: list[PromptSpec]) -> torch.Tensor:
        rows = []
        for p in specs:
            if p.empty:
                rows.append(self.null_seq)
                continue
            if not (0 <= p.object_token < self.n_obj):
                raise ParameterError(f"object token {p.object_token} out of vocabulary")
            if not (0 <= p.defect_token < self.n_def):
                raise ParameterError(f"defect token {p.defect_token} out of vocabulary")
            dtype_idx = torch.tensor([p.object_token])
            obj = self.obj_table(dtype_idx)
            deft = self.def_table(torch.tensor([p.defect_token]))
            rows.append(torch.cat([obj, deft], dim=0))
        return torch.stack(rows)


class CodecEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = 3
        for w in cfg.codec_widths:
            layers += [nn.Conv2d(in_ch, w, 3, stride=2, padding=1), nn.SiLU()]
            in_ch = w
        layers.append(nn.Conv2d(in_ch, cfg.latent_channels, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class CodecDecoder(nn.Module):
    """Mirror of the encoder; sigmoid output keeps pixels in [0, 1]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = list(reversed(cfg.codec_widths))
        layers: list[nn.Module] = [
            nn.Conv2d(cfg.latent_channels, widths[0], 3, padding=1), nn.SiLU()
        ]
        for w_in, w_out in zip(widths, widths[1:] + [widths[-1]]):
            layers += [nn.ConvTranspose2d(w_in, w_out, 4, stride=2, padding=1), nn.SiLU()]
        layers.append(nn.Conv2d(widths[-1], 3, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return torch.sigmoid(self.net(z))


class Codec(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.encoder = CodecEncoder(cfg)
        self.decoder = CodecDecoder(cfg)


def _img_to_torch(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x)).float().permute(2, 0, 1)[None]


def _latent_to_torch(z: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(z)).float().permute(2, 0, 1)[None]


def state_dict_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class ModelBundle:
    """The trained networks plus freeze flags and the checkpoint format.

    ``epsilon_codec`` is the held-out reconstruction MAE recorded by codec
    training; it is the tolerance unit of the pixel-preservation guarantee.
    """

    COMPONENTS = ("codec", "denoiser", "control", "prompt")

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.config = cfg
        gen = torch.Generator().manual_seed(seed)
        with _fork_torch_seed(gen):
            self.codec = Codec(cfg)
            self.denoiser = Denoiser(cfg)
            self.control = ControlBranch(cfg)
            self.prompt = PromptEmbedder(cfg)
        self.trainable = {name: True for name in self.COMPONENTS}
        self.epsilon_codec: float | None = None
        self.eval()

    def eval(self):
        for m in (self.codec, self.denoiser, self.control, self.prompt):
            m.eval()
        return self

    def freeze(self, name: str):
        if name not in self.trainable:
            raise ParameterError(f"unknown component {name!r}")
        self.trainable[name] = False
        for p in getattr(self, name).parameters():
            p.requires_grad_(False)

    def is_frozen(self, name: str) -> bool:
        return not self.trainable[name]

    # contract-level operations (numpy channel-last in, numpy out)

    def encode(self, x: np.ndarray) -> np.ndarray:
        cfg = self.config
        if x.shape != (cfg.image_size, cfg.image_size, 3):
            raise ParameterError(
                f"image shape {x.shape} != {(cfg.image_size, cfg.image_size, 3)}"
            )
        with torch.no_grad():
            z = self.codec.encoder(_img_to_torch(x))
        return z[0].permute(1, 2, 0).numpy()

    def decode(self, z: np.ndarray) -> np.ndarray:
        cfg = self.config
        if z.shape != (cfg.latent_size, cfg.latent_size, cfg.latent_channels):
            raise ParameterError(f"latent shape {z.shape} mismatches config")
        with torch.no_grad():
            x = self.codec.decoder(_latent_to_torch(z))
        return x[0].permute(1, 2, 0).numpy()

    def embed_prompt(self, p: PromptSpec) -> np.ndarray:
        with torch.no_grad():
            emb = self.prompt([p])
        return emb[0].numpy()

    def embed_trimap(self, tri: np.ndarray) -> np.ndarray:
        cfg = self.config
        if tri.shape != (cfg.image_size, cfg.image_size):
            raise ParameterError(f"trimap shape {tri.shape} mismatches image size")
        t = torch.from_numpy(np.ascontiguousarray(tri)).float()[None, None]
        with torch.no_grad():
            feat = self.control.embed(t)
        return feat[0].permute(1, 2, 0).numpy()

    def denoise_eps(self, z_t: np.ndarray, t: int, cond: ConditionSet) -> np.ndarray:
        cfg = self.config
        if z_t.shape != (cfg.latent_size, cfg.latent_size, cfg.latent_channels):
            raise ParameterError(f"latent shape {z_t.shape} mismatches config")
        zt = _latent_to_torch(z_t)
        tt = torch.tensor([t], dtype=torch.long)
        prompt = torch.from_numpy(np.ascontiguousarray(cond.prompt)).float()[None]
        with torch.no_grad():
            control = None
            if cond.trimap is not None:
                tri = torch.from_numpy(np.ascontiguousarray(cond.trimap)).float()[None, None]
                control = self.control(tri, self.denoiser.time_mlp(tt))
            eps = self.denoiser(zt, tt, prompt, control=control)
        return eps[0].permute(1, 2, 0).numpy()

    def clone_decoder(self) -> CodecDecoder:
        """Independently mutable decoder copy for per-sample adaptation."""
        clone = copy.deepcopy(self.codec.decoder)
        for p in clone.parameters():
            p.requires_grad_(True)
        return clone

    # checkpoint format: one weights file per network plus a JSON manifest

    def save(self, directory, sched_params: dict | None = None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        hashes = {}
        for name in _WEIGHT_FILES:
            module = getattr(self, name)
            torch.save(module.state_dict(), directory / f"{name}.pt")
            hashes[name] = state_dict_hash(module)
        manifest = {
            "format": "defectgen-checkpoint-v1",
            "config": asdict(self.config),
            "epsilon_codec": self.epsilon_codec,
            "trainable": self.trainable,
            "schedule": sched_params or {},
            "weight_hashes": hashes,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory) -> "ModelBundle":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        cfg_dict = manifest["config"]
        for key in ("codec_widths", "denoiser_channels", "zeta_widths",
                    "objects", "defects"):
            cfg_dict[key] = tuple(cfg_dict[key])
        bundle = cls(ModelConfig(**cfg_dict))
        for name in _WEIGHT_FILES:
            state = torch.load(directory / f"{name}.pt", weights_only=True)
            getattr(bundle, name).load_state_dict(state)
        bundle.epsilon_codec = manifest["epsilon_codec"]
        for name, flag in manifest["trainable"].items():
            if not flag:
                bundle.freeze(name)
        bundle.eval()
        return bundle

    def weight_hashes(self) -> dict[str, str]:
        return {name: state_dict_hash(getattr(self, name)) for name in _WEIGHT_FILES}


class _fork_torch_seed:
    """Run module construction under a seeded fork of the global RNG."""

    def __init__(self, gen: torch.Generator):
        self.gen = gen

    def __enter__(self):
        self.state = torch.get_rng_state()
        torch.manual_seed(int(self.gen.initial_seed()))

    def __exit__(self, *exc):
        torch.set_rng_state(self.state)
