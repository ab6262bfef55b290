"""Self-contained evaluation loop: procedural toy benchmark, patch-feature
extraction, an RBF-kernel patch classifier, and multi-trial scoring.

The benchmark is fully seeded: textures are procedural (stripes or
band-filtered noise) and defects are parametric (blobs, scratches, color
spots) with exact masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator
from sklearn.svm import SVC

from .errors import ParameterError
from .metrics import (
    DEFAULT_FPR_LIMIT,
    DEFAULT_K,
    GroundTruth,
    MetricsReport,
)

TEXTURE_FAMILIES = ("stripes", "bands")
DEFECT_FAMILIES = ("blob", "scratch", "spot")
_PROJECTION_SEED = 0x5EED


@dataclass(frozen=True)
class BenchmarkSpec:
    """Parameters of one procedural toy category."""

    category: str = "toy"
    texture: str = "stripes"
    defects: tuple[str, ...] = DEFECT_FAMILIES
    image_size: int = 64
    n_train: int = 60
    n_seed: int = 10
    n_test_defect: int = 20
    n_test_good: int = 5
    contrast_margin: float = 0.15

    def __post_init__(self):
        if self.texture not in TEXTURE_FAMILIES:
            raise ParameterError(f"unknown texture family {self.texture!r}")
        if not self.defects or any(d not in DEFECT_FAMILIES for d in self.defects):
            raise ParameterError(f"invalid defect families {self.defects!r}")
        if min(self.n_train, self.n_seed, self.n_test_defect) < 1:
            raise ParameterError("counts must be positive")


@dataclass
class ToyBenchmark:
    """Procedural benchmark: clean training set, defect seeds, labeled test set."""

    spec: BenchmarkSpec
    seed: int
    train_ok: np.ndarray
    seed_ng: list[tuple[np.ndarray, np.ndarray]]
    seed_kinds: list[str]
    test_images: np.ndarray
    test_masks: np.ndarray
    # paired clean renders of the defective test images, for contrast checks
    test_clean: np.ndarray


def _render_texture(spec: BenchmarkSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n] / n
    if spec.texture == "stripes":
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(4.0, 8.0)
        phase = rng.uniform(0, 2 * np.pi)
        field_ = 0.5 + 0.35 * np.sin(
            2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase
        )
    else:  # band-filtered noise
        noise = rng.standard_normal((n, n))
        smooth = ndimage.gaussian_filter(noise, sigma=rng.uniform(2.0, 4.0))
        smooth = (smooth - smooth.min()) / max(np.ptp(smooth), 1e-9)
        field_ = 0.25 + 0.5 * smooth
    tint = rng.uniform(0.85, 1.0, size=3)
    img = field_[..., None] * tint[None, None, :]
    img += rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _defect_mask(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((n, n), dtype=np.uint8)
    if kind == "blob":
        cy, cx = rng.uniform(0.25 * n, 0.75 * n, size=2)
        ry = rng.uniform(0.06 * n, 0.14 * n)
        rx = rng.uniform(0.06 * n, 0.14 * n)
        ang = rng.uniform(0, np.pi)
        yy, xx = np.mgrid[0:n, 0:n]
        ys, xs = yy - cy, xx - cx
        u = np.cos(ang) * xs + np.sin(ang) * ys
        v = -np.sin(ang) * xs + np.cos(ang) * ys
        mask[(u / rx) ** 2 + (v / ry) ** 2 <= 1.0] = 1
    elif kind == "scratch":
        y0, x0 = rng.integers(4, n - 4, size=2)
        length = rng.uniform(0.3 * n, 0.7 * n)
        ang = rng.uniform(0, 2 * np.pi)
        y1 = int(np.clip(y0 + length * np.sin(ang), 1, n - 2))
        x1 = int(np.clip(x0 + length * np.cos(ang), 1, n - 2))
        npts = max(abs(y1 - y0), abs(x1 - x0)) + 1
        ys = np.linspace(y0, y1, npts).round().astype(int)
        xs = np.linspace(x0, x1, npts).round().astype(int)
        mask[ys, xs] = 1
        mask = ndimage.binary_dilation(mask, iterations=1).astype(np.uint8)
    elif kind == "spot":
        cy, cx = rng.uniform(0.2 * n, 0.8 * n, size=2)
        r = rng.uniform(0.04 * n, 0.08 * n)
        yy, xx = np.mgrid[0:n, 0:n]
        mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1
    else:
        raise ParameterError(f"unknown defect kind {kind!r}")
    if not mask.any():
        mask[n // 2, n // 2] = 1
    return mask


def _inject_defect(
    clean: np.ndarray, mask: np.ndarray, margin: float, rng: np.random.Generator
) -> np.ndarray:
    """Blend a high-contrast defect color into the masked pixels."""
    img = clean.copy()
    local_mean = clean[mask.astype(bool)].mean(axis=0)
    # aim at the far side of the value range, per channel
    target = np.where(local_mean > 0.5, 0.0, 1.0) + rng.uniform(-0.1, 0.1, size=3)
    target = np.clip(target, 0.0, 1.0)
    w = np.clip(margin / np.maximum(np.abs(target - local_mean), 1e-6), 0.0, 1.0)
    w = np.maximum(w.max(), 0.6)
    img[mask.astype(bool)] = (1 - w) * clean[mask.astype(bool)] + w * target
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_toy_benchmark(spec: BenchmarkSpec, rng: np.random.Generator) -> ToyBenchmark:
    """Generate a fully seeded procedural benchmark."""
    seed = int(rng.integers(2**31))
    master = np.random.default_rng(seed)

    train_ok = np.stack([_render_texture(spec, master) for _ in range(spec.n_train)])

    def make_defective(r):
        clean = _render_texture(spec, r)
        kind = spec.defects[int(r.integers(len(spec.defects)))]
        mask = _defect_mask(kind, spec.image_size, r)
        img = _inject_defect(clean, mask, spec.contrast_margin, r)
        return img, mask, clean, kind

    seed_ng, seed_kinds = [], []
    for _ in range(spec.n_seed):
        img, mask, _, kind = make_defective(master)
        seed_ng.append((img, mask))
        seed_kinds.append(kind)

    test_images, test_masks, test_clean = [], [], []
    for _ in range(spec.n_test_defect):
        img, mask, clean, _ = make_defective(master)
        test_images.append(img)
        test_masks.append(mask)
        test_clean.append(clean)
    for _ in range(spec.n_test_good):
        img = _render_texture(spec, master)
        test_images.append(img)
        test_masks.append(np.zeros(img.shape[:2], dtype=np.uint8))
        test_clean.append(img)

    return ToyBenchmark(
        spec=spec,
        seed=seed,
        train_ok=train_ok,
        seed_ng=seed_ng,
        seed_kinds=seed_kinds,
        test_images=np.stack(test_images),
        test_masks=np.stack(test_masks),
        test_clean=np.stack(test_clean),
    )


@dataclass
class PatchFeatureSet:
    """Per-patch descriptors with centers and binary defect labels."""

    features: np.ndarray
    centers: np.ndarray
    labels: np.ndarray
    stride: int
    d_f: int


def _projection_matrix(d_in: int, d_out: int) -> np.ndarray:
    rng = np.random.default_rng(_PROJECTION_SEED + 1009 * d_in + d_out)
    return rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)


def extract_patch_features(
    x: np.ndarray,
    stride: int = 4,
    d_f: int = 128,
    mask: np.ndarray | None = None,
    patch: int = 8,
) -> PatchFeatureSet:
    """Deterministic local descriptors on a regular patch grid.

    Raw window pixels plus local gradients, projected by a fixed random
    matrix to ``d_f`` dimensions.  Labels come from ``mask`` at the patch
    centers (zeros when no mask is given).
    """
    h, w = x.shape[:2]
    if h % stride != 0 or w % stride != 0:
        raise ParameterError(f"stride {stride} does not divide image size {(h, w)}")
    half = patch // 2
    padded = np.pad(x, ((half, half), (half, half), (0, 0)), mode="reflect")
    gy, gx = np.gradient(x.mean(axis=2))
    grad = np.sqrt(gy**2 + gx**2)
    gpad = np.pad(grad, half, mode="reflect")

    centers, raws = [], []
    for iy in range(h // stride):
        cy = iy * stride + stride // 2
        for ix in range(w // stride):
            cx = ix * stride + stride // 2
            win = padded[cy : cy + patch, cx : cx + patch].ravel()
            gwin = gpad[cy : cy + patch, cx : cx + patch].ravel()
            raws.append(np.concatenate([win, gwin]))
            centers.append((cy, cx))
    raws = np.asarray(raws, dtype=np.float64)
    feats = raws @ _projection_matrix(raws.shape[1], d_f)
    centers = np.asarray(centers, dtype=np.int64)
    if mask is not None:
        labels = mask[centers[:, 0], centers[:, 1]].astype(np.int64)
    else:
        labels = np.zeros(len(centers), dtype=np.int64)
    return PatchFeatureSet(
        features=feats.astype(np.float32), centers=centers, labels=labels,
        stride=stride, d_f=d_f,
    )


def train_patch_classifier(
    feats: PatchFeatureSet | tuple[np.ndarray, np.ndarray],
    gamma: float = 1e-4,
    c: float = 1.0,
) -> SVC:
    """RBF-kernel soft-margin classifier; decision scores rank anomaly."""
    if isinstance(feats, PatchFeatureSet):
        x, y = feats.features, feats.labels
    else:
        x, y = feats
    if len(np.unique(y)) < 2:
        raise ParameterError("patch classifier needs both labels present")
    clf = SVC(kernel="rbf", gamma=gamma, C=c)
    clf.fit(x, y)
    return clf


def upsample_scores(grid: np.ndarray, stride: int, hw: tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling of patch-center scores to pixel resolution.

    Coordinates are clamped to the patch-center range so interpolated
    values never exceed the grid maximum (the densest patch center stays
    the argmax).
    """
    h, w = hw
    gys = np.arange(grid.shape[0]) * stride + stride // 2
    gxs = np.arange(grid.shape[1]) * stride + stride // 2
    interp = RegularGridInterpolator((gys, gxs), grid, method="linear")
    ys = np.clip(np.arange(h), gys[0], gys[-1])
    xs = np.clip(np.arange(w), gxs[0], gxs[-1])
    pts = np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1).reshape(-1, 2)
    return interp(pts).reshape(h, w)


@dataclass
class TrialConfig:
    """SVM-harness protocol knobs (desk-scaled from the full protocol)."""

    n_images: int = 20
    n_pos: int = 500
    n_neg: int = 500
    n_trials: int = 5
    gamma: float = 1e-4
    c: float = 1.0
    seed: int = 0
    stride: int = 4
    d_f: int = 128
    fpr_limit: float = DEFAULT_FPR_LIMIT
    k: int = DEFAULT_K

    def __post_init__(self):
        if min(self.n_images, self.n_pos, self.n_neg, self.n_trials) < 1:
            raise ParameterError("trial counts must be positive")


def _as_pairs(gen) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for item in gen:
        if isinstance(item, tuple):
            pairs.append(item)
        else:
            pairs.append((item.image, item.mask))
    return pairs


def score_test_set(
    clf: SVC, bench: ToyBenchmark, cfg: TrialConfig
) -> tuple[np.ndarray, GroundTruth]:
    """Densely score every test image and build the pooled ground truth."""
    scores, gts = [], []
    for img, mask in zip(bench.test_images, bench.test_masks):
        fs = extract_patch_features(img, stride=cfg.stride, d_f=cfg.d_f)
        gh = img.shape[0] // cfg.stride
        gw = img.shape[1] // cfg.stride
        grid = clf.decision_function(fs.features).reshape(gh, gw)
        scores.append(upsample_scores(grid, cfg.stride, img.shape[:2]))
        gts.append(GroundTruth.from_mask(mask))
    return np.concatenate([s.ravel() for s in scores]), GroundTruth.concat(gts)


def trial_report(
    score_maps: list[np.ndarray], masks: list[np.ndarray], cfg: TrialConfig
) -> MetricsReport:
    """Pool per-image score maps and masks into one five-metric report."""
    scores = np.concatenate([np.asarray(s).ravel() for s in score_maps])
    gt = GroundTruth.concat([GroundTruth.from_mask(m) for m in masks])
    return MetricsReport.from_scores(scores, gt, fpr_limit=cfg.fpr_limit, k=cfg.k)


def run_trials(bench: ToyBenchmark, gen, cfg: TrialConfig) -> MetricsReport:
    """The SVM-harness protocol: per trial, sample training images and
    patch features, train the classifier, score the test set, compute all
    five metrics; aggregate mean and stddev over trials."""
    pairs = _as_pairs(gen)
    if not pairs:
        raise ParameterError("no training samples given (use genuine seeds instead)")

    reports = []
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_trials)
    for ss in seeds:
        rng = np.random.default_rng(ss)
        take = min(cfg.n_images, len(pairs))
        idx = rng.choice(len(pairs), size=take, replace=False)

        pos_feats, neg_feats = [], []
        for i in idx:
            img, mask = pairs[i]
            fs = extract_patch_features(img, stride=cfg.stride, d_f=cfg.d_f, mask=mask)
            pos_feats.append(fs.features[fs.labels == 1])
            neg_feats.append(fs.features[fs.labels == 0])
        pos = np.concatenate(pos_feats)
        neg = np.concatenate(neg_feats)
        if len(pos) == 0:
            raise ParameterError("sampled training images contain no defect patches")
        pos = pos[rng.choice(len(pos), size=cfg.n_pos, replace=len(pos) < cfg.n_pos)]
        neg = neg[rng.choice(len(neg), size=cfg.n_neg, replace=len(neg) < cfg.n_neg)]
        x = np.concatenate([pos, neg])
        y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))]).astype(int)

        clf = train_patch_classifier((x, y), gamma=cfg.gamma, c=cfg.c)
        scores, gt = score_test_set(clf, bench, cfg)
        reports.append(
            MetricsReport.from_scores(scores, gt, fpr_limit=cfg.fpr_limit, k=cfg.k)
        )
    return MetricsReport.aggregate(reports)


def cut_paste_dataset(
    n: int,
    ok_images: np.ndarray,
    seed_ng: list[tuple[np.ndarray, np.ndarray]],
    rng: np.random.Generator,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Paste-style baseline: copy seed-defect pixels onto OK images at a
    uniformly random location."""
    out = []
    h, w = ok_images[0].shape[:2]
    for _ in range(n):
        base = ok_images[int(rng.integers(len(ok_images)))].copy()
        src_img, src_mask = seed_ng[int(rng.integers(len(seed_ng)))]
        ys, xs = np.nonzero(src_mask)
        y0, y1 = ys.min(), ys.max() + 1
        x0, x1 = xs.min(), xs.max() + 1
        crop_img = src_img[y0:y1, x0:x1]
        crop_mask = src_mask[y0:y1, x0:x1]
        ph, pw = crop_mask.shape
        oy = int(rng.integers(0, h - ph + 1))
        ox = int(rng.integers(0, w - pw + 1))
        mask = np.zeros((h, w), dtype=np.uint8)
        region = base[oy : oy + ph, ox : ox + pw]
        sel = crop_mask.astype(bool)
        region[sel] = crop_img[sel]
        mask[oy : oy + ph, ox : ox + pw] = crop_mask
        out.append((base, mask))
    return out


# MVTec-style persistence

def _save_png(path: Path, img: np.ndarray) -> None:
    Image.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8)).save(path)


def _load_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def save_benchmark(bench: ToyBenchmark, root) -> Path:
    """Write the benchmark in MVTec-style directory layout."""
    cat = Path(root) / bench.spec.category
    for sub in ("train/good", "test/good", "test/defect",
                "ground_truth/defect", "seed/defect", "seed/ground_truth"):
        (cat / sub).mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(bench.train_ok):
        _save_png(cat / "train/good" / f"{i:03d}.png", img)
    for i, (img, mask) in enumerate(bench.seed_ng):
        _save_png(cat / "seed/defect" / f"{i:03d}.png", img)
        Image.fromarray(mask * 255).save(cat / "seed/ground_truth" / f"{i:03d}_mask.png")
    n_def = bench.spec.n_test_defect
    for i, (img, mask) in enumerate(zip(bench.test_images, bench.test_masks)):
        if i < n_def:
            _save_png(cat / "test/defect" / f"{i:03d}.png", img)
            Image.fromarray(mask * 255).save(
                cat / "ground_truth/defect" / f"{i:03d}_mask.png"
            )
        else:
            _save_png(cat / "test/good" / f"{i - n_def:03d}.png", img)
    meta = {"spec": asdict(bench.spec), "seed": bench.seed,
            "seed_kinds": bench.seed_kinds}
    (cat / "benchmark.json").write_text(json.dumps(meta, indent=2))
    return cat


def load_benchmark(category_dir) -> ToyBenchmark:
    """Load a benchmark saved by :func:`save_benchmark` (images re-quantized
    to 8 bits; the paired clean renders are regenerated from the seed)."""
    cat = Path(category_dir)
    meta = json.loads((cat / "benchmark.json").read_text())
    spec_d = meta["spec"]
    spec_d["defects"] = tuple(spec_d["defects"])
    spec = BenchmarkSpec(**spec_d)

    def load_dir(sub):
        return sorted((cat / sub).glob("*.png"))

    train_ok = np.stack([_load_png(p) for p in load_dir("train/good")])
    seed_ng = []
    for ip, mp in zip(load_dir("seed/defect"), load_dir("seed/ground_truth")):
        seed_ng.append((
            _load_png(ip),
            (np.asarray(Image.open(mp).convert("L")) >= 128).astype(np.uint8),
        ))
    test_images, test_masks = [], []
    for ip, mp in zip(load_dir("test/defect"), load_dir("ground_truth/defect")):
        test_images.append(_load_png(ip))
        test_masks.append(
            (np.asarray(Image.open(mp).convert("L")) >= 128).astype(np.uint8)
        )
    for ip in load_dir("test/good"):
        test_images.append(_load_png(ip))
        test_masks.append(np.zeros(test_images[-1].shape[:2], dtype=np.uint8))
    stacked = np.stack(test_images)
    return ToyBenchmark(
        spec=spec,
        seed=meta["seed"],
        train_ok=train_ok,
        seed_ng=seed_ng,
        seed_kinds=list(meta["seed_kinds"]),
        test_images=stacked,
        test_masks=np.stack(test_masks),
        test_clean=np.zeros_like(stacked),
    )
