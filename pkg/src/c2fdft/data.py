"""Paired image corpora: ingestion, synthetic degradations and patch batches."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .metrics import list_images, load_image, save_image

log = logging.getLogger(__name__)

DEGRADATIONS = ("rain", "blur", "noise")

RAIN_DEFAULTS = {"density": 0.02, "length": (9, 15), "angle": (-20.0, 20.0), "intensity": (0.3, 0.8)}


@dataclass
class ImagePair:
    x: torch.Tensor  # clean (3, H, W)
    y: torch.Tensor  # degraded (3, H, W)
    id: str

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise ValueError(f"{self.id}: clean {tuple(self.x.shape)} vs degraded {tuple(self.y.shape)}")
        self.x = self.x.clamp(0, 1)
        self.y = self.y.clamp(0, 1)


@dataclass
class PatchBatch:
    x: torch.Tensor  # (B, 3, p, p)
    y: torch.Tensor
    ids: list
    p: int

    def to(self, device):
        return PatchBatch(self.x.to(device), self.y.to(device), self.ids, self.p)


def ingest_pairs(clean_dir, degraded_dir):
    clean_dir, degraded_dir = Path(clean_dir), Path(degraded_dir)
    for d in (clean_dir, degraded_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    clean = {p.name: p for p in list_images(clean_dir)}
    degraded = {p.name: p for p in list_images(degraded_dir)}
    unpaired = sorted(set(clean) ^ set(degraded))
    if unpaired:
        raise ValueError(f"unpaired files: {', '.join(unpaired)}")
    if not clean:
        log.warning("no images found in %s", clean_dir)
        return []
    pairs = []
    for name in sorted(clean):
        try:
            x, y = load_image(clean[name]), load_image(degraded[name])
        except Exception as exc:  # PIL raises several unrelated types
            raise ValueError(f"cannot decode {name}: {exc}") from exc
        pairs.append(ImagePair(x=x, y=y, id=Path(name).stem))
    return pairs


def line_kernel(length, angle_deg):
    """Normalized line of ``length`` px, ``angle_deg`` from vertical."""
    length = max(int(round(length)), 1)
    size = length if length % 2 else length + 1
    k = np.zeros((size, size))
    c = (size - 1) / 2
    theta = math.radians(angle_deg)
    dy, dx = math.cos(theta), math.sin(theta)
    for s in np.linspace(-(length - 1) / 2, (length - 1) / 2, 4 * length):
        r, col = int(round(c + s * dy)), int(round(c + s * dx))
        k[r, col] = 1.0
    return k / k.sum()


def gaussian_kernel(size, sigma):
    if size == 1:
        return np.ones((1, 1))
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _uniform(rng, v):
    if isinstance(v, (tuple, list)):
        return float(rng.uniform(v[0], v[1]))
    return float(v)


def synth_degrade(x, kind, params=None, seed=0):
    """Degrade a clean (3, H, W) image in [0, 1].

    rain:  density, length, angle (deg from vertical), intensity; tuples are
           sampled uniformly from the seeded generator.
    blur:  kernel ('gaussian' | 'motion'), size, sigma / length, angle.
    noise: sigma.
    """
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    img = torch.as_tensor(x).double().numpy()
    if kind == "noise":
        sigma = float(params.get("sigma", 0.1))
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        out = img + sigma * rng.standard_normal(img.shape)
    elif kind == "blur":
        ktype = params.get("kernel", "gaussian")
        if ktype == "gaussian":
            size = int(params.get("size", 7))
            sigma = float(params.get("sigma", 1.5))
            if size < 1 or size % 2 == 0 or sigma <= 0:
                raise ValueError(f"gaussian blur needs odd size >= 1 and sigma > 0, got {size}, {sigma}")
            k = gaussian_kernel(size, sigma)
        elif ktype == "motion":
            length = _uniform(rng, params.get("length", (5, 11)))
            if length < 1:
                raise ValueError(f"motion length must be >= 1, got {length}")
            k = line_kernel(length, _uniform(rng, params.get("angle", (0.0, 180.0))))
        else:
            raise ValueError(f"unknown blur kernel {ktype!r}")
        out = np.stack([ndimage.convolve(ch, k, mode="reflect") for ch in img])
    elif kind == "rain":
        p = {**RAIN_DEFAULTS, **params}
        density = float(p["density"])
        if not 0 <= density <= 1:
            raise ValueError(f"rain density must be in [0, 1], got {density}")
        length = _uniform(rng, p["length"])
        angle = _uniform(rng, p["angle"])
        intensity = _uniform(rng, p["intensity"])
        if length < 1 or intensity < 0:
            raise ValueError("rain length must be >= 1 and intensity >= 0")
        H, W = img.shape[1:]
        drops = (rng.random((H, W)) < density) * rng.uniform(0.5, 1.0, (H, W))
        streaks = ndimage.convolve(drops, line_kernel(length, angle), mode="constant")
        streaks = streaks / max(streaks.max(), 1e-12)
        out = img + intensity * streaks[None]
    else:
        raise ValueError(f"unknown degradation {kind!r}, expected one of {DEGRADATIONS}")
    return torch.from_numpy(np.clip(out, 0.0, 1.0)).float()


def synthetic_clean_images(n, size=32, seed=0):
    """Smooth color fields with a few edges: stand-ins for clean photos."""
    rng = np.random.default_rng(seed)
    H, W = (size, size) if isinstance(size, int) else size
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    out = []
    for _ in range(n):
        img = np.empty((3, H, W))
        for c in range(3):
            a, b, ph = rng.uniform(-1.5, 1.5, 3)
            fx, fy = rng.uniform(1, 4, 2)
            img[c] = 0.5 + 0.25 * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph) + 0.15 * (a * xx + b * yy)
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0, 1, 2)
            r = rng.uniform(0.1, 0.3)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
            img[:, mask] = rng.uniform(0, 1, (3, 1))
        out.append(torch.from_numpy(np.clip(img, 0, 1)).float())
    return out


def write_corpus(root, clean_images, kind, params=None, seed=0, ids=None):
    """Write ``<root>/clean``, ``<root>/degraded`` and ``manifest.txt``.

    The degradation runs on the float image; both files are then quantized
    to 8 bits. Image i uses seed ``seed + i``.
    """
    root = Path(root)
    (root / "clean").mkdir(parents=True, exist_ok=True)
    (root / "degraded").mkdir(parents=True, exist_ok=True)
    ids = ids or [f"{i:04d}" for i in range(len(clean_images))]
    lines = [f"# kind={kind} params={dict(params or {})} seed={seed}"]
    for i, (img_id, x) in enumerate(zip(ids, clean_images)):
        y = synth_degrade(x, kind, params, seed=seed + i)
        save_image(x, root / "clean" / f"{img_id}.png")
        save_image(y, root / "degraded" / f"{img_id}.png")
        lines.append(f"{img_id}\t{kind}\t{dict(params or {})}\tseed={seed + i}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return ids


def _augment(img, flip, k):
    if flip:
        img = img.flip(-1)
    return torch.rot90(img, k, dims=(-2, -1))


def random_patch(pair, p, rng, augment=False):
    """Same p x p window (and same flip / rot90) from clean and degraded."""
    _, H, W = pair.x.shape
    if H < p or W < p:
        raise ValueError(f"{pair.id}: image {H}x{W} smaller than patch {p}")
    i = int(rng.integers(0, H - p + 1))
    j = int(rng.integers(0, W - p + 1))
    xp = pair.x[:, i : i + p, j : j + p]
    yp = pair.y[:, i : i + p, j : j + p]
    if augment:
        flip, k = bool(rng.integers(0, 2)), int(rng.integers(0, 4))
        xp, yp = _augment(xp, flip, k), _augment(yp, flip, k)
    return xp, yp


def epoch_order(n, seed, epoch):
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def make_batch(pairs, p, batch_size, seed, iteration, augment=True):
    """Batch for one training iteration; a pure function of (seed, iteration)."""
    if not pairs:
        raise ValueError("no training pairs")
    if p % 8:
        raise ValueError(f"patch size {p} not divisible by 8")
    rng = np.random.default_rng([int(seed), int(iteration), 1])
    n = len(pairs)
    idx = rng.permutation(n)[:batch_size] if batch_size <= n else rng.integers(0, n, batch_size)
    xs, ys = [], []
    for i in idx:
        xp, yp = random_patch(pairs[i], p, rng, augment=augment)
        xs.append(xp)
        ys.append(yp)
    return PatchBatch(torch.stack(xs), torch.stack(ys), [pairs[i].id for i in idx], p)
