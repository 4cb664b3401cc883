"""PSNR / SSIM evaluation and the differentiable SSIM used by the fine loss."""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def rgb_to_y(img):
    """BT.601 studio-swing luma of a [0, 1] RGB image, channel axis at -3."""
    is_np = isinstance(img, np.ndarray)
    x = torch.as_tensor(img)
    if not x.is_floating_point():
        x = x.double()
    if x.shape[-3] != 3:
        raise ValueError(f"expected 3 channels at axis -3, got shape {tuple(x.shape)}")
    x = x.clamp(0.0, 1.0)
    r, g, b = x.unbind(-3)
    y = ((65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0).unsqueeze(-3)
    return y.numpy() if is_np else y


def psnr(a, b, max_val=1.0):
    a = np.asarray(torch.as_tensor(a).detach().cpu().double())
    b = np.asarray(torch.as_tensor(b).detach().cpu().double())
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(max_val**2 / mse))


def _gaussian_window(size, dtype, device):
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * SSIM_SIGMA**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).to(dtype=dtype, device=device)


def ssim(a, b, data_range=1.0, reduce=True, win_size=SSIM_WINDOW):
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5).

    Accepts (C, H, W) or (B, C, H, W) tensors or arrays; channels are treated
    independently and averaged. Only windows fully inside the image count.
    Differentiable in both arguments when given tensors. With
    ``reduce=False`` returns one value per batch element. ``win_size`` only
    needs changing for images smaller than 11 px (the Gaussian keeps sigma 1.5).
    """
    if win_size < 1 or win_size % 2 == 0:
        raise ValueError(f"win_size must be odd and positive, got {win_size}")
    to_float = not isinstance(a, torch.Tensor)
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    if a.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (B, C, H, W), got {tuple(a.shape)}")
    if not a.is_floating_point():
        a, b = a.double(), b.double()
    B, C, H, W = a.shape
    if H < win_size or W < win_size:
        raise ValueError(f"image {H}x{W} smaller than the {win_size}x{win_size} window")

    win = _gaussian_window(win_size, a.dtype, a.device).expand(C, 1, win_size, win_size)

    def filt(x):
        return F.conv2d(x, win, groups=C)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    smap = num / den
    out = smap.mean(dim=(1, 2, 3)) if not reduce else smap.mean()
    if to_float and reduce:
        return float(out)
    return out


def load_image(path):
    """8-bit image file -> (3, H, W) float32 tensor in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(img, path):
    from PIL import Image

    arr = torch.as_tensor(img).detach().cpu().float().clamp(0, 1)
    arr = (arr.permute(1, 2, 0).numpy() * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def list_images(directory):
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # (filename, psnr_db, ssim)
    mean_psnr: float = math.nan
    mean_ssim: float = math.nan

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["filename", "psnr_db", "ssim"])
            for name, p, s in self.rows:
                w.writerow([name, _fmt_psnr(p), f"{s:.6f}"])
            w.writerow(["MEAN", _fmt_psnr(self.mean_psnr), f"{self.mean_ssim:.6f}"])


def _fmt_psnr(v):
    return "inf" if math.isinf(v) else f"{v:.6f}"


def aggregate(rows):
    finite = [p for _, p, _ in rows if math.isfinite(p)]
    n_inf = len(rows) - len(finite)
    if n_inf:
        log.warning("%d image(s) with infinite PSNR excluded from the mean", n_inf)
    if finite:
        mean_psnr = float(np.mean(finite))
    else:
        mean_psnr = math.inf if rows else math.nan
    mean_ssim = float(np.mean([s for _, _, s in rows])) if rows else math.nan
    return EvalReport(rows=list(rows), mean_psnr=mean_psnr, mean_ssim=mean_ssim)


def evaluate_images(pairs, y_channel=False):
    """``pairs``: iterable of (name, pred, gt) (3, H, W) images."""
    rows = []
    for name, pred, gt in pairs:
        if pred.shape != gt.shape:
            raise ValueError(f"{name}: size mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
        pred = torch.as_tensor(pred).double()
        gt = torch.as_tensor(gt).double()
        if y_channel:
            pred, gt = rgb_to_y(pred), rgb_to_y(gt)
        rows.append((name, psnr(pred, gt), ssim(pred, gt)))
    return aggregate(rows)


def evaluate_pairs(pred_dir, gt_dir, y_channel=False):
    pred = {p.name: p for p in list_images(pred_dir)}
    gt = {p.name: p for p in list_images(gt_dir)}
    missing = sorted(set(pred) ^ set(gt))
    if missing:
        raise FileNotFoundError(f"no counterpart for: {', '.join(missing)}")
    return evaluate_images(
        ((name, load_image(pred[name]), load_image(gt[name])) for name in sorted(gt)),
        y_channel=y_channel,
    )
