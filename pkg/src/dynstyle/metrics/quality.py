"""Full-reference (SSIM, PSNR) and no-reference (UIQM) image quality."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
UIQM_COEF = (0.0282, 0.2953, 3.5753)
UIQM_BLOCK = 8


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _gauss1d(n=SSIM_WIN, sigma=SSIM_SIGMA):
    x = np.arange(n) - (n - 1) / 2
    k = np.exp(-x * x / (2 * sigma * sigma))
    return k / k.sum()


def _filter_valid(x, k):
    n = len(k)
    y = sliding_window_view(x, n, axis=0) @ k
    return sliding_window_view(y, n, axis=1) @ k


def ssim(a, b) -> float:
    """Mean SSIM over valid 11x11 windows and channels (dynamic range 1)."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WIN:
        raise ValueError(f"ssim needs images of at least {SSIM_WIN}x{SSIM_WIN}")
    c1, c2 = K1 ** 2, K2 ** 2
    k = _gauss1d()
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, k), _filter_valid(y, k)
        sxx = _filter_valid(x * x, k) - mx * mx
        syy = _filter_valid(y * y, k) - my * my
        sxy = _filter_valid(x * y, k) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(num / den)
    return float(np.mean(vals))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for range-1 images; identical inputs give +inf."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


# ---------------------------------------------------------------------------
# UIQM


@dataclass(frozen=True)
class UiqmResult:
    uiqm: float
    uicm: float
    uism: float
    uiconm: float


def _trimmed_mean(x, alpha_l=0.1, alpha_r=0.1):
    x = np.sort(x)
    k = len(x)
    lo = int(np.ceil(alpha_l * k))
    hi = int(np.floor(alpha_r * k))
    return float(np.sum(x[lo:k - hi])) / (k - lo - hi)


def _uicm(img):
    r, g, b = (img[..., i].ravel() for i in range(3))
    rg = r - g
    yb = 0.5 * (r + g) - b
    mu_rg, mu_yb = _trimmed_mean(rg), _trimmed_mean(yb)
    s_rg = float(np.mean((rg - mu_rg) ** 2))
    s_yb = float(np.mean((yb - mu_yb) ** 2))
    return -0.0268 * np.hypot(mu_rg, mu_yb) + 0.1586 * np.sqrt(s_rg + s_yb)


def _blocks(x, size):
    h, w = (x.shape[0] // size) * size, (x.shape[1] // size) * size
    x = x[:h, :w]
    return x.reshape(h // size, size, w // size, size, *x.shape[2:]).swapaxes(1, 2).reshape(
        h // size, w // size, -1)


def _eme(x, size):
    blk = _blocks(x, size)
    mx, mn = blk.max(axis=2), blk.min(axis=2)
    return 2.0 / (blk.shape[0] * blk.shape[1]) * float(np.sum(np.log((mx + 1.0) / (mn + 1.0))))


def _sobel_mag(ch):
    mag = np.hypot(ndimage.sobel(ch, 0), ndimage.sobel(ch, 1))
    peak = mag.max()
    return mag * (255.0 / peak) if peak > 0 else mag


def _uism(img, size):
    lam = (0.299, 0.587, 0.114)
    return sum(l * _eme(_sobel_mag(img[..., i]) * img[..., i], size) for i, l in enumerate(lam))


def _uiconm(img, size):
    blk = _blocks(img, size)
    mx, mn = blk.max(axis=2), blk.min(axis=2)
    top, bot = mx - mn, mx + mn
    ok = (top > 0) & (bot > 0)
    r = np.where(ok, top / np.where(ok, bot, 1.0), 1.0)
    return -1.0 / (blk.shape[0] * blk.shape[1]) * float(np.sum(np.where(ok, r * np.log(r), 0.0)))


def uiqm(image) -> UiqmResult:
    """Colorfulness/sharpness/contrast composite on the 0-255 scale with 8x8 blocks."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"uiqm expects an (H, W, 3) RGB image, got {img.shape}")
    if min(img.shape[:2]) < UIQM_BLOCK:
        raise ValueError(f"uiqm needs images of at least {UIQM_BLOCK}x{UIQM_BLOCK}")
    img = img * 255.0
    cm, sm, conm = _uicm(img), _uism(img, UIQM_BLOCK), _uiconm(img, UIQM_BLOCK)
    c1, c2, c3 = UIQM_COEF
    return UiqmResult(float(c1 * cm + c2 * sm + c3 * conm) + 0.0, float(cm) + 0.0, float(sm) + 0.0, float(conm) + 0.0)
