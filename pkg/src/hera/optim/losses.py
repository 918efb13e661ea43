"""Photometric losses: L1, SSIM (11x11 Gaussian window) and PSNR, with adjoints."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d

from ..errors import SizeMismatch

WINDOW = 11
SIGMA = 1.5
K1 = 0.01
K2 = 0.03
DEFAULT_SSIM_WEIGHT = 0.2


def gaussian_window(size=WINDOW, sigma=SIGMA):
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(img, g):
    # zero-padded "same" filtering per channel; symmetric kernel so it is self-adjoint
    out = convolve1d(img, g, axis=0, mode="constant", cval=0.0)
    return convolve1d(out, g, axis=1, mode="constant", cval=0.0)


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise SizeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def ssim_map(x, y):
    x, y = _check(x, y)
    g = gaussian_window()
    c1 = K1**2
    c2 = K2**2
    mx, my = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mx * mx
    syy = _filter(y * y, g) - my * my
    sxy = _filter(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(x, y) -> float:
    """Mean SSIM over all pixels and channels (data range 1)."""
    return float(ssim_map(x, y).mean())


def ssim_grad(x, y):
    """d(mean SSIM)/dx."""
    x, y = _check(x, y)
    squeeze = np.asarray(x).shape != x.shape
    g = gaussian_window()
    c1 = K1**2
    c2 = K2**2
    mx, my = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mx * mx
    syy = _filter(y * y, g) - my * my
    sxy = _filter(x * y, g) - mx * my
    A1 = 2 * mx * my + c1
    A2 = 2 * sxy + c2
    B1 = mx * mx + my * my + c1
    B2 = sxx + syy + c2
    S = A1 * A2 / (B1 * B2)
    inv_n = 1.0 / x.size
    d_mx = inv_n * (2 * my * A2 / (B1 * B2) - 2 * mx * S / B1)
    d_sxx = inv_n * (-S / B2)
    d_sxy = inv_n * (2 * A1 / (B1 * B2))
    # sxx = f(x^2) - mx^2, sxy = f(xy) - mx my
    d_mx_total = d_mx - 2 * mx * d_sxx - my * d_sxy
    grad = _filter(d_mx_total, g) + 2 * x * _filter(d_sxx, g) + y * _filter(d_sxy, g)
    return grad[..., 0] if squeeze else grad


def l1_loss(x, y) -> float:
    x, y = _check(x, y)
    return float(np.abs(x - y).mean())


def photometric_loss(render, target, lam_ssim=DEFAULT_SSIM_WEIGHT) -> float:
    """(1 - w) * L1 + w * (1 - SSIM)."""
    loss = (1.0 - lam_ssim) * l1_loss(render, target)
    if lam_ssim:
        loss += lam_ssim * (1.0 - ssim(render, target))
    return loss


def photometric_loss_grad(render, target, lam_ssim=DEFAULT_SSIM_WEIGHT):
    """Loss value and its gradient w.r.t. ``render``."""
    x, y = _check(render, target)
    loss = (1.0 - lam_ssim) * float(np.abs(x - y).mean())
    grad = (1.0 - lam_ssim) * np.sign(x - y) / x.size
    if lam_ssim:
        loss += lam_ssim * (1.0 - ssim(x, y))
        grad = grad - lam_ssim * ssim_grad(x, y)
    return loss, grad.reshape(np.shape(render))


def mse(x, y) -> float:
    x, y = _check(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; +inf for identical images."""
    m = mse(x, y)
    if m == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / m))
