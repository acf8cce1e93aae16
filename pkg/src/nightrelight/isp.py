"""Camera-style post-processing of the linear XYZ render.

Stage order: exposure, fog glare, Bradford adaptation, sRGB encoding with
gamma, then signal-dependent Gaussian noise on the display-referred image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .color import BRADFORD, D65_XY, E_XY, XYZ_TO_SRGB, xy_to_XYZ


@dataclass
class GlareConfig:
    threshold: float = 1.0  # luminance Y after exposure
    sigmas: tuple[float, float, float] = (1.5, 5.0, 15.0)  # px
    weights: tuple[float, float, float] = (0.08, 0.04, 0.02)


@dataclass
class IspConfig:
    exposure_stops: float = 3.25
    gamma: float = 2.2
    src_white: tuple[float, float] = E_XY
    dst_white: tuple[float, float] = D65_XY
    glare: GlareConfig = field(default_factory=GlareConfig)
    noise_a: float = 0.01  # artifact default
    noise_b: float = 0.0005  # artifact default
    seed: int = 0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.noise_a < 0 or self.noise_b < 0:
            raise ValueError("noise coefficients must be non-negative")
        if isinstance(self.glare, dict):
            self.glare = GlareConfig(**self.glare)
        if any(w < 0 for w in self.glare.weights):
            raise ValueError("glare weights must be non-negative")


def apply_exposure(img: np.ndarray, stops: float) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) * 2.0**stops


def bradford_matrix(src_white, dst_white) -> np.ndarray:
    """3x3 XYZ->XYZ adaptation matrix between two white chromaticities."""
    src = BRADFORD @ xy_to_XYZ(src_white)
    dst = BRADFORD @ xy_to_XYZ(dst_white)
    if np.any(np.abs(src) < 1e-12):
        raise ValueError("degenerate source white (zero cone response)")
    return np.linalg.inv(BRADFORD) @ np.diag(dst / src) @ BRADFORD


def bradford_adapt(img: np.ndarray, src_white, dst_white) -> np.ndarray:
    M = bradford_matrix(src_white, dst_white)
    return np.asarray(img, dtype=np.float64) @ M.T


def encode_gamma(linear_rgb: np.ndarray, gamma: float) -> np.ndarray:
    return np.clip(linear_rgb, 0.0, 1.0) ** (1.0 / gamma)


def quantize8(v: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8, rounding halves up."""
    return np.floor(np.clip(v, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def xyz_to_srgb_gamma(img: np.ndarray, gamma: float = 2.2) -> np.ndarray:
    """Linear XYZ (D65-referred) to gamma-encoded 8-bit sRGB."""
    rgb = np.asarray(img, dtype=np.float64) @ XYZ_TO_SRGB.T
    return quantize8(encode_gamma(rgb, gamma))


def fog_glare(img: np.ndarray, cfg: GlareConfig) -> np.ndarray:
    """Add a halo around bright pixels.

    Pixels whose Y exceeds the threshold are blurred with three normalized
    Gaussians and added back with the configured weights. Light blurred past
    the frame edge is dropped.
    """
    img = np.asarray(img, dtype=np.float64)
    if not any(cfg.weights):
        return img.copy()
    bright = img * (img[..., 1:2] > cfg.threshold)
    if not bright.any():
        return img.copy()
    out = img.copy()
    for sigma, w in zip(cfg.sigmas, cfg.weights):
        if w == 0:
            continue
        for c in range(img.shape[2]):
            out[..., c] += w * gaussian_filter(bright[..., c], sigma, mode="constant", truncate=4.0)
    return out


def add_noise(img: np.ndarray, a_n: float, b_n: float, seed: int, clip: bool = True) -> np.ndarray:
    """Heteroscedastic Gaussian noise with variance a_n * I + b_n per value.

    Normals come from a Philox stream keyed by ``seed``; the stream is
    consumed in raster order, so one seed always yields the same noise field.
    """
    if a_n < 0 or b_n < 0:
        raise ValueError("noise coefficients must be non-negative")
    img = np.asarray(img, dtype=np.float64)
    if a_n == 0 and b_n == 0:
        return img.copy()
    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))
    std = np.sqrt(a_n * np.clip(img, 0.0, None) + b_n)
    out = img + std * rng.standard_normal(img.shape)
    return np.clip(out, 0.0, 1.0) if clip else out


def run_isp(xyz: np.ndarray, cfg: IspConfig, post_effects: bool = True) -> np.ndarray:
    """Full chain from linear XYZ to the final 8-bit sRGB image."""
    img = apply_exposure(xyz, cfg.exposure_stops)
    if post_effects:
        img = fog_glare(img, cfg.glare)
    img = bradford_adapt(img, cfg.src_white, cfg.dst_white)
    rgb8 = xyz_to_srgb_gamma(img, cfg.gamma)
    if post_effects and (cfg.noise_a > 0 or cfg.noise_b > 0):
        rgb8 = quantize8(add_noise(rgb8 / 255.0, cfg.noise_a, cfg.noise_b, cfg.seed))
    return rgb8
