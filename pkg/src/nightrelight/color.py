"""Colorimetric constants and conversions."""

import numpy as np

D65_XY = (0.31270, 0.32900)
D50_XY = (0.34570, 0.35850)
E_XY = (1.0 / 3.0, 1.0 / 3.0)
SRGB_PRIMARIES_XY = ((0.640, 0.330), (0.300, 0.600), (0.150, 0.060))

BRADFORD = np.array([
    [0.8951, 0.2664, -0.1614],
    [-0.7502, 1.7135, 0.0367],
    [0.0389, -0.0685, 1.0296],
])


def xy_to_XYZ(xy, Y: float = 1.0) -> np.ndarray:
    x, y = xy
    if y <= 0:
        raise ValueError(f"invalid chromaticity {xy}")
    return np.array([Y * x / y, Y, Y * (1.0 - x - y) / y])


def XYZ_to_xy(xyz) -> tuple[float, float]:
    X, Y, Z = np.asarray(xyz, dtype=np.float64)
    s = X + Y + Z
    if s == 0:
        raise ValueError("zero XYZ has no chromaticity")
    return float(X / s), float(Y / s)


def rgb_to_xyz_matrix(primaries=SRGB_PRIMARIES_XY, white=D65_XY) -> np.ndarray:
    """RGB->XYZ matrix whose RGB (1, 1, 1) maps to the white point with Y = 1."""
    P = np.stack([xy_to_XYZ(p) for p in primaries], axis=1)
    S = np.linalg.solve(P, xy_to_XYZ(white))
    return P * S[None, :]


SRGB_TO_XYZ = rgb_to_xyz_matrix()
XYZ_TO_SRGB = np.linalg.inv(SRGB_TO_XYZ)


def albedo_to_xyz_reflectance(albedo_rgb: np.ndarray) -> np.ndarray:
    """Per-channel XYZ reflectance of a linear-sRGB albedo, white -> (1, 1, 1)."""
    a = np.asarray(albedo_rgb, dtype=np.float64)
    return (a @ SRGB_TO_XYZ.T) / SRGB_TO_XYZ.sum(axis=1)
