"""
Local Features
==============
Harris corners with 256-bit binary intensity-comparison descriptors.

Detector: Sobel gradients, Gaussian-weighted structure tensor (sigma 1.5),
response det - 0.04 tr^2, 7x7 non-maximum suppression. Peaks above
max(abs_threshold, rel_threshold * max response) are kept; when fewer than
MIN_KEYPOINTS pass, the strongest peaks above abs_threshold fill up to that
count. Keypoints closer than 16 px to the border are dropped so every
descriptor sample stays inside the image.

Descriptor: 256 point pairs inside a 31x31 patch, drawn once from an
isotropic Gaussian (sigma = 31/5) with a fixed seed and clipped to the patch.
Bit k is 1 iff I(p1_k) < I(p2_k) on the Gaussian-smoothed image. Bits are
packed big-endian into 32 bytes.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from src.utils.errors import InputError
from src.utils.log import progress_enabled

logger = logging.getLogger(__name__)

MIN_IMAGE_SIDE = 64
DESCRIPTOR_BITS = 256
DESCRIPTOR_BYTES = DESCRIPTOR_BITS // 8
PATCH_SIZE = 31
BORDER = 16
HARRIS_K = 0.04
TENSOR_SIGMA = 1.5
SMOOTH_SIGMA = 2.0
NMS_SIZE = 7
MIN_KEYPOINTS = 100
MAX_KEYPOINTS = 300
ABS_THRESHOLD = 1e-6
REL_THRESHOLD = 0.01
PATTERN_SEED = 20240611


def _sampling_pattern() -> np.ndarray:
    """(256, 4) integer offsets (dx1, dy1, dx2, dy2)."""
    rng = np.random.default_rng(PATTERN_SEED)
    half = PATCH_SIZE // 2
    pts = np.rint(rng.normal(0.0, PATCH_SIZE / 5.0, size=(DESCRIPTOR_BITS, 4)))
    pattern = np.clip(pts, -half, half).astype(np.intp)
    pattern.setflags(write=False)
    return pattern


PATTERN = _sampling_pattern()

_POPCOUNT = np.array([bin(b).count("1") for b in range(256)], dtype=np.uint16)


@dataclass(frozen=True, eq=False)
class Features:
    """Keypoints (x, y) in pixels, their responses and packed descriptors."""

    keypoints: np.ndarray  # (n, 2) int
    responses: np.ndarray  # (n,)
    descriptors: np.ndarray  # (n, 32) uint8

    def __post_init__(self):
        n = len(self.keypoints)
        if self.descriptors.shape != (n, DESCRIPTOR_BYTES) or self.descriptors.dtype != np.uint8:
            raise InputError(f"descriptors must be ({n}, {DESCRIPTOR_BYTES}) uint8")
        for a in (self.keypoints, self.responses, self.descriptors):
            a.setflags(write=False)

    def __len__(self) -> int:
        return len(self.keypoints)

    @classmethod
    def empty(cls) -> "Features":
        return cls(np.zeros((0, 2), dtype=np.intp), np.zeros(0), np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8))


def _as_float_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 2:
        raise InputError(f"expected a 2-D grayscale image, got shape {img.shape}")
    h, w = img.shape
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        raise InputError(f"image is {w}x{h}, need at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}")
    if img.dtype == np.uint8:
        return img.astype(float) / 255.0
    if img.dtype == np.uint16:
        return img.astype(float) / 65535.0
    img = img.astype(float)
    if not np.all(np.isfinite(img)):
        raise InputError("image contains non-finite values")
    return img


def harris_response(img: np.ndarray) -> np.ndarray:
    ix = ndimage.sobel(img, axis=1, mode="reflect")
    iy = ndimage.sobel(img, axis=0, mode="reflect")
    sxx = ndimage.gaussian_filter(ix * ix, TENSOR_SIGMA)
    syy = ndimage.gaussian_filter(iy * iy, TENSOR_SIGMA)
    sxy = ndimage.gaussian_filter(ix * iy, TENSOR_SIGMA)
    return sxx * syy - sxy * sxy - HARRIS_K * (sxx + syy) ** 2


def detect_corners(
    img: np.ndarray,
    abs_threshold: float = ABS_THRESHOLD,
    rel_threshold: float = REL_THRESHOLD,
    max_keypoints: int = MAX_KEYPOINTS,
    min_keypoints: int = MIN_KEYPOINTS,
) -> tuple[np.ndarray, np.ndarray]:
    R = harris_response(img)
    peaks = (R == ndimage.maximum_filter(R, size=NMS_SIZE, mode="nearest")) & (R > abs_threshold)
    peaks[:BORDER, :] = False
    peaks[-BORDER:, :] = False
    peaks[:, :BORDER] = False
    peaks[:, -BORDER:] = False
    ys, xs = np.nonzero(peaks)
    resp = R[ys, xs]
    # strongest first; ties by row then column
    order = np.lexsort((xs, ys, -resp))
    strong = int(np.count_nonzero(resp > rel_threshold * float(R.max())))
    order = order[: min(max(strong, min_keypoints), max_keypoints)]
    return np.column_stack([xs[order], ys[order]]).astype(np.intp), resp[order]


def describe(img: np.ndarray, keypoints: np.ndarray) -> np.ndarray:
    smooth = ndimage.gaussian_filter(img, SMOOTH_SIGMA)
    if len(keypoints) == 0:
        return np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    x = keypoints[:, 0][:, None]
    y = keypoints[:, 1][:, None]
    a = smooth[y + PATTERN[:, 1], x + PATTERN[:, 0]]
    b = smooth[y + PATTERN[:, 3], x + PATTERN[:, 2]]
    return np.packbits(a < b, axis=1)


def extract_features(
    image: np.ndarray, abs_threshold: float = ABS_THRESHOLD, rel_threshold: float = REL_THRESHOLD
) -> Features:
    img = _as_float_image(image)
    kps, resp = detect_corners(img, abs_threshold, rel_threshold)
    return Features(kps, resp, describe(img, kps))


def extract_all(images: Sequence[np.ndarray], threads: int = 1) -> list[Features]:
    bar = tqdm(total=len(images), desc="features", unit="img", disable=not progress_enabled(), leave=False)
    try:
        if threads <= 1:
            out = []
            for img in images:
                out.append(extract_features(img))
                bar.update()
            return out
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = []
            for f in pool.map(extract_features, images):
                out.append(f)
                bar.update()
            return out
    finally:
        bar.close()


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between packed descriptor rows, (len(a), len(b))."""
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    return _POPCOUNT[np.bitwise_xor(a[:, None, :], b[None, :, :])].sum(axis=2, dtype=np.int64)
