"""Pixel-resampling kernels used by preprocessing, augmentation and Grad-CAM.

Every kernel has a numba-compiled version and a vectorized numpy version
with identical semantics.  The numba path is used when numba imports and
``DENTAGE_DISABLE_NUMBA`` is unset (or ``0``); the numpy path is always
importable so the two can be compared directly.

Coordinates follow the pixel-center convention: pixel ``(i, j)`` sits at
``x = j, y = i``.  An affine map is a 2x3 matrix taking *output* coordinates
to *source* coordinates (the inverse warp).
"""

from __future__ import annotations

import os

import numpy as np

FILL_NEAREST = 0
FILL_CONSTANT = 1

_disabled = os.environ.get("DENTAGE_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError("numba disabled by DENTAGE_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"


def warp_affine_numpy(image, matrix, out_h, out_w, fill_mode=FILL_NEAREST, cval=0.0):
    """Bilinear inverse-affine warp of an (H, W, C) float32 image."""
    h, w, c = image.shape
    m = np.asarray(matrix, dtype=np.float64)
    ys, xs = np.meshgrid(np.arange(out_h, dtype=np.float64), np.arange(out_w, dtype=np.float64), indexing="ij")
    sx = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    sy = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    if fill_mode == FILL_NEAREST:
        sx = np.clip(sx, 0.0, w - 1.0)
        sy = np.clip(sy, 0.0, h - 1.0)
    x0f = np.floor(sx)
    y0f = np.floor(sy)
    fx = (sx - x0f)[..., None]
    fy = (sy - y0f)[..., None]
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1

    def tap(yy, xx):
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = image[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)].astype(np.float64)
        if fill_mode == FILL_CONSTANT:
            vals = np.where(inside[..., None], vals, cval)
        return vals

    v00 = tap(y0, x0)
    v01 = tap(y0, x1)
    v10 = tap(y1, x0)
    v11 = tap(y1, x1)
    top = v00 * (1.0 - fx) + v01 * fx
    bottom = v10 * (1.0 - fx) + v11 * fx
    out = top * (1.0 - fy) + bottom * fy
    return out.astype(np.float32)


if HAS_NUMBA:

    @njit(cache=True, nogil=True)
    def _warp_affine_nb(image, m, out_h, out_w, fill_mode, cval):
        h, w, c = image.shape
        out = np.empty((out_h, out_w, c), dtype=np.float32)
        for i in range(out_h):
            for j in range(out_w):
                sx = m[0, 0] * j + m[0, 1] * i + m[0, 2]
                sy = m[1, 0] * j + m[1, 1] * i + m[1, 2]
                if fill_mode == 0:
                    sx = min(max(sx, 0.0), w - 1.0)
                    sy = min(max(sy, 0.0), h - 1.0)
                x0f = np.floor(sx)
                y0f = np.floor(sy)
                fx = sx - x0f
                fy = sy - y0f
                x0 = int(x0f)
                y0 = int(y0f)
                for k in range(c):
                    acc = 0.0
                    for dy in range(2):
                        yy = y0 + dy
                        wy = fy if dy == 1 else 1.0 - fy
                        for dx in range(2):
                            xx = x0 + dx
                            wx = fx if dx == 1 else 1.0 - fx
                            if 0 <= yy < h and 0 <= xx < w:
                                v = np.float64(image[yy, xx, k])
                            elif fill_mode == 0:
                                v = np.float64(image[min(max(yy, 0), h - 1), min(max(xx, 0), w - 1), k])
                            else:
                                v = cval
                            acc += v * wx * wy
                    out[i, j, k] = acc
        return out

    def warp_affine_numba(image, matrix, out_h, out_w, fill_mode=FILL_NEAREST, cval=0.0):
        """Numba build of :func:`warp_affine_numpy`."""
        img = np.ascontiguousarray(image, dtype=np.float32)
        m = np.ascontiguousarray(matrix, dtype=np.float64)
        return _warp_affine_nb(img, m, int(out_h), int(out_w), int(fill_mode), float(cval))

    warp_affine = warp_affine_numba
else:
    warp_affine_numba = None
    warp_affine = warp_affine_numpy


def resize_matrix(in_h, in_w, out_h, out_w):
    """Inverse map for a half-pixel-centered resize (the cv2/torch ``align_corners=False`` rule)."""
    ax = in_w / out_w
    ay = in_h / out_h
    return np.array([[ax, 0.0, 0.5 * ax - 0.5], [0.0, ay, 0.5 * ay - 0.5]])


def resize_bilinear(image, out_h, out_w, backend=None):
    """Bilinear resize of an (H, W) or (H, W, C) array, edges clamped."""
    arr = np.asarray(image, dtype=np.float32)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[..., None]
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        out = arr.copy()
    else:
        fn = _pick(backend)
        out = fn(arr, resize_matrix(h, w, out_h, out_w), out_h, out_w, FILL_NEAREST, 0.0)
    return out[..., 0] if squeeze else out


def _pick(backend):
    if backend is None:
        return warp_affine
    if backend == "numpy":
        return warp_affine_numpy
    if backend == "numba":
        if warp_affine_numba is None:
            raise RuntimeError("numba backend requested but numba is unavailable or disabled")
        return warp_affine_numba
    raise ValueError(f"unknown backend {backend!r}")
