"""Pure-numpy versions of the compiled kernels (same signatures, same results)."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def affine_warp(images, coeffs, fill):
    """Bilinear resampling of NHWC ``images``.

    Output pixel ``(y, x)`` of image ``n`` reads the source location
    ``(c0*y + c1*x + c2, c3*y + c4*x + c5)`` where ``c = coeffs[n]``.
    Taps outside the image read ``fill``.
    """
    images = np.ascontiguousarray(images, dtype=np.float64)
    coeffs = np.ascontiguousarray(coeffs, dtype=np.float64)
    n_img, H, W, C = images.shape
    if coeffs.shape != (n_img, 6):
        raise ValueError("coeffs must have shape (N, 6)")
    ys = np.arange(H, dtype=np.float64)[None, :, None]
    xs = np.arange(W, dtype=np.float64)[None, None, :]
    c = [coeffs[:, i][:, None, None] for i in range(6)]
    sy = c[0] * ys + c[1] * xs + c[2]
    sx = c[3] * ys + c[4] * xs + c[5]
    y0f = np.floor(sy)
    x0f = np.floor(sx)
    fy = (sy - y0f)[..., None]
    fx = (sx - x0f)[..., None]
    y0 = y0f.astype(np.int64)
    x0 = x0f.astype(np.int64)
    nidx = np.arange(n_img)[:, None, None]

    def tap(yy, xx):
        ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        vals = images[nidx, np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)]
        return np.where(ok[..., None], vals, fill)

    p00 = tap(y0, x0)
    p01 = tap(y0, x0 + 1)
    p10 = tap(y0 + 1, x0)
    p11 = tap(y0 + 1, x0 + 1)
    top = (1.0 - fx) * p00 + fx * p01
    bot = (1.0 - fx) * p10 + fx * p11
    return (1.0 - fy) * top + fy * bot


def im2col3x3(x):
    """(N, C, H, W) -> (N*H*W, C*9) patch matrix for a stride-1, pad-1 3x3 conv."""
    x = np.asarray(x, dtype=np.float64)
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N, C, H, W, 3, 3
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5).reshape(N * H * W, C * 9))


def col2im3x3(cols, N, C, H, W):
    cols = np.asarray(cols, dtype=np.float64)
    if cols.shape != (N * H * W, C * 9):
        raise ValueError("cols shape does not match (N*H*W, C*9)")
    patches = cols.reshape(N, H, W, C, 3, 3).transpose(0, 3, 4, 5, 1, 2)  # N, C, ky, kx, H, W
    padded = np.zeros((N, C, H + 2, W + 2))
    for ky in range(3):
        for kx in range(3):
            padded[:, :, ky:ky + H, kx:kx + W] += patches[:, :, ky, kx]
    return np.ascontiguousarray(padded[:, :, 1:H + 1, 1:W + 1])
