"""Independent reference implementations used as test oracles.

Everything here is written as plainly as possible (explicit loops, no shared
code with the library) so it can serve as the authority the optimized paths
are checked against.
"""

import math

import numpy as np


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation with 7 nested loops."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    y = np.zeros((n, o, ho, wo), dtype=np.float64)
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[ni, ci, yi * stride + u, xi * stride + v] * w[oi, ci, u, v]
                    y[ni, oi, yi, xi] = acc + (b[oi] if b is not None else 0.0)
    return y


def naive_depthwise_conv2d(x, w, stride=1, padding=0):
    n, c, h, wd = x.shape
    _, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    y = np.zeros((n, c, ho, wo), dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[ni, ci, yi * stride + u, xi * stride + v] * w[ci, 0, u, v]
                    y[ni, ci, yi, xi] = acc
    return y


def naive_pool2d(x, mode, window, stride):
    n, c, h, wd = x.shape
    ho = (h - window) // stride + 1
    wo = (wd - window) // stride + 1
    y = np.zeros((n, c, ho, wo), dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            for yi in range(ho):
                for xi in range(wo):
                    patch = x[ni, ci, yi * stride:yi * stride + window,
                              xi * stride:xi * stride + window]
                    y[ni, ci, yi, xi] = patch.max() if mode == "max" else patch.mean()
    return y


def direct_gaussian_kernel(size, sigma):
    r = size // 2
    k = np.zeros((size, size), dtype=np.float64)
    for i in range(size):
        for j in range(size):
            k[i, j] = math.exp(-((i - r) ** 2 + (j - r) ** 2) / (2 * sigma * sigma))
    return k / k.sum()


def direct_blur_channel(channel, kernel):
    """Replicate-border convolution of one uint8 channel, loops only."""
    h, w = channel.shape
    size = kernel.shape[0]
    r = size // 2
    out = np.zeros((h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for u in range(size):
                for v in range(size):
                    yy = min(max(y + u - r, 0), h - 1)
                    xx = min(max(x + v - r, 0), w - 1)
                    acc += float(channel[yy, xx]) * kernel[u, v]
            out[y, x] = acc
    return out


# --- reference Canny stages -------------------------------------------------
# Conventions (shared contract with the implementation under test):
#   * grayscale via Rec.601 weights 0.299/0.587/0.114, kept as float
#   * 3x3 Sobel with replicate borders, L2 magnitude
#   * direction sectors of 45 degrees; NMS keeps m > before and m >= after
#   * image-border pixels are suppressed
#   * hysteresis floods from strong pixels through 8-connected weak pixels


def reference_gray(pixels):
    if pixels.ndim == 2 or pixels.shape[2] == 1:
        return pixels.reshape(pixels.shape[0], pixels.shape[1]).astype(np.float64)
    p = pixels.astype(np.float64)
    return 0.299 * p[:, :, 0] + 0.587 * p[:, :, 1] + 0.114 * p[:, :, 2]


def reference_sobel(gray):
    h, w = gray.shape
    gx = np.zeros((h, w), dtype=np.float64)
    gy = np.zeros((h, w), dtype=np.float64)
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    ky = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]
    for y in range(h):
        for x in range(w):
            ax = 0.0
            ay = 0.0
            for u in range(3):
                for v in range(3):
                    yy = min(max(y + u - 1, 0), h - 1)
                    xx = min(max(x + v - 1, 0), w - 1)
                    ax += gray[yy, xx] * kx[u][v]
                    ay += gray[yy, xx] * ky[u][v]
            gx[y, x] = ax
            gy[y, x] = ay
    return gx, gy


def _sector(gx, gy):
    theta = math.degrees(math.atan2(gy, gx)) % 180.0
    if theta < 22.5 or theta >= 157.5:
        return 0
    if theta < 67.5:
        return 1
    if theta < 112.5:
        return 2
    return 3


_NEIGHBORS = {
    0: ((0, -1), (0, 1)),
    1: ((-1, -1), (1, 1)),
    2: ((-1, 0), (1, 0)),
    3: ((-1, 1), (1, -1)),
}


def reference_nms(gx, gy, mag):
    h, w = mag.shape
    keep = np.zeros((h, w), dtype=bool)
    for y in range(1, h - 1):
        for x in range(1, w - 1):
            if mag[y, x] == 0:
                continue
            (dy1, dx1), (dy2, dx2) = _NEIGHBORS[_sector(gx[y, x], gy[y, x])]
            before = mag[y + dy1, x + dx1]
            after = mag[y + dy2, x + dx2]
            if mag[y, x] > before and mag[y, x] >= after:
                keep[y, x] = True
    return keep


def reference_hysteresis(mag, keep, low, high):
    h, w = mag.shape
    strong = keep & (mag >= high)
    weak = keep & (mag >= low) & (mag < high)
    edges = strong.copy()
    stack = list(zip(*np.nonzero(strong)))
    while stack:
        y, x = stack.pop()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and weak[yy, xx] and not edges[yy, xx]:
                    edges[yy, xx] = True
                    stack.append((yy, xx))
    return edges


def reference_canny(pixels, low, high):
    gray = reference_gray(pixels)
    gx, gy = reference_sobel(gray)
    mag = np.hypot(gx, gy)
    keep = reference_nms(gx, gy, mag)
    edges = reference_hysteresis(mag, keep, low, high)
    return np.where(edges, 255, 0).astype(np.uint8)


def brute_force_windows(width, height, window, stride):
    """All (x, y) with x+window <= width, y+window <= height and coordinates
    on the stride lattice, in row-major order."""
    out = []
    for y in range(0, height - window + 1):
        if y % stride:
            continue
        for x in range(0, width - window + 1):
            if x % stride:
                continue
            out.append((x, y))
    return out


def reference_iou(a, b):
    """IoU of (x, y, w, h) boxes with inclusive pixel extents."""
    ax2, ay2 = a[0] + a[2] - 1, a[1] + a[3] - 1
    bx2, by2 = b[0] + b[2] - 1, b[1] + b[3] - 1
    iw = min(ax2, bx2) - max(a[0], b[0]) + 1
    ih = min(ay2, by2) - max(a[1], b[1]) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union
