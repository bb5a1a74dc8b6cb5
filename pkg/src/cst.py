"""
Cross-modal spatial transformer: two language-conditioned affine
transforms (scale + translation) resample the visual feature map.
"""
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

import autodiff as ad
import cga


S_MAX = 1.5
LATTICE_SNAP = 1e-13
MODES = ("full", "identity")
BRANCHES = ("cst.loc1", "cst.loc2")


class CSTError(ValueError):
    pass


def scale_bias(s_max):
    """
    Bias b with s_max * sigmoid(b) == 1
    """
    if s_max <= 1.0:
        raise CSTError(f"s_max must exceed 1 for an identity transform, got {s_max}")
    return math.log(1.0 / (s_max - 1.0))


@dataclass
class AffineParams:
    """
    T = [[s1, 0, tx], [0, s2, ty]] per sample; theta is N×4 (s1, s2, tx, ty)
    """
    theta: ad.Tensor

    @classmethod
    def constant(cls, rows):
        return cls(ad.Tensor(np.asarray(rows, dtype=np.float64).reshape(-1, 4)))

    @classmethod
    def identity(cls, n):
        return cls.constant(np.tile([1.0, 1.0, 0.0, 0.0], (n, 1)))

    @property
    def s1(self):
        return self.theta.data[:, 0]

    @property
    def s2(self):
        return self.theta.data[:, 1]

    @property
    def tx(self):
        return self.theta.data[:, 2]

    @property
    def ty(self):
        return self.theta.data[:, 3]

    def rows(self):
        return [tuple(float(x) for x in r) for r in self.theta.data]


def init_localizers(half_channels, s_max=S_MAX):
    """
    Zero final layer, bias chosen so the initial transform is the identity
    """
    params = {}
    for prefix in BRANCHES:
        params[f"{prefix}.w"] = np.zeros((half_channels, 4))
        params[f"{prefix}.b"] = np.array([scale_bias(s_max), scale_bias(s_max), 0.0, 0.0])
    return params


def split_cross_modal(proj):
    """
    Split the normalized cross-modal sum into two C/2 channel groups
    """
    if proj.channels % 2:
        raise CSTError(f"odd channel count: {proj.channels}")

    m1, m2 = ad.split(cga.normalized_sum(proj), 2, axis=1)
    return m1, m2


def localize(m, params, prefix, s_max=S_MAX):
    """
    T = squash(FC(ReLU(GAP(M)))), s = s_max * sigmoid, t = tanh
    """
    pooled = ad.relu(ad.global_avg_pool(m))
    raw = ad.linear(pooled, params[f"{prefix}.w"], params[f"{prefix}.b"])

    raw_s, raw_t = ad.split(raw, 2, axis=1)
    s = ad.scale(ad.sigmoid(raw_s), s_max)
    t = ad.tanh(raw_t)
    return AffineParams(ad.concat([s, t], axis=1))


def base_coords(n):
    """
    align_corners base grid: -1 + 2j/(n-1); a single position sits at 0
    """
    if n < 1:
        raise CSTError(f"grid size must be >= 1, got {n}")
    if n == 1:
        return np.zeros(1)
    return -1.0 + 2.0 * np.arange(n) / (n - 1)


def affine_grid(transform, height, width):
    """
    @return SampleGrid Tensor N×H×W×2 with (x, y) = (s1*x + tx, s2*y + ty)
    """
    theta = transform.theta
    xs = base_coords(width)
    ys = base_coords(height)
    n = theta.shape[0]
    th = theta.data

    grid = np.empty((n, height, width, 2))
    grid[..., 0] = th[:, 0, None, None] * xs[None, None, :] + th[:, 2, None, None]
    grid[..., 1] = th[:, 1, None, None] * ys[None, :, None] + th[:, 3, None, None]

    def vjp(g):
        gt = np.empty((n, 4))
        gt[:, 0] = (g[..., 0] * xs[None, None, :]).sum(axis=(1, 2))
        gt[:, 1] = (g[..., 1] * ys[None, :, None]).sum(axis=(1, 2))
        gt[:, 2] = g[..., 0].sum(axis=(1, 2))
        gt[:, 3] = g[..., 1].sum(axis=(1, 2))
        return (gt,)

    return ad.record_op("affine_grid", [theta], grid, vjp)


########################################################################
# Bilinear sampling
########################################################################
def _to_pixels(coord, size):
    u = (coord + 1.0) * (size - 1) / 2.0
    nearest = np.rint(u)
    return np.where(np.abs(u - nearest) <= LATTICE_SNAP, nearest, u)


def _corners(grid, height, width):
    u = _to_pixels(grid[..., 0], width)
    v = _to_pixels(grid[..., 1], height)

    x0 = np.floor(u)
    y0 = np.floor(v)
    wx1 = u - x0
    wy1 = v - y0

    return {
        "x0": x0.astype(np.int64),
        "y0": y0.astype(np.int64),
        "wx": (1.0 - wx1, wx1),
        "wy": (1.0 - wy1, wy1),
    }


def _gather(src, yi, xi):
    """
    src N×H×W×C; out-of-range positions read as 0
    """
    n, height, width, _ = src.shape
    valid = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
    batch = np.arange(n)[:, None, None]
    vals = src[batch, np.clip(yi, 0, height - 1), np.clip(xi, 0, width - 1)]
    return vals * valid[..., None], valid


def _bilinear_forward(src, k):
    out = 0.0
    taps = {}
    for dy in (0, 1):
        for dx in (0, 1):
            vals, valid = _gather(src, k["y0"] + dy, k["x0"] + dx)
            taps[dy, dx] = (vals, valid)
            out = out + (k["wy"][dy] * k["wx"][dx])[..., None] * vals
    return out, taps


def _bilinear_backward(g, src_shape, k, taps, height, width):
    """
    @param g upstream gradient N×Ho×Wo×C
    @return (grad wrt source N×H×W×C, grad wrt grid N×Ho×Wo×2)
    """
    n, channels = src_shape[0], src_shape[-1]
    batch = np.arange(n)[:, None, None]

    # scatter-add of all four taps as one bincount over flat (n, y, x, c) indices
    index, contrib = [], []
    for (dy, dx), (_, valid) in taps.items():
        weight = k["wy"][dy] * k["wx"][dx] * valid
        yi = np.clip(k["y0"] + dy, 0, height - 1)
        xi = np.clip(k["x0"] + dx, 0, width - 1)
        flat = (batch * height + yi) * width + xi
        index.append(flat[..., None] * channels + np.arange(channels))
        contrib.append(g * weight[..., None])

    g_src = np.bincount(np.concatenate([i.ravel() for i in index]),
                        weights=np.concatenate([c.ravel() for c in contrib]),
                        minlength=int(np.prod(src_shape))).reshape(src_shape)

    v00, v01, v10, v11 = (taps[0, 0][0], taps[0, 1][0], taps[1, 0][0], taps[1, 1][0])
    wx0, wx1 = k["wx"]
    wy0, wy1 = k["wy"]

    du = (g * (wy0[..., None] * (v01 - v00) + wy1[..., None] * (v11 - v10))).sum(axis=-1)
    dv = (g * (wx0[..., None] * (v10 - v00) + wx1[..., None] * (v11 - v01))).sum(axis=-1)

    g_grid = np.stack([du * (width - 1) / 2.0, dv * (height - 1) / 2.0], axis=-1)
    return g_src, g_grid


def bilinear_sample(f_x, grid):
    """
    Bilinear blend of the 4 nearest source pixels at each grid position
    (pixel units), zero outside the map. Differentiable w.r.t. both the
    features and the grid coordinates.

    @param f_x N×C×H×W, grid N×Ho×Wo×2 -> N×C×Ho×Wo
    """
    f_x, grid = ad.as_tensor(f_x), ad.as_tensor(grid)
    if f_x.data.ndim != 4 or grid.data.ndim != 4 or grid.shape[-1] != 2:
        raise CSTError(f"bilinear_sample expects N×C×H×W features and N×Ho×Wo×2 grid, got "
                       f"{list(f_x.shape)} and {list(grid.shape)}")
    if grid.shape[0] != f_x.shape[0]:
        raise CSTError(f"batch mismatch: features {f_x.shape[0]}, grid {grid.shape[0]}")

    height, width = f_x.shape[2], f_x.shape[3]
    src = f_x.data.transpose(0, 2, 3, 1)
    k = _corners(grid.data, height, width)
    out, taps = _bilinear_forward(src, k)

    def vjp(g):
        g_src, g_grid = _bilinear_backward(g.transpose(0, 2, 3, 1), src.shape, k, taps, height, width)
        return g_src.transpose(0, 3, 1, 2), g_grid

    return ad.record_op("bilinear_sample", [f_x, grid], np.ascontiguousarray(out.transpose(0, 3, 1, 2)), vjp)


def cst_forward(proj, f_x, params, mode="full", s_max=S_MAX, return_transforms=False):
    """
    split -> localize x2 -> affine_grid x2 -> sample the full F_x twice

    @return (E1, E2), or (E1, E2, (T1, T2)) with return_transforms
    """
    if mode not in MODES:
        raise CSTError(f"unknown CST mode: {mode}")

    f_x = ad.as_tensor(f_x)
    n, _, height, width = f_x.shape

    if mode == "identity":
        transforms = (AffineParams.identity(n), AffineParams.identity(n))
    else:
        m1, m2 = split_cross_modal(proj)
        transforms = (
            localize(m1, params, BRANCHES[0], s_max),
            localize(m2, params, BRANCHES[1], s_max),
        )

    outputs = [bilinear_sample(f_x, affine_grid(t, height, width)) for t in transforms]

    if return_transforms:
        return outputs[0], outputs[1], transforms
    return outputs[0], outputs[1]


########################################################################
# Export
########################################################################
def export_transforms_csv(path, ids, transforms):
    """
    Rows: id, branch, s1, s2, tx, ty
    """
    with open(path, "w", encoding="utf-8") as f:
        f.write("id,branch,s1,s2,tx,ty\n")
        for branch, t in enumerate(transforms, 1):
            for sample_id, (s1, s2, tx, ty) in zip(ids, t.rows()):
                f.write(f"{sample_id},{branch},{s1:.6f},{s2:.6f},{tx:.6f},{ty:.6f}\n")


def transform_box(row, image_size):
    """
    Pixel rectangle (left, top, right, bottom) the transform samples from,
    drawn on the input image rather than the feature map.
    """
    s1, s2, tx, ty = row
    to_px = lambda c: (c + 1.0) * (image_size - 1) / 2.0
    return (to_px(tx - s1), to_px(ty - s2), to_px(tx + s1), to_px(ty + s2))


def draw_transform_overlay(image, transforms, scale=4):
    """
    @param image uint8 H×W×3
    @param transforms list of (s1, s2, tx, ty) rows, one per branch
    @return PIL image upscaled by `scale` with one rectangle per branch
    """
    size = image.shape[0]
    img = Image.fromarray(np.asarray(image, dtype=np.uint8)).resize((size * scale, size * scale), Image.Resampling.NEAREST)
    draw = ImageDraw.Draw(img)

    colors = [(255, 0, 0), (0, 255, 255)]
    for i, row in enumerate(transforms):
        box = [c * scale for c in transform_box(row, size)]
        draw.rectangle(box, outline=colors[i % len(colors)], width=2)

    return img
