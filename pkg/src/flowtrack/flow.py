"""Coarse-to-fine block-matching optical flow and per-box motion priors.

A flow vector (u, v) at pixel p of ``prev`` means prev[p] ≈ cur[p + (u, v)],
with u along x (columns) and v along y (rows).
"""
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .boxes import Box

FLOW_MAGIC = b"FTFL"


class FlowShapeError(ValueError):
    pass


class FlowGeometryError(ValueError):
    pass


@dataclass
class FlowParams:
    pyramid_levels: int = 3
    block_size: int = 8
    search_radius: int = 4
    subpixel_refine: bool = True

    def __post_init__(self):
        if self.pyramid_levels < 1 or self.block_size < 3 or self.search_radius < 1:
            raise ValueError("need pyramid_levels ≥ 1, block_size ≥ 3, search_radius ≥ 1")

    @property
    def max_displacement(self):
        """Largest |u| or |v| the pyramid can produce."""
        return self.search_radius * (2 ** self.pyramid_levels - 1)


@dataclass
class FlowField:
    u: np.ndarray  # (H, W) float32
    v: np.ndarray

    @property
    def shape(self):
        return self.u.shape

    @classmethod
    def zeros(cls, height, width):
        return cls(np.zeros((height, width), np.float32), np.zeros((height, width), np.float32))


def to_gray(frame):
    """Grayscale float32 (H, W); color input uses 0.299R + 0.587G + 0.114B."""
    f = np.asarray(frame, dtype=np.float32)
    if f.ndim == 3 and f.shape[2] == 1:
        f = f[:, :, 0]
    elif f.ndim == 3 and f.shape[2] == 3:
        f = f @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    if f.ndim != 2:
        raise FlowShapeError(f"expected a single-channel or RGB frame, got shape {np.shape(frame)}")
    return f


def _downsample(img):
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    i = img[:h, :w]
    return 0.25 * (i[0::2, 0::2] + i[1::2, 0::2] + i[0::2, 1::2] + i[1::2, 1::2])


def _candidates(radius):
    """Search offsets sorted lexicographically by (du, dv); returns du, dv, rank."""
    du, dv = np.meshgrid(np.arange(-radius, radius + 1), np.arange(-radius, radius + 1), indexing="ij")
    du, dv = du.ravel(), dv.ravel()
    return du, dv, np.arange(du.size)


def _match_blocks(prev, cur, by, bx, gu, gv, bs, radius, refine):
    """Block matching for blocks at (by, bx) around integer guesses (gu, gv).

    All arguments are flat arrays of equal length; returns (u, v, cost).
    """
    h, w = prev.shape
    gu = np.clip(gu, -bx, (w - bs) - bx)
    gv = np.clip(gv, -by, (h - bs) - by)
    rows = by[:, None, None] + np.arange(bs)[None, :, None]
    cols = bx[:, None, None] + np.arange(bs)[None, None, :]
    blocks = prev[rows, cols]
    windows = sliding_window_view(cur, (bs, bs))  # (h-bs+1, w-bs+1, bs, bs)
    du, dv, rank = _candidates(radius)
    cost = np.empty((by.size, du.size))
    for k in range(du.size):
        ty = by + gv + dv[k]
        tx = bx + gu + du[k]
        ok = (ty >= 0) & (ty <= h - bs) & (tx >= 0) & (tx <= w - bs)
        patch = windows[np.clip(ty, 0, h - bs), np.clip(tx, 0, w - bs)]
        sad = np.abs(patch - blocks).sum(axis=(1, 2), dtype=np.float64)
        cost[:, k] = np.where(ok, sad, np.inf)

    best_cost = cost.min(axis=1, keepdims=True)
    tu = gu[:, None] + du
    tv = gv[:, None] + dv
    # tie-break: smallest total displacement, then lexicographic (u, v)
    key = (tu * tu + tv * tv) * (du.size + 1) + rank
    key = np.where(cost == best_cost, key, np.iinfo(np.int64).max)
    k = key.argmin(axis=1)
    out_u = tu[np.arange(by.size), k].astype(np.float64)
    out_v = tv[np.arange(by.size), k].astype(np.float64)
    c0 = best_cost[:, 0]
    if refine:
        side = 2 * radius + 1
        ku, kv = k // side, k % side  # positions of du, dv within the search grid
        c = cost.reshape(-1, side, side)
        idx = np.arange(by.size)

        def at(iu, iv):
            inside = (iu >= 0) & (iu < side) & (iv >= 0) & (iv < side)
            return np.where(inside, c[idx, np.clip(iu, 0, side - 1), np.clip(iv, 0, side - 1)], np.inf)

        exact = c0 == 0
        out_u += np.where(exact, 0.0, _parabola(at(ku - 1, kv), c0, at(ku + 1, kv)))
        out_v += np.where(exact, 0.0, _parabola(at(ku, kv - 1), c0, at(ku, kv + 1)))
    return out_u, out_v, c0


def _median3x3(a):
    p = np.pad(a, 1, mode="edge")
    stack = sliding_window_view(p, (3, 3)).reshape(a.shape + (9,))
    return np.rint(np.median(stack, axis=-1)).astype(np.int64)


def _match_level(prev, cur, guess_u, guess_v, bs, radius, refine):
    """Match every block of one pyramid level.

    Each block is searched around its own guess; blocks whose guess disagrees
    with the 3x3 neighbourhood median are searched around the median too and
    keep the cheaper result.
    """
    ny, nx = guess_u.shape
    by, bx = np.meshgrid(np.arange(ny) * bs, np.arange(nx) * bs, indexing="ij")
    by, bx = by.ravel(), bx.ravel()
    gu, gv = guess_u.ravel(), guess_v.ravel()
    u, v, c = _match_blocks(prev, cur, by, bx, gu, gv, bs, radius, refine)
    mu, mv = _median3x3(guess_u).ravel(), _median3x3(guess_v).ravel()
    alt = np.flatnonzero((mu != gu) | (mv != gv))
    if alt.size:
        au, av, ac = _match_blocks(prev, cur, by[alt], bx[alt], mu[alt], mv[alt], bs, radius, refine)
        mag_old = u[alt] ** 2 + v[alt] ** 2
        better = (ac < c[alt]) | ((ac == c[alt]) & (au ** 2 + av ** 2 < mag_old))
        sel = alt[better]
        u[sel], v[sel] = au[better], av[better]
    return u.reshape(ny, nx), v.reshape(ny, nx)


def _parabola(cm, c0, cp):
    """Vertex offset of the parabola through (-1, cm), (0, c0), (1, cp), within ±0.5."""
    denom = cm - 2 * c0 + cp
    ok = np.isfinite(cm) & np.isfinite(cp) & (denom > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        off = np.where(ok, 0.5 * (cm - cp) / np.where(ok, denom, 1.0), 0.0)
    return np.clip(off, -0.5, 0.5)


def _expand(block_vals, h, w, bs):
    """Per-block values → per-pixel map; pixels beyond the last full block copy the nearest one."""
    ny, nx = block_vals.shape
    iy = np.minimum(np.arange(h) // bs, ny - 1)
    ix = np.minimum(np.arange(w) // bs, nx - 1)
    return block_vals[iy[:, None], ix[None, :]]


def estimate_flow(prev, cur, params=None):
    params = params or FlowParams()
    prev = to_gray(prev)
    cur = to_gray(cur)
    if prev.shape != cur.shape:
        raise FlowShapeError(f"frame shapes differ: {prev.shape} vs {cur.shape}")
    h, w = prev.shape
    bs = params.block_size
    if h < bs or w < bs:
        raise FlowShapeError(f"frame {h}x{w} smaller than block size {bs}")

    pyr = [(prev, cur)]
    for _ in range(params.pyramid_levels - 1):
        p, c = pyr[-1]
        if min(p.shape) // 2 < bs:
            break
        pyr.append((_downsample(p), _downsample(c)))

    u = v = None
    for level in range(len(pyr) - 1, -1, -1):
        p, c = pyr[level]
        ny, nx = p.shape[0] // bs, p.shape[1] // bs
        if u is None:
            gu = np.zeros((ny, nx), np.int64)
            gv = np.zeros((ny, nx), np.int64)
        else:
            # coarse block (i, j) covers fine blocks (2i..2i+1, 2j..2j+1)
            iy = np.minimum(np.arange(ny) // 2, u.shape[0] - 1)
            ix = np.minimum(np.arange(nx) // 2, u.shape[1] - 1)
            gu = 2 * np.rint(u).astype(np.int64)[iy[:, None], ix[None, :]]
            gv = 2 * np.rint(v).astype(np.int64)[iy[:, None], ix[None, :]]
        refine = params.subpixel_refine and level == 0
        u, v = _match_level(p, c, gu, gv, bs, params.search_radius, refine)

    return FlowField(_expand(u, h, w, bs).astype(np.float32), _expand(v, h, w, bs).astype(np.float32))


def box_pixel_bounds(box, height, width):
    x0, y0, x1, y1 = box.corners()
    c0, c1 = max(0, int(np.floor(x0))), min(width, int(np.ceil(x1)))
    r0, r1 = max(0, int(np.floor(y0))), min(height, int(np.ceil(y1)))
    return r0, r1, c0, c1


def flow_offset_for_box(field, box):
    """Componentwise median flow over the pixels covered by ``box`` ∩ image."""
    h, w = field.shape
    r0, r1, c0, c1 = box_pixel_bounds(box, h, w)
    if r0 >= r1 or c0 >= c1:
        raise FlowGeometryError(f"box {box} does not intersect the {w}x{h} frame")
    return (float(np.median(field.u[r0:r1, c0:c1])), float(np.median(field.v[r0:r1, c0:c1])))


def propagate_box(box, offset):
    dx, dy = offset
    return Box(box.x + dx, box.y + dy, box.w, box.h)


def write_flow(fh, field):
    h, w = field.shape
    fh.write(FLOW_MAGIC)
    fh.write(struct.pack("<II", h, w))
    fh.write(np.stack([field.u, field.v], axis=-1).astype("<f4").tobytes())


def read_flow(fh):
    if fh.read(4) != FLOW_MAGIC:
        raise ValueError("bad magic: not a flow dump")
    h, w = struct.unpack("<II", fh.read(8))
    data = np.frombuffer(fh.read(8 * h * w), dtype="<f4").reshape(h, w, 2)
    return FlowField(data[..., 0].astype(np.float32), data[..., 1].astype(np.float32))
