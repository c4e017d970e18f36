"""Intensity and frequency style augmentations used to build training triplets.

Two strategies produce the augmented views of a source batch:

* a Bezier intensity remap (monotone cubic curve through (0,0) and (1,1),
  optionally inverted), and
* Fourier low-frequency amplitude replacement against another image of the
  same batch.

Images are float arrays shaped ``C x H x W`` (single) or ``N x C x H x W``
(batch) with values in [0, 1].  Every function that draws random numbers takes
an explicit :class:`numpy.random.Generator`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LUT_SIZE = 1024


@dataclass(frozen=True)
class BezierParams:
    p1: tuple[float, float]
    p2: tuple[float, float]
    invert: bool = False

    def __post_init__(self):
        coords = (*self.p1, *self.p2)
        if not all(0.0 <= c <= 1.0 for c in coords):
            raise ValueError(f"control points must lie in [0,1]^2, got {self.p1}, {self.p2}")
        if self.p1[0] > self.p2[0]:
            raise ValueError("control points must satisfy p1.x <= p2.x")


@dataclass(frozen=True)
class FdaParams:
    beta: float

    def __post_init__(self):
        if not 0.0 <= self.beta <= 0.5:
            raise ValueError(f"beta must be in [0, 0.5], got {self.beta}")


@dataclass(frozen=True)
class BezierConfig:
    invert_prob: float = 0.5
    per_channel: bool = False


@dataclass(frozen=True)
class FdaConfig:
    beta_min: float = 0.05
    beta_max: float = 0.15

    def __post_init__(self):
        if not 0.0 <= self.beta_min <= self.beta_max <= 0.5:
            raise ValueError("need 0 <= beta_min <= beta_max <= 0.5")


@dataclass
class Triplet:
    x_s: np.ndarray
    x_a: np.ndarray
    x_b: np.ndarray
    perm: np.ndarray
    betas: np.ndarray
    fda_fallback: bool = False
    bezier: list = field(default_factory=list)


def sample_bezier_params(rng: np.random.Generator, invert_prob: float = 0.5) -> BezierParams:
    if not 0.0 <= invert_prob <= 1.0:
        raise ValueError("invert_prob must be in [0, 1]")
    a, b = rng.uniform(0.0, 1.0, size=(2, 2))
    if a[0] > b[0]:
        a, b = b, a
    invert = bool(rng.uniform() < invert_prob)
    return BezierParams((float(a[0]), float(a[1])), (float(b[0]), float(b[1])), invert)


def bezier_lut(params: BezierParams, n: int = LUT_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Sample the curve at ``n`` uniform parameter values; returns (xs, ys)."""
    t = np.linspace(0.0, 1.0, n)
    u = 1.0 - t
    b1, b2, b3 = 3.0 * u * u * t, 3.0 * u * t * t, t**3
    xs = b1 * params.p1[0] + b2 * params.p2[0] + b3
    ys = b1 * params.p1[1] + b2 * params.p2[1] + b3
    # x(t) is non-decreasing for sorted control x; accumulate to strip round-off dips
    return np.maximum.accumulate(xs), ys


def bezier_transform(x: np.ndarray, params: BezierParams) -> np.ndarray:
    x = np.asarray(x)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("bezier_transform expects pixel values in [0, 1]")
    xs, ys = bezier_lut(params)
    out = np.interp(x, xs, ys)
    if params.invert:
        out = 1.0 - out
    return np.clip(out, 0.0, 1.0).astype(x.dtype, copy=False)


def low_freq_mask(h: int, w: int, beta: float) -> np.ndarray:
    """Boolean mask over the centred spectrum selecting the low-frequency window.

    The window has side ``L = floor(beta * min(h, w))`` around the zero-frequency
    bin and is closed under conjugate mirroring (frequency offsets ``|k| <= L // 2``),
    so an even ``L`` covers ``L + 1`` bins per axis.
    """
    side = int(np.floor(beta * min(h, w)))
    mask = np.zeros((h, w), dtype=bool)
    if side == 0:
        return mask
    half = side // 2
    ch, cw = h // 2, w // 2
    mask[max(ch - half, 0): ch + half + 1, max(cw - half, 0): cw + half + 1] = True
    return mask


def _check_fda_inputs(x_src, x_ref):
    if x_src.shape != x_ref.shape:
        raise ValueError(f"shape mismatch: {x_src.shape} vs {x_ref.shape}")


def fda_low_freq_swap(x_src: np.ndarray, x_ref: np.ndarray, params: FdaParams) -> np.ndarray:
    x_src = np.asarray(x_src)
    x_ref = np.asarray(x_ref)
    _check_fda_inputs(x_src, x_ref)
    h, w = x_src.shape[-2:]
    mask = low_freq_mask(h, w, params.beta)
    if not mask.any():
        return x_src.copy()
    spec_src = np.fft.fftshift(np.fft.fft2(x_src), axes=(-2, -1))
    spec_ref = np.fft.fftshift(np.fft.fft2(x_ref), axes=(-2, -1))
    amp = np.where(mask, np.abs(spec_ref), np.abs(spec_src))
    mixed = amp * np.exp(1j * np.angle(spec_src))
    out = np.fft.ifft2(np.fft.ifftshift(mixed, axes=(-2, -1))).real
    return np.clip(out, 0.0, 1.0).astype(x_src.dtype, copy=False)


def _window_dft(h: int, w: int, half: int, dtype):
    """Partial DFT matrices for row offsets ``-half..half`` and columns ``0..half``."""
    u = np.arange(-half, half + 1)
    v = np.arange(0, half + 1)
    er = np.exp(-2j * np.pi * np.outer(u, np.arange(h)) / h).astype(dtype)
    ec = np.exp(-2j * np.pi * np.outer(np.arange(w), v) / w).astype(dtype)
    return u, v, er, ec


def fda_batch(x_src: np.ndarray, x_ref: np.ndarray | None, betas: np.ndarray,
              perm: np.ndarray | None = None) -> np.ndarray:
    """Batched :func:`fda_low_freq_swap` with one beta per sample.

    Only the window bins are transformed: the output is the input plus the
    inverse transform of the amplitude change, which the window's mirror
    symmetry keeps real.  Pass ``x_ref=None`` with ``perm`` to take
    references from ``x_src[perm]``.
    """
    x_src = np.asarray(x_src)
    n, c, h, w = x_src.shape
    if x_ref is not None:
        _check_fda_inputs(x_src, np.asarray(x_ref))
    halves = np.array([int(np.floor(float(b) * min(h, w))) // 2 for b in betas])
    active = np.array([int(np.floor(float(b) * min(h, w))) > 0 for b in betas])
    if not active.any():
        return x_src.copy()
    cdtype = np.complex128 if x_src.dtype == np.float64 else np.complex64
    hm = int(halves[active].max())
    u, v, er, ec = _window_dft(h, w, hm, cdtype)
    spec_src = er @ x_src.astype(cdtype) @ ec
    spec_ref = spec_src[perm] if x_ref is None else er @ np.asarray(x_ref).astype(cdtype) @ ec
    lim = np.where(active, halves, -1)[:, None, None, None]
    mask = (np.abs(u)[:, None] <= lim) & (v[None, :] <= lim)
    mag = np.abs(spec_src)
    unit = np.where(mag > 0, spec_src / np.where(mag > 0, mag, 1), 1)
    delta = np.where(mask, (np.abs(spec_ref) - mag) * unit, 0)
    delta[..., 1:] *= 2  # columns v > 0 stand for their mirrored partners too
    change = (er.conj().T @ delta @ ec.conj().T).real / (h * w)
    return np.clip(x_src + change, 0.0, 1.0).astype(x_src.dtype, copy=False)


def bezier_batch(x: np.ndarray, params: list[BezierParams], grid: int = 256) -> np.ndarray:
    """Apply one curve per row of ``x`` via a uniform-``x`` table of ``grid`` entries.

    Table entries sit at ``k / (grid - 1)``, so 8-bit images (``k / 255``) map
    exactly as :func:`bezier_transform` would; other values are linearly
    interpolated between table entries.  A ``uint8`` input is looked up
    directly (codes ``0..255``) and returns ``float32``.
    """
    if x.dtype == np.uint8:
        grid = 256
    elif x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("bezier_batch expects pixel values in [0, 1]")
    knots = np.linspace(0.0, 1.0, grid)
    tables = np.empty((len(params), grid + 1))
    for i, p in enumerate(params):
        xs, ys = bezier_lut(p)
        tables[i, :grid] = 1.0 - np.interp(knots, xs, ys) if p.invert else np.interp(knots, xs, ys)
    tables[:, grid] = tables[:, grid - 1]
    work = np.float64 if x.dtype == np.float64 else np.float32
    if x.dtype == np.uint8:
        flat = x.reshape(len(params), -1) + (np.arange(len(params)) * grid)[:, None]
        return tables[:, :grid].astype(np.float32).ravel()[flat].reshape(x.shape)
    slopes = np.diff(tables, axis=1).astype(work).ravel()
    values = tables[:, :grid].astype(work).ravel()
    pos = x.reshape(len(params), -1).astype(work) * work(grid - 1)
    lo = np.minimum(pos.astype(np.intp), grid - 2)
    frac = pos - lo
    flat = lo + (np.arange(len(params)) * grid)[:, None]
    out = values[flat] + slopes[flat] * frac
    return np.clip(out, 0.0, 1.0, out=out).reshape(x.shape).astype(x.dtype, copy=False)


def make_triplet(
    batch,
    rng: np.random.Generator,
    bezier_cfg: BezierConfig | None = None,
    fda_cfg: FdaConfig | None = None,
) -> Triplet:
    """Build the (source, bezier, fda) views of a batch.

    ``batch`` is float in [0, 1] or ``uint8`` (converted to ``float32 / 255``).

    ``x_a`` gets fresh Bezier parameters per sample (per channel when
    ``bezier_cfg.per_channel``).  ``x_b`` swaps low-frequency amplitudes with a
    randomly shuffled partner from the same batch; a sample may be paired with
    itself.  A batch of one has no partner, so ``x_b`` is a copy of ``x_s`` and
    ``fda_fallback`` is set.
    """
    raw = np.asarray(batch)
    if raw.ndim != 4 or len(raw) == 0:
        raise ValueError("make_triplet expects a non-empty N x C x H x W batch")
    x_s = raw.astype(np.float32) / np.float32(255.0) if raw.dtype == np.uint8 else raw
    bezier_cfg = bezier_cfg or BezierConfig()
    fda_cfg = fda_cfg or FdaConfig()
    n, c = x_s.shape[:2]

    per = c if bezier_cfg.per_channel else 1
    drawn = [[sample_bezier_params(rng, bezier_cfg.invert_prob) for _ in range(per)] for _ in range(n)]
    flat = [p for ps in drawn for p in ps]
    x_a = bezier_batch(raw.reshape(n * per, -1), flat).reshape(x_s.shape)

    betas = rng.uniform(fda_cfg.beta_min, fda_cfg.beta_max, size=n)
    perm = rng.permutation(n)
    if n == 1:
        return Triplet(x_s, x_a, x_s.copy(), perm, betas, fda_fallback=True, bezier=drawn)
    x_b = fda_batch(x_s, None, betas, perm=perm)
    return Triplet(x_s, x_a, x_b, perm, betas, bezier=drawn)
