"""Domain-labelled image sets: synthetic benchmark, Camelyon17-WILDS ingestion, splits.

Images are held as ``uint8`` arrays shaped ``N x 3 x 96 x 96``; :meth:`Collection.float_images`
converts to [0, 1].  Both the synthetic exporter and the Camelyon17 loader use the
WILDS on-disk layout::

    <root>/metadata.csv
    <root>/patches/patient_{patient:03d}_node_{node}/
        patch_patient_{patient:03d}_node_{node}_x_{x_coord}_y_{y_coord}.png

``metadata.csv`` has an unnamed leading index column (used as ``sample_id``)
followed by ``patient,node,x_coord,y_coord,tumor,slide,center,split``.

Random streams come from :func:`make_rng`: numpy's Philox-4x64-10 keyed with
``seed + 2**64 * stream`` where ``stream`` is the CRC-32 of a text tag.
"""

from __future__ import annotations

import csv
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SIZE = 96
CENTER_BOX = (32, 64)  # central 32x32 region, [start, stop) on both axes
METADATA_COLUMNS = ("patient", "node", "x_coord", "y_coord", "tumor", "slide", "center", "split")
N_CENTERS = 5


class DataError(RuntimeError):
    pass


def make_rng(seed: int, stream: str | int = 0) -> np.random.Generator:
    tag = stream if isinstance(stream, int) else zlib.crc32(stream.encode("utf-8"))
    return np.random.Generator(np.random.Philox(key=(int(tag) << 64) | (int(seed) & (2**64 - 1))))


def patch_relpath(patient: int, node: int, x: int, y: int) -> str:
    d = f"patient_{patient:03d}_node_{node}"
    return f"patches/{d}/patch_{d}_x_{x}_y_{y}.png"


# ---------------------------------------------------------------- containers

class LazyImages:
    """Decodes PNG files on indexing; ``len`` and fancy indexing like an array."""

    def __init__(self, paths: list[Path]):
        self.paths = list(paths)
        self.shape = (len(self.paths), 3, IMAGE_SIZE, IMAGE_SIZE)

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, idx):
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return np.stack([read_png(self.paths[i]) for i in idx])


@dataclass
class Collection:
    """Samples possibly drawn from several domains."""

    name: str
    images: np.ndarray | LazyImages
    labels: np.ndarray
    domain_ids: np.ndarray
    sample_ids: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        n = len(self.labels)
        if not (len(self.images) == n == len(self.domain_ids) == len(self.sample_ids)):
            raise DataError(f"{self.name}: field lengths disagree")
        if isinstance(self.images, np.ndarray):
            if self.images.dtype != np.uint8 or self.images.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
                raise DataError(f"{self.name}: images must be uint8 N x 3 x {IMAGE_SIZE} x {IMAGE_SIZE}")
        if n and not np.isin(self.labels, (0, 1)).all():
            raise DataError(f"{self.name}: labels must be binary")
        if len(np.unique(self.sample_ids)) != n:
            raise DataError(f"{self.name}: duplicate sample ids")

    def __len__(self):
        return len(self.labels)

    def float_images(self, idx=slice(None)) -> np.ndarray:
        return np.asarray(self.images[idx], dtype=np.float32) / 255.0

    def subset(self, idx, name: str | None = None) -> "Collection":
        idx = np.asarray(idx, dtype=np.int64)
        images = self.images[idx] if isinstance(self.images, np.ndarray) else \
            LazyImages([self.images.paths[i] for i in idx])
        return type(self)(name or self.name, images, self.labels[idx], self.domain_ids[idx], self.sample_ids[idx])


class DomainDataset(Collection):
    """A :class:`Collection` whose samples all share one domain id."""

    def __post_init__(self):
        super().__post_init__()
        if len(np.unique(self.domain_ids)) > 1:
            raise DataError(f"{self.name}: mixed domain ids {np.unique(self.domain_ids).tolist()}")

    @property
    def domain_id(self) -> int:
        return int(self.domain_ids[0])


# ---------------------------------------------------------------- synthetic benchmark

@dataclass(frozen=True)
class DomainStyle:
    """Maps stain concentrations ``(h, e)`` to RGB.

    ``rgb = (contrast * (mix @ [h, e, 1] - 0.5) + 0.5 + tint) ** gamma``, clipped
    to [0, 1].  Columns of ``mix`` hold the colour contributed by the nuclear
    stain, the stroma stain and the blank background.
    """

    mix: tuple[tuple[float, float, float], ...]
    gamma: float = 1.0
    contrast: float = 1.0
    tint: tuple[float, float, float] = (0.0, 0.0, 0.0)
    jitter: float = 0.03

    def matrix(self) -> np.ndarray:
        return np.asarray(self.mix, dtype=np.float64)

    def distance(self, other: "DomainStyle") -> float:
        """Frobenius distance of mixing matrices + |d gamma| + |d contrast| + L2 tint distance."""
        return float(np.linalg.norm(self.matrix() - other.matrix())
                     + abs(self.gamma - other.gamma) + abs(self.contrast - other.contrast)
                     + np.linalg.norm(np.subtract(self.tint, other.tint)))


DEFAULT_STYLES = (
    # standard H&E: purple nuclei on pink stroma
    DomainStyle(((-0.40, -0.08, 0.96), (-0.75, -0.45, 0.95), (-0.20, -0.18, 0.96))),
    # weakly stained, washed out
    DomainStyle(((-0.22, -0.05, 0.97), (-0.42, -0.22, 0.98), (-0.12, -0.08, 0.97)), gamma=0.8, contrast=0.8),
    # over-stained, dark blue cast
    DomainStyle(((-0.55, -0.25, 0.90), (-0.60, -0.35, 0.88), (-0.30, -0.35, 0.98)), gamma=1.4, contrast=1.15,
                tint=(-0.04, -0.03, 0.05)),
    # inverted polarity: bright stains on a dark field
    DomainStyle(((0.65, 0.10, 0.06), (0.25, 0.50, 0.05), (0.70, 0.25, 0.10))),
    # brown/yellow cast
    DomainStyle(((-0.30, -0.20, 0.92), (-0.45, -0.12, 0.82), (-0.65, -0.05, 0.62)), gamma=1.2, contrast=1.1,
                tint=(0.05, 0.02, -0.03)),
)


@dataclass(frozen=True)
class SyntheticDomainConfig:
    n_domains: int = 5
    samples_per_domain: int = 1250
    styles: tuple[DomainStyle, ...] = DEFAULT_STYLES
    n_cells: tuple[int, int] = (6, 14)
    cell_radius: tuple[float, float] = (2.5, 5.0)
    lesion_radius: tuple[float, float] = (8.0, 14.0)
    lesion_period: tuple[float, float] = (2.5, 4.0)
    lesion_prob: float = 0.5
    outside_lesion_prob: float = 0.5
    min_style_distance: float = 0.3

    def __post_init__(self):
        if self.samples_per_domain < 10:
            raise ValueError("samples_per_domain must be >= 10")
        if len(self.styles) < self.n_domains:
            raise ValueError(f"need {self.n_domains} styles, got {len(self.styles)}")


def check_styles(styles, min_distance: float) -> None:
    for i, s in enumerate(styles):
        if abs(np.linalg.det(s.matrix())) < 1e-6:
            raise ValueError(f"style {i}: singular colour mixing matrix")
        if s.gamma <= 0:
            raise ValueError(f"style {i}: gamma must be positive")
        for j in range(i):
            if s.distance(styles[j]) < min_distance:
                raise ValueError(f"styles {j} and {i} are closer than {min_distance}")


def _smooth_field(rng, size, n_waves=3):
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((size, size))
    for _ in range(n_waves):
        fx, fy = rng.uniform(0.5, 3.0, size=2) * rng.choice([-1, 1], size=2)
        out += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    out -= out.min()
    return out / max(out.max(), 1e-9)


def _disc_intersects_box(cx, cy, r, lo, hi):
    # box covers pixel centres lo .. hi-1
    dx = max(lo - cx, 0.0, cx - (hi - 1))
    dy = max(lo - cy, 0.0, cy - (hi - 1))
    return dx * dx + dy * dy <= r * r


def synth_structure(rng: np.random.Generator, cfg: SyntheticDomainConfig, size: int = IMAGE_SIZE):
    """One sample's stain maps ``(h, e)`` in [0,1] and its label."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    e = 0.25 + 0.45 * _smooth_field(rng, size)
    h = np.zeros((size, size))
    for _ in range(rng.integers(cfg.n_cells[0], cfg.n_cells[1] + 1)):
        cx, cy = rng.uniform(0, size, size=2)
        r = rng.uniform(*cfg.cell_radius)
        h += rng.uniform(0.35, 0.6) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))

    label = 0
    lo, hi = CENTER_BOX
    want_lesion = rng.uniform() < cfg.lesion_prob
    place_outside = rng.uniform() < cfg.outside_lesion_prob
    if want_lesion or place_outside:
        r = rng.uniform(*cfg.lesion_radius)
        if want_lesion:
            cx, cy = rng.uniform(lo - r * 0.5, hi + r * 0.5, size=2)
        else:
            for _ in range(100):
                cx, cy = rng.uniform(r * 0.5, size - r * 0.5, size=2)
                if not _disc_intersects_box(cx, cy, r, lo, hi):
                    break
        period = rng.uniform(*cfg.lesion_period)
        angle = rng.uniform(0, np.pi)
        u = np.cos(angle) * xx + np.sin(angle) * yy
        v = -np.sin(angle) * xx + np.cos(angle) * yy
        texture = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * u / period) * np.sin(2 * np.pi * v / period))
        disc = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        h = np.where(disc, 0.15 + 0.6 * texture * rng.uniform(0.8, 1.0), h)
        e = np.where(disc, e * 0.6, e)
        label = int(_disc_intersects_box(cx, cy, r, lo, hi))
    return np.clip(h, 0, 1), np.clip(e, 0, 1), label


def apply_style(h: np.ndarray, e: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    """Render stain maps as a ``3 x H x W`` float image in [0,1] (per-image jitter from ``rng``)."""
    mix = style.matrix() * (1.0 + style.jitter * rng.standard_normal((3, 3)))
    stains = np.stack([h, e, np.ones_like(h)])
    rgb = np.tensordot(mix, stains, axes=1)
    tint = np.asarray(style.tint) + style.jitter * 0.5 * rng.standard_normal(3)
    rgb = style.contrast * (rgb - 0.5) + 0.5 + tint[:, None, None]
    rgb = np.clip(rgb, 0, 1) ** style.gamma
    rgb = rgb + 0.01 * rng.standard_normal(rgb.shape)
    return np.clip(rgb, 0.0, 1.0)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)


def generate_domain(domain: int, cfg: SyntheticDomainConfig, seed: int, style: DomainStyle | None = None,
                    first_sample_id: int | None = None) -> DomainDataset:
    style = style if style is not None else cfg.styles[domain]
    srng = make_rng(seed, f"structure/{domain}")
    prng = make_rng(seed, f"style/{domain}")
    n = cfg.samples_per_domain
    images = np.empty((n, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        h, e, labels[i] = synth_structure(srng, cfg)
        images[i] = to_uint8(apply_style(h, e, style, prng))
    start = domain * n if first_sample_id is None else first_sample_id
    return DomainDataset(f"C{domain}", images, labels, np.full(n, domain), np.arange(start, start + n))


def generate_synthetic_domains(cfg: SyntheticDomainConfig | None = None, seed: int = 0) -> list[DomainDataset]:
    cfg = cfg or SyntheticDomainConfig()
    check_styles(cfg.styles[: cfg.n_domains], cfg.min_style_distance)
    return [generate_domain(d, cfg, seed) for d in range(cfg.n_domains)]


# ---------------------------------------------------------------- on-disk layout

def read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:  # PIL raises a zoo of types for bad files
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if arr.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise DataError(f"{path}: expected {IMAGE_SIZE}x{IMAGE_SIZE} RGB, got {arr.shape}")
    return arr.transpose(2, 0, 1)


def export_wilds_layout(datasets: list[Collection], root) -> Path:
    """Write PNG patches + ``metadata.csv`` (synthetic rows use patient = centre, node 0)."""
    root = Path(root)
    rows = []
    for ds in datasets:
        for i in range(len(ds)):
            center = int(ds.domain_ids[i])
            sid = int(ds.sample_ids[i])
            rel = patch_relpath(center, 0, sid, 0)
            path = root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(np.asarray(ds.images[i]).transpose(1, 2, 0)).save(path, optimize=False)
            rows.append((sid, center, 0, sid, 0, int(ds.labels[i]), center, center, 0))
    rows.sort()
    with (root / "metadata.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("",) + METADATA_COLUMNS)
        writer.writerows(rows)
    return root


def _read_metadata(path: Path):
    if not path.exists():
        raise DataError(f"missing metadata file {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty metadata file")
        missing = [c for c in METADATA_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        col = {name: header.index(name) for name in METADATA_COLUMNS}
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            try:
                sid = int(rec[0]) if header[0] in ("", "Unnamed: 0") else lineno - 2
                vals = {k: int(float(rec[i])) for k, i in col.items()}
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: malformed row") from exc
            rows.append((sid, vals))
    return rows


def load_camelyon17(root, lazy: bool = False, workers: int = 4) -> list[DomainDataset]:
    """Load a WILDS-layout directory into five per-centre datasets.

    ``lazy`` skips decoding at load time (files are still checked to exist);
    decode errors then surface when a batch is read.
    """
    root = Path(root)
    rows = _read_metadata(root / "metadata.csv")
    n_files = sum(1 for _ in (root / "patches").rglob("*.png")) if (root / "patches").exists() else 0
    if n_files != len(rows):
        raise DataError(f"{root}: metadata has {len(rows)} rows but {n_files} patch files were found")
    paths = []
    for sid, v in rows:
        if v["center"] not in range(N_CENTERS):
            raise DataError(f"sample {sid}: unknown center {v['center']}")
        p = root / patch_relpath(v["patient"], v["node"], v["x_coord"], v["y_coord"])
        if not p.exists():
            raise DataError(f"missing patch file {p}")
        paths.append(p)
    centers = np.array([v["center"] for _, v in rows], dtype=np.int64)
    labels = np.array([v["tumor"] for _, v in rows], dtype=np.int64)
    sids = np.array([sid for sid, _ in rows], dtype=np.int64)
    if lazy:
        images = None
    else:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            decoded = list(pool.map(read_png, paths))
        images = np.stack(decoded) if decoded else np.empty((0, 3, IMAGE_SIZE, IMAGE_SIZE), np.uint8)
    out = []
    for c in range(N_CENTERS):
        idx = np.flatnonzero(centers == c)
        imgs = LazyImages([paths[i] for i in idx]) if lazy else images[idx]
        out.append(DomainDataset(f"C{c}", imgs, labels[idx], centers[idx], sids[idx]))
    return out


def load_dataset_dir(root, lazy: bool = False) -> list[DomainDataset]:
    """Alias for :func:`load_camelyon17`; synthetic exports share the layout."""
    return load_camelyon17(root, lazy=lazy)


# ---------------------------------------------------------------- splits

def holdout_split(ds: Collection, fraction: float = 0.2, seed: int = 0):
    if not 0.0 < fraction < 1.0:
        raise ValueError("holdout fraction must be in (0, 1)")
    n = len(ds)
    n_val = int(np.floor(fraction * n + 0.5))
    if n_val == 0 or n_val == n:
        raise ValueError(f"holdout of {fraction} on {n} samples leaves a side empty")
    perm = make_rng(seed, f"holdout/{ds.name}").permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return ds.subset(train_idx, ds.name), ds.subset(val_idx, ds.name + "/val")


def union_domains(datasets: list[Collection]) -> Collection:
    if not datasets:
        raise ValueError("union_domains needs at least one dataset")
    sids = np.concatenate([d.sample_ids for d in datasets])
    if len(np.unique(sids)) != len(sids):
        raise DataError("duplicate sample ids across datasets")
    if all(isinstance(d.images, np.ndarray) for d in datasets):
        images = np.concatenate([d.images for d in datasets])
    else:
        paths = []
        for d in datasets:
            if not isinstance(d.images, LazyImages):
                raise DataError("cannot mix lazy and in-memory datasets")
            paths += d.images.paths
        images = LazyImages(paths)
    return Collection("+".join(d.name for d in datasets), images,
                      np.concatenate([d.labels for d in datasets]),
                      np.concatenate([d.domain_ids for d in datasets]), sids)
