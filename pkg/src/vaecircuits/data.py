"""Synthetic causal shapes dataset, dSprites archive loader, input interventions.

The synthetic generator is a small structural causal model: shape -> scale
and background -> contrast, with every other factor exogenous. Interventions
replace one structural equation and re-render while keeping all exogenous
noise fixed, so causal children update and everything else stays put.
"""
from __future__ import annotations

import csv
import math
import warnings
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import SeededRNG
from .pgm import write_pgm

SYNTHETIC_SHAPES = ("square", "circle", "triangle")
DSPRITES_SHAPES = ("square", "ellipse", "heart")
SYNTHETIC_FACTORS = ("shape", "scale", "orientation", "pos_x", "pos_y", "background", "contrast")
DSPRITES_FACTORS = ("shape", "scale", "orientation", "pos_x", "pos_y")
# column order of latents_classes / latents_values in the published archive
DSPRITES_COLUMNS = ("color", "shape", "scale", "orientation", "pos_x", "pos_y")

RANGES = {
    "scale": (0.5, 1.0),
    "orientation": (0.0, 2 * math.pi),
    "pos_x": (0.0, 1.0),
    "pos_y": (0.0, 1.0),
    "background": (0.0, 1.0),
    "contrast": (0.2, 1.0),
}
# half-extent of a scale-1.0 shape, as a fraction of the image side
_EXTENT = 0.25


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class FactorVector:
    shape: str
    scale: float
    orientation: float
    pos_x: float
    pos_y: float
    background: float = 0.0
    contrast: float = 1.0

    def clamped(self) -> "FactorVector":
        """Copy with every continuous factor clipped into its legal range (warns)."""
        changes = {}
        for name, (lo, hi) in RANGES.items():
            v = getattr(self, name)
            if name == "orientation":
                w = v % (2 * math.pi)
            else:
                w = min(max(v, lo), hi)
            if w != v:
                changes[name] = w
        if self.shape not in SYNTHETIC_SHAPES + DSPRITES_SHAPES:
            raise DatasetError(f"unknown shape {self.shape!r}")
        if changes:
            warnings.warn(f"factor values clamped into range: {sorted(changes)}", stacklevel=3)
            return replace(self, **changes)
        return self


# ------------------------------------------------------------------ rendering

def shape_mask(f: FactorVector, size: int = 64) -> np.ndarray:
    """Boolean foreground mask, sampled at pixel centres (no anti-aliasing)."""
    f = f.clamped()
    c = (np.arange(size) + 0.5) / size
    u, v = np.meshgrid(c, c)  # u: x (columns), v: y (rows, downward)
    dx, dy = u - f.pos_x, v - f.pos_y
    ct, st = math.cos(f.orientation), math.sin(f.orientation)
    x = ct * dx + st * dy
    y = -st * dx + ct * dy
    r = f.scale * _EXTENT
    if f.shape == "square":
        a = 0.85 * r
        return (np.abs(x) <= a) & (np.abs(y) <= a)
    if f.shape == "circle":
        return x * x + y * y <= r * r
    if f.shape == "ellipse":
        return (x / r) ** 2 + (y / (0.5 * r)) ** 2 <= 1.0
    if f.shape == "triangle":
        rho = 1.2 * r
        inside = np.ones_like(x, dtype=bool)
        for ang in (math.pi / 2, math.pi / 2 + 2 * math.pi / 3, math.pi / 2 + 4 * math.pi / 3):
            # outward edge normals sit opposite the vertices
            nx, ny = -math.cos(ang), math.sin(ang)
            inside &= x * nx + y * ny <= rho / 2
        return inside
    if f.shape == "heart":
        hx, hy = x / (r / 1.2), -y / (r / 1.2)
        return (hx * hx + hy * hy - 1.0) ** 3 - hx * hx * hy ** 3 <= 0.0
    raise DatasetError(f"unknown shape {f.shape!r}")


def render(f: FactorVector, size: int = 64) -> np.ndarray:
    """Grayscale raster: background fill, shape at background + contrast * (1 - background)."""
    f = f.clamped()
    mask = shape_mask(f, size)
    fg = min(max(f.background + f.contrast * (1.0 - f.background), 0.0), 1.0)
    img = np.full((size, size), f.background)
    img[mask] = fg
    return img


# ------------------------------------------------------------- synthetic SCM

@dataclass(frozen=True)
class Exogenous:
    """Per-sample exogenous noise of the synthetic SCM."""

    shape: int
    eps_scale: float
    orientation: float
    pos_x: float
    pos_y: float
    background: float
    eps_contrast: float


@dataclass(frozen=True)
class SyntheticSCM:
    base_size: tuple[tuple[str, float], ...] = (("square", 0.6), ("circle", 0.7), ("triangle", 0.5))
    size_noise: float = 0.05
    contrast_noise: float = 0.05
    background_range: tuple[float, float] = (0.0, 0.1)
    pos_range: tuple[float, float] = (0.25, 0.75)
    image_size: int = 64

    def base(self, shape: str) -> float:
        return dict(self.base_size)[shape]

    def sample_exogenous(self, rng: SeededRNG, n: int) -> list[Exogenous]:
        shapes = rng.integers(len(SYNTHETIC_SHAPES), n)
        eps_s = rng.uniform(n, -self.size_noise, self.size_noise)
        orient = rng.uniform(n, 0.0, 2 * math.pi)
        px = rng.uniform(n, *self.pos_range)
        py = rng.uniform(n, *self.pos_range)
        bg = rng.uniform(n, *self.background_range)
        eps_c = rng.uniform(n, -self.contrast_noise, self.contrast_noise)
        return [Exogenous(int(shapes[i]), float(eps_s[i]), float(orient[i]), float(px[i]),
                          float(py[i]), float(bg[i]), float(eps_c[i])) for i in range(n)]

    def solve(self, u: Exogenous, do: dict | None = None) -> FactorVector:
        """Evaluate the structural equations, with ``do`` overriding any of them."""
        do = dict(do or {})
        unknown = set(do) - set(SYNTHETIC_FACTORS)
        if unknown:
            raise DatasetError(f"unknown synthetic factor(s) {sorted(unknown)}")
        shape = do["shape"] if "shape" in do else SYNTHETIC_SHAPES[u.shape]
        if isinstance(shape, (int, np.integer)):
            shape = SYNTHETIC_SHAPES[int(shape)]
        if shape not in SYNTHETIC_SHAPES:
            raise DatasetError(f"unknown synthetic shape {shape!r}")
        lo, hi = RANGES["scale"]
        scale = do.get("scale", min(max(self.base(shape) + u.eps_scale, lo), hi))
        background = do.get("background", u.background)
        lo, hi = RANGES["contrast"]
        contrast = do.get("contrast",
                          min(max(0.2 + 0.8 * (1.0 - background) + u.eps_contrast, lo), hi))
        return FactorVector(shape=shape, scale=float(scale),
                            orientation=float(do.get("orientation", u.orientation)),
                            pos_x=float(do.get("pos_x", u.pos_x)),
                            pos_y=float(do.get("pos_y", u.pos_y)),
                            background=float(background), contrast=float(contrast))


# ------------------------------------------------------------------- handles

@dataclass
class DatasetHandle:
    images: np.ndarray  # (N, 1, S, S)
    factors: list[FactorVector]
    source: str
    scm: SyntheticSCM | None = None
    exogenous: list[Exogenous] = field(default_factory=list)
    # dSprites only
    classes: np.ndarray | None = None
    values: np.ndarray | None = None
    cardinalities: tuple[int, ...] = ()
    index: dict = field(default_factory=dict)
    positions: np.ndarray | None = None

    def __post_init__(self):
        if len(self.images) != len(self.factors):
            raise DatasetError(f"{len(self.images)} images but {len(self.factors)} factor rows")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def factor_names(self) -> tuple[str, ...]:
        return SYNTHETIC_FACTORS if self.source == "synthetic" else DSPRITES_FACTORS

    def factor_labels(self, name: str) -> np.ndarray:
        """Per-item factor values (shape as class index) for metrics."""
        if name == "shape":
            names = SYNTHETIC_SHAPES if self.source == "synthetic" else DSPRITES_SHAPES
            return np.array([names.index(f.shape) for f in self.factors])
        return np.array([getattr(f, name) for f in self.factors], dtype=np.float64)

    def subset(self, idx: Sequence[int]) -> "DatasetHandle":
        idx = list(idx)
        out = DatasetHandle(
            images=self.images[idx], factors=[self.factors[i] for i in idx], source=self.source,
            scm=self.scm, exogenous=[self.exogenous[i] for i in idx] if self.exogenous else [],
            classes=None if self.classes is None else self.classes[idx],
            values=None if self.values is None else self.values[idx],
            cardinalities=self.cardinalities,
            positions=None if self.positions is None else self.positions[idx])
        if out.classes is not None:
            out.index = {tuple(int(c) for c in row): i for i, row in enumerate(out.classes)}
        return out


def generate_synthetic(scm: SyntheticSCM, n: int, seed: int) -> DatasetHandle:
    if n < 1:
        raise DatasetError(f"n must be >= 1, got {n}")
    rng = SeededRNG(seed, stream=0x5C)
    exo = scm.sample_exogenous(rng, n)
    factors = [scm.solve(u) for u in exo]
    images = np.stack([render(f, scm.image_size) for f in factors])[:, None]
    return DatasetHandle(images=images, factors=factors, source="synthetic", scm=scm,
                         exogenous=exo)


def export_synthetic(handle: DatasetHandle, out_dir: str | Path) -> Path:
    """Write images/NNNNN.pgm plus factors.csv."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(len(handle) - 1)))
    with open(out / "factors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["idx", "shape", "scale", "orientation", "pos_x", "pos_y", "background",
                    "contrast"])
        for i, (img, f) in enumerate(zip(handle.images, handle.factors)):
            write_pgm(out / "images" / f"{i:0{width}d}.pgm", img[0])
            w.writerow([i, f.shape, repr(f.scale), repr(f.orientation), repr(f.pos_x),
                        repr(f.pos_y), repr(f.background), repr(f.contrast)])
    return out


# ---------------------------------------------------------------- intervene

def intervene_input(handle: DatasetHandle, idx: int, factor: str, value
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x, x_tilde)`` for do(factor = value) applied to item ``idx``."""
    if factor not in handle.factor_names:
        raise DatasetError(f"unknown factor {factor!r} for {handle.source} data; "
                           f"known: {handle.factor_names}")
    x = handle.images[idx]
    if handle.source == "synthetic":
        f = handle.scm.solve(handle.exogenous[idx], {factor: value})
        return x, render(f, handle.scm.image_size)[None]
    j = _dsprites_lookup(handle, idx, factor, value)
    return x, handle.images[j]


def _dsprites_target_class(handle: DatasetHandle, factor: str, value) -> int:
    col = DSPRITES_COLUMNS.index(factor)
    if factor == "shape" and isinstance(value, str):
        if value not in DSPRITES_SHAPES:
            raise DatasetError(f"unknown dSprites shape {value!r}")
        return DSPRITES_SHAPES.index(value)
    # map a factor value to the nearest class using the stored (class, value) pairs
    cls = handle.classes[:, col]
    vals = handle.values[:, col]
    table = {}
    for c, v in zip(cls, vals):
        table.setdefault(int(c), float(v))
    best = min(table, key=lambda c: (abs(table[c] - float(value)), c))
    return best


def _dsprites_lookup(handle: DatasetHandle, idx: int, factor: str, value) -> int:
    col = DSPRITES_COLUMNS.index(factor)
    target = _dsprites_target_class(handle, factor, value)
    base = tuple(int(c) for c in handle.classes[idx])
    want = base[:col] + (target,) + base[col + 1:]
    if want in handle.index:
        return handle.index[want]
    # nearest legal class value among loaded items agreeing on every other factor
    candidates = [(abs(c - target), c) for c in range(handle.cardinalities[col])
                  if base[:col] + (c,) + base[col + 1:] in handle.index]
    if not candidates:
        raise DatasetError(f"no loaded item matches {base} outside factor {factor!r}")
    _, c = min(candidates)
    return handle.index[base[:col] + (c,) + base[col + 1:]]


# ------------------------------------------------------------ dSprites archive

_REQUIRED = ("imgs", "latents_values", "latents_classes")
_ACCEPTED = {"imgs": ("|u1", "|b1"), "latents_values": ("<f8",), "latents_classes": ("<i8",)}


def _read_header(fh, name: str):
    try:
        version = np.lib.format.read_magic(fh)
        if version == (1, 0):
            shape, fortran, dtype = np.lib.format.read_array_header_1_0(fh)
        elif version == (2, 0):
            shape, fortran, dtype = np.lib.format.read_array_header_2_0(fh)
        else:
            raise DatasetError(f"{name}: unsupported array format version {version}")
    except DatasetError:
        raise
    except Exception as exc:  # numpy raises ValueError/SyntaxError on bad headers
        raise DatasetError(f"{name}: corrupt array header ({exc})") from exc
    if fortran:
        raise DatasetError(f"{name}: Fortran-ordered records are not supported")
    if dtype.str not in _ACCEPTED[name]:
        raise DatasetError(f"{name}: dtype {dtype.str} not accepted (want {_ACCEPTED[name]})")
    return shape, dtype


def _read_all(fh, name: str, shape, dtype) -> np.ndarray:
    nbytes = int(np.prod(shape)) * dtype.itemsize
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise DatasetError(f"{name}: truncated payload ({len(buf)} of {nbytes} bytes)")
    return np.frombuffer(buf, dtype=dtype).reshape(shape)


def inspect_dsprites(path: str | Path) -> dict[str, tuple]:
    """Header-only view: record name -> (shape, dtype string)."""
    out = {}
    with zipfile.ZipFile(path) as zf:
        for key in _REQUIRED:
            with zf.open(f"{key}.npy") as fh:
                shape, dtype = _read_header(fh, key)
                out[key] = (tuple(shape), dtype.str)
    return out


def _check_factor_grid(classes: np.ndarray, values: np.ndarray, cards: tuple[int, ...]) -> None:
    """Every class tuple occurs once and each (factor, class) has a single stored value."""
    flat = np.ravel_multi_index(classes.T, cards)
    if len(np.unique(flat)) != len(flat):
        raise DatasetError("latents_classes: repeated factor-class tuples (incomplete grid)")
    for j, name in enumerate(DSPRITES_COLUMNS):
        order = np.argsort(classes[:, j], kind="stable")
        c, v = classes[order, j], values[order, j]
        first = np.searchsorted(c, c)  # index of each class's first row
        bad = np.nonzero(v != v[first])[0]
        if len(bad):
            k = int(c[bad[0]])
            raise DatasetError(f"latents_values: factor {name!r} class {k} maps to several "
                               f"values")


def load_dsprites(path: str | Path, stride: int = 1, offset: int = 0,
                  chunk_rows: int = 4096) -> DatasetHandle:
    """Load the dSprites ``.npz`` archive, optionally keeping rows ``offset::stride``.

    Images are streamed out of the archive so a strided subsample never needs
    the full image tensor in memory.
    """
    path = Path(path)
    if stride < 1 or offset < 0:
        raise DatasetError("stride must be >= 1 and offset >= 0")
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise DatasetError(f"{path}: cannot open archive ({exc})") from exc
    with zf:
        names = set(zf.namelist())
        for key in _REQUIRED:
            if f"{key}.npy" not in names:
                raise DatasetError(f"{path}: missing record {key!r}")
        with zf.open("latents_classes.npy") as fh:
            cshape, cdt = _read_header(fh, "latents_classes")
            classes = _read_all(fh, "latents_classes", cshape, cdt)
        with zf.open("latents_values.npy") as fh:
            vshape, vdt = _read_header(fh, "latents_values")
            values = _read_all(fh, "latents_values", vshape, vdt)
        if classes.ndim != 2 or classes.shape[1] != len(DSPRITES_COLUMNS):
            raise DatasetError(f"latents_classes: expected (N, 6), got {classes.shape}")
        if values.shape != classes.shape:
            raise DatasetError(f"latents_values shape {values.shape} != classes {classes.shape}")
        n = classes.shape[0]
        cards = tuple(int(c) for c in classes.max(axis=0) + 1)
        if classes.min() < 0 or int(np.prod(cards)) != n:
            raise DatasetError(f"{n} records but factor-class cardinalities {cards} "
                               f"multiply to {int(np.prod(cards))}")
        _check_factor_grid(classes, values, cards)
        with zf.open("imgs.npy") as fh:
            ishape, idt = _read_header(fh, "imgs")
            if len(ishape) != 3 or ishape[0] != n:
                raise DatasetError(f"imgs: expected ({n}, H, W), got {ishape}")
            side = ishape[1:]
            rowbytes = int(np.prod(side)) * idt.itemsize
            keep = np.arange(offset, n, stride)
            imgs = np.empty((len(keep), *side), dtype=np.uint8)
            got = 0
            start = 0
            while start < n:
                rows = min(chunk_rows, n - start)
                buf = fh.read(rows * rowbytes)
                if len(buf) != rows * rowbytes:
                    raise DatasetError(f"imgs: truncated payload at row {start}")
                block = np.frombuffer(buf, dtype=idt).reshape(rows, *side)
                sel = keep[np.searchsorted(keep, start):np.searchsorted(keep, start + rows)]
                if len(sel):
                    imgs[got:got + len(sel)] = block[sel - start]
                    got += len(sel)
                start += rows
    if tuple(side) != (64, 64):
        raise DatasetError(f"imgs: expected 64x64 images, got {tuple(side)}")
    if imgs.size and imgs.max() > 1:
        raise DatasetError("imgs: values outside {0, 1}")
    classes, values = classes[keep], values[keep]
    factors = [FactorVector(shape=DSPRITES_SHAPES[int(r[1])], scale=float(v[2]),
                            orientation=float(v[3]) % (2 * math.pi), pos_x=float(v[4]),
                            pos_y=float(v[5]))
               for r, v in zip(classes, values)]
    handle = DatasetHandle(images=imgs[:, None].astype(np.float64), factors=factors,
                           source="dsprites", classes=classes.copy(), values=values.copy(),
                           cardinalities=cards, positions=keep)
    handle.index = {tuple(int(c) for c in row): i for i, row in enumerate(handle.classes)}
    return handle


def write_dsprites_like(path: str | Path, cardinalities=(1, 3, 3, 4, 4, 4)) -> Path:
    """Write a miniature archive with the dSprites record layout (full factor grid).

    The real archive is 1x3x6x40x32x32; this produces the same record names,
    dtypes and row ordering over a smaller grid, rendered with :func:`render`.
    """
    cards = tuple(int(c) for c in cardinalities)
    grids = np.meshgrid(*[np.arange(c) for c in cards], indexing="ij")
    classes = np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)

    def lin(k, lo, hi, closed=True):
        if k == 1:
            return np.array([lo])
        return np.linspace(lo, hi, k) if closed else np.linspace(lo, hi, k, endpoint=False)

    tables = [np.ones(cards[0]), np.arange(1, cards[1] + 1, dtype=float),
              lin(cards[2], 0.5, 1.0), lin(cards[3], 0.0, 2 * math.pi, closed=False),
              lin(cards[4], 0.25, 0.75), lin(cards[5], 0.25, 0.75)]
    values = np.stack([tables[j][classes[:, j]] for j in range(6)], axis=1)
    imgs = np.empty((len(classes), 64, 64), dtype=np.uint8)
    for i, v in enumerate(values):
        f = FactorVector(shape=DSPRITES_SHAPES[int(classes[i, 1]) % 3], scale=v[2],
                         orientation=v[3], pos_x=v[4], pos_y=v[5])
        imgs[i] = shape_mask(f, 64)
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_name(path.name + ".npz")
    np.savez_compressed(path, imgs=imgs, latents_values=values, latents_classes=classes)
    return path
