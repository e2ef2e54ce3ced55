"""Spatially variant image degradation and dataset processing.

Images are processed in linear light: 8-bit sRGB PNGs are decoded to
float [0, 1], degraded, then re-encoded.  Degradation is patch-wise: the
image is tiled with overlapping patches, each patch is convolved per
channel with the PSF kernel of the field-of-view bin at its center, and
overlaps are blended with tent weights normalized to an exact partition
of unity.  Boundaries use reflect padding of the whole image, so a grid
of identical kernels reproduces plain whole-image convolution exactly.
"""

import concurrent.futures
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.signal import fftconvolve

from .diffraction import CHANNELS, N_FOV, PsfGrid

DEFAULT_PATCH = 64
DEFAULT_OVERLAP = 16


# ---------------------------------------------------------------------------
# sRGB / image I/O
# ---------------------------------------------------------------------------

def srgb_to_linear(u):
    u = np.asarray(u, dtype=float)
    return np.where(u <= 0.04045, u / 12.92, ((u + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(v):
    v = np.clip(np.asarray(v, dtype=float), 0.0, 1.0)
    return np.where(v <= 0.0031308, 12.92 * v, 1.055 * v ** (1 / 2.4) - 0.055)


def load_rgb(path) -> np.ndarray:
    """Read an image as linear-light float (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(arr)


def save_rgb(path, img) -> None:
    """Encode linear-light float (H, W, 3) to an 8-bit sRGB PNG."""
    img = _check_image(img)
    u8 = np.round(linear_to_srgb(img) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def _check_image(img):
    a = np.asarray(img, dtype=float)
    if a.ndim != 3 or a.shape[2] != 3 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"image must be (H, W, 3), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("image contains non-finite values")
    if a.min() < -1e-9 or a.max() > 1.0 + 1e-9:
        raise ValueError("image values must lie in [0, 1]")
    return np.clip(a, 0.0, 1.0)


# ---------------------------------------------------------------------------
# patch layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchLayout:
    patch_size: int = DEFAULT_PATCH
    overlap: int = DEFAULT_OVERLAP

    def __post_init__(self):
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if not 0 <= self.overlap < self.patch_size:
            raise ValueError(
                f"overlap must be in [0, patch_size), got {self.overlap}")

    def positions(self, dim: int):
        """Patch start offsets covering [0, dim), last patch flush with the end."""
        if dim <= self.patch_size:
            return [0]
        stride = self.patch_size - self.overlap
        starts = list(range(0, dim - self.patch_size + 1, stride))
        if starts[-1] + self.patch_size < dim:
            starts.append(dim - self.patch_size)
        return starts


def fov_of_pixel(x, y, width: int, height: int):
    """Radial field position of a pixel: (normalized field, FoV bin).

    field = distance from image center / distance center-to-corner, so the
    exact corners map to 1.0 and bin 127.
    """
    if not (0 <= x < width and 0 <= y < height):
        raise ValueError(f"pixel ({x}, {y}) outside {width}x{height} image")
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    rmax = np.hypot(cx, cy)
    field = float(np.hypot(x - cx, y - cy) / rmax) if rmax > 0 else 0.0
    index = min(int(field * 127.999), N_FOV - 1)
    return field, index


def _tent(length: int) -> np.ndarray:
    t = np.arange(length, dtype=float)
    return np.minimum(t + 1.0, length - t)


def patch_cover(layout: PatchLayout, height: int, width: int):
    """Tile an image with overlapping patches and normalized blend weights.

    Returns a list of (y0, x0, ph, pw, weights, fov_index) with the weight
    maps summing to exactly 1 at every pixel (normalized in place).
    """
    ys = layout.positions(height)
    xs = layout.positions(width)
    patches = []
    acc = np.zeros((height, width))
    for y0 in ys:
        ph = min(layout.patch_size, height - y0)
        wy = _tent(ph)
        for x0 in xs:
            pw = min(layout.patch_size, width - x0)
            w = np.outer(wy, _tent(pw))
            _, fov = fov_of_pixel(x0 + (pw - 1) / 2.0, y0 + (ph - 1) / 2.0,
                                  width, height)
            patches.append([y0, x0, ph, pw, w, fov])
            acc[y0:y0 + ph, x0:x0 + pw] += w
    for rec in patches:
        y0, x0, ph, pw, w, _ = rec
        rec[4] = w / acc[y0:y0 + ph, x0:x0 + pw]
    return [tuple(rec) for rec in patches]


# ---------------------------------------------------------------------------
# degradation
# ---------------------------------------------------------------------------

def degrade_image(img, grid: PsfGrid, layout: PatchLayout = PatchLayout()) -> np.ndarray:
    """Apply a PSF grid to one linear-light image, patch by patch."""
    img = _check_image(img)
    h, w, _ = img.shape
    k = grid.kernel_size
    if k > layout.patch_size + layout.overlap:
        raise ValueError(
            f"kernel size {k} exceeds patch_size + overlap = "
            f"{layout.patch_size + layout.overlap}")
    r = k // 2
    if r >= h or r >= w:
        raise ValueError(f"image {h}x{w} smaller than kernel margin {r}")
    padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode="reflect")
    out = np.zeros_like(img)
    for y0, x0, ph, pw, weights, fov in patch_cover(layout, h, w):
        region = padded[y0:y0 + ph + 2 * r, x0:x0 + pw + 2 * r]
        for ci in range(3):
            conv = fftconvolve(region[:, :, ci], grid.weights[fov, ci], mode="valid")
            out[y0:y0 + ph, x0:x0 + pw, ci] += conv * weights
    return np.clip(out, 0.0, 1.0)


def checkerboard(height: int, width: int, square_px: int) -> np.ndarray:
    """Linear-light black/white checkerboard, white square at top-left."""
    if square_px < 1:
        raise ValueError("square_px must be >= 1")
    yy, xx = np.mgrid[0:height, 0:width]
    pattern = ((yy // square_px + xx // square_px) % 2 == 0).astype(float)
    return np.repeat(pattern[:, :, None], 3, axis=2)


def render_checkerboard(vpl, dims, square_px: int, cfg,
                        layout: PatchLayout = PatchLayout(), grid=None) -> np.ndarray:
    """Degrade a synthetic checkerboard through a sample's PSF grid.

    dims is (height, width); pass a prebuilt grid to skip the PSF build.
    """
    from .diffraction import build_psf_grid
    height, width = dims
    if min(height, width) < cfg.psf_kernel_size:
        raise ValueError(f"dims {dims} smaller than kernel {cfg.psf_kernel_size}")
    if grid is None:
        grid = build_psf_grid(vpl, cfg)
    return degrade_image(checkerboard(height, width, square_px), grid, layout)


def annulus_gradient_ratio(img, inner: float = 0.2, outer=(0.8, 1.0)) -> float:
    """Mean gradient magnitude in an outer annulus over the central disk.

    Radii are fractions of the inscribed-circle radius, so the annulus is
    a complete ring and averages the target pattern over all angles; the
    luminance gradient is a proxy for local sharpness on structured
    targets.  On a clean checkerboard with several squares per region the
    ratio sits near 1.
    """
    img = _check_image(img)
    lum = img.mean(axis=2)
    gy, gx = np.gradient(lum)
    mag = np.hypot(gy, gx)
    h, w = lum.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    rr = np.hypot(yy - cy, xx - cx) / min(cy, cx)
    disk = rr <= inner
    ring = (rr >= outer[0]) & (rr <= outer[1])
    inner_mean = mag[disk].mean()
    if inner_mean == 0:
        raise ValueError("central disk has no gradient signal")
    return float(mag[ring].mean() / inner_mean)


# ---------------------------------------------------------------------------
# dataset manifests
# ---------------------------------------------------------------------------

MANIFEST_SCHEMA = "vpl-manifest/1"


@dataclass
class ManifestEntry:
    input_path: str
    output_path: str
    sample_id: str = ""
    seed: int = None


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    schema: str = MANIFEST_SCHEMA

    def __post_init__(self):
        outs = [e.output_path for e in self.entries]
        if len(set(outs)) != len(outs):
            raise ValueError("duplicate output paths in manifest")


def read_manifest(path) -> DatasetManifest:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != MANIFEST_SCHEMA:
            raise ValueError(f"{path}: expected manifest header {MANIFEST_SCHEMA!r}, "
                             f"got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            inp, out, sid, seed = parts
            entries.append(ManifestEntry(inp, out, sid,
                                         int(seed) if seed else None))
    return DatasetManifest(entries=entries)


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(MANIFEST_SCHEMA + "\n")
        for e in manifest.entries:
            seed = "" if e.seed is None else str(int(e.seed))
            fh.write(f"{e.input_path}\t{e.output_path}\t{e.sample_id}\t{seed}\n")


def default_output_name(input_path: str, sample_id: str) -> str:
    stem = input_path.rsplit("/", 1)[-1]
    stem = stem.rsplit(".", 1)[0]
    return f"{stem}__{sample_id}.png"


# worker-process state for parallel dataset degradation
_WORKER = {}


def _worker_init(grids, layout):
    _WORKER["grids"] = grids
    _WORKER["layout"] = layout


def _worker_run(task):
    index, input_path, output_path, sample_id = task
    try:
        img = load_rgb(input_path)
        out = degrade_image(img, _WORKER["grids"][sample_id], _WORKER["layout"])
        save_rgb(output_path, out)
        return index, None
    except Exception as exc:      # per-entry isolation: record and continue
        return index, f"{type(exc).__name__}: {exc}"


@dataclass
class DegradeResult:
    manifest: DatasetManifest
    failures: list


def degrade_dataset(manifest: DatasetManifest, grids: dict,
                    layout: PatchLayout = PatchLayout(), *,
                    seed: int = 0, jobs: int = 1) -> DegradeResult:
    """Degrade every manifest entry with its assigned (or drawn) sample.

    Entries without a sample id get one by a seeded uniform choice over the
    sorted sample ids; the draw depends only on (seed, entry index), so
    results do not depend on job count or completion order.  Failures are
    recorded per entry and processing continues; if nothing succeeds the
    whole run is an error.
    """
    if not grids:
        raise ValueError("no samples supplied")
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    ids = sorted(grids)
    completed = []
    for index, entry in enumerate(manifest.entries):
        sid = entry.sample_id
        if not sid:
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence([seed, index])))
            sid = ids[int(rng.integers(len(ids)))]
        if sid not in grids:
            raise KeyError(f"manifest references unknown sample {sid!r}")
        completed.append(ManifestEntry(entry.input_path, entry.output_path, sid,
                                       seed if entry.seed is None else entry.seed))
    tasks = [(i, e.input_path, e.output_path, e.sample_id)
             for i, e in enumerate(completed)]

    failures = []
    if jobs == 1:
        _worker_init(grids, layout)
        results = map(_worker_run, tasks)
    else:
        pool = concurrent.futures.ProcessPoolExecutor(
            max_workers=jobs, initializer=_worker_init, initargs=(grids, layout))
        results = pool.map(_worker_run, tasks)
    for index, error in results:
        if error is not None:
            failures.append((completed[index], error))
    if jobs > 1:
        pool.shutdown()
    if len(failures) == len(completed) and completed:
        raise RuntimeError(f"all {len(completed)} entries failed; first error: "
                           f"{failures[0][1]}")
    return DegradeResult(manifest=DatasetManifest(entries=completed),
                         failures=failures)
