"""Wave-optics PSF synthesis: pupil field, Fraunhofer transform, radius control.

The image of a point source is computed as the squared magnitude of one
centered FFT of the zero-padded pupil function (Fraunhofer regime).  With a
pupil sampled n times across its diameter D and padded by a factor pf, the
image-plane sample pitch is lam*d/(pf*D) micrometres, independent of n.

Kernels are brought onto the sensor lattice and to a prescribed geometric
spot radius (intensity second-moment radius) by bilinear resampling; the
spatial scale factor is solved by bracketing + bisection so the output rms
radius lands on target even when the first-guess factor is thrown off by
window truncation.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .zernike import PupilGrid, WavefrontMap, zernike_basis

CHANNELS = ("R", "G", "B")
N_FOV = 128

_MAGIC = b"PSFGRID\x00"
_CACHE_VERSION = 1


class TruncationError(ValueError):
    """Cropping the PSF discarded more energy than the configured limit."""


class DegeneratePsfError(ValueError):
    """PSF has no spatial extent to rescale (zero second moment)."""


@dataclass(frozen=True)
class DiffractionConfig:
    """Optical and sampling parameters for PSF synthesis.

    wavelengths maps each of the channels R, G, B to a wavelength in
    micrometres.  d_mm is the exit-pupil-to-image distance, pupil sample
    count must be a power of two with Nyquist headroom over the kernel.
    """

    wavelengths: tuple = (("R", 0.620), ("G", 0.550), ("B", 0.470))
    d_mm: float = 50.0
    pupil_diameter_mm: float = 10.0
    pupil_samples: int = 128
    padding_factor: int = 4
    psf_kernel_size: int = 63
    pixel_pitch_um: float = 12.0
    illumination_scale: float = 1.0
    truncation_limit: float = 0.01

    def __post_init__(self):
        chans = tuple(c for c, _ in self.wavelengths)
        if chans != CHANNELS:
            raise ValueError(f"wavelengths must list channels {CHANNELS} in order, got {chans}")
        for c, lam in self.wavelengths:
            if not lam > 0:
                raise ValueError(f"wavelength for {c} must be > 0, got {lam}")
        if not (self.d_mm > 0 and self.pupil_diameter_mm > 0):
            raise ValueError("d_mm and pupil_diameter_mm must be > 0")
        n = self.pupil_samples
        if n < 16 or (n & (n - 1)) != 0:
            raise ValueError(f"pupil_samples must be a power of two >= 16, got {n}")
        k = self.psf_kernel_size
        if k < 3 or k % 2 == 0:
            raise ValueError(f"psf_kernel_size must be odd and >= 3, got {k}")
        if n < 2 * k:
            raise ValueError(f"pupil_samples {n} < 2x kernel size {k} (Nyquist headroom)")
        if self.padding_factor < 2:
            raise ValueError("padding_factor must be >= 2")
        if not self.pixel_pitch_um > 0:
            raise ValueError("pixel_pitch_um must be > 0")
        if not 0 < self.truncation_limit < 1:
            raise ValueError("truncation_limit must be in (0, 1)")

    def wavelength(self, channel: str) -> float:
        for c, lam in self.wavelengths:
            if c == channel:
                return lam
        raise KeyError(f"unknown channel {channel!r}")

    def image_pitch_um(self, lam: float) -> float:
        """Image-plane sample pitch of the raw diffraction plane, um."""
        return lam * self.d_mm / (self.padding_factor * self.pupil_diameter_mm)


@dataclass(frozen=True)
class PsfKernel:
    """Unit-energy sampled PSF on a square pixel lattice."""

    weights: np.ndarray
    pitch_um: float
    fov_index: int = 0
    channel: str = "G"
    centroid: tuple = field(default=None)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"kernel must be square 2-D, got shape {w.shape}")
        if np.any(w < 0):
            raise ValueError("kernel weights must be non-negative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"kernel weights must sum to 1 within 1e-9, got {w.sum()!r}")
        if not 0 <= self.fov_index < N_FOV:
            raise ValueError(f"fov_index out of range [0, {N_FOV}): {self.fov_index}")
        if self.channel not in CHANNELS:
            raise ValueError(f"channel must be one of {CHANNELS}")
        if self.centroid is None:
            object.__setattr__(self, "centroid", _centroid(w))
        if not all(np.isfinite(self.centroid)):
            raise ValueError("kernel centroid is not finite")
        object.__setattr__(self, "weights", w)


def _centroid(w):
    s = w.sum()
    yy = np.arange(w.shape[0])
    cy = (w.sum(axis=1) @ yy) / s
    cx = (w.sum(axis=0) @ np.arange(w.shape[1])) / s
    return (float(cy), float(cx))


def pupil_field(wavefront: WavefrontMap, lam: float) -> np.ndarray:
    """Complex field at the exit pupil: mask * exp(i * 2 pi / lam * W).

    W is optical path difference in micrometres; lam in micrometres.
    Magnitude is 1 inside the aperture and 0 outside.
    """
    if not lam > 0:
        raise ValueError(f"wavelength must be > 0, got {lam}")
    phase = (2.0 * np.pi / lam) * wavefront.values
    return wavefront.grid.mask * np.exp(1j * phase)


def raw_psf_plane(pupil: np.ndarray, cfg: DiffractionConfig, lam: float) -> np.ndarray:
    """Full padded-plane PSF intensity |FFT(padded pupil)|^2, centered.

    Returned in arbitrary intensity units (illumination_scale/(lam*d))^2
    per unit pupil transmission; sample pitch is cfg.image_pitch_um(lam).
    """
    n = cfg.pupil_samples
    if pupil.shape != (n, n):
        raise ValueError(f"pupil shape {pupil.shape} != ({n}, {n})")
    m = cfg.padding_factor * n
    padded = np.zeros((m, m), dtype=complex)
    off = (m - n) // 2
    padded[off:off + n, off:off + n] = pupil
    e = np.fft.fftshift(np.fft.fft2(padded))
    scale = cfg.illumination_scale / (lam * cfg.d_mm)
    return (scale * scale) * (e.real ** 2 + e.imag ** 2)


def psf_compute(pupil, cfg: DiffractionConfig, channel: str = "G", *,
                fov_index: int = 0, kernel_size=None, truncation_limit=None) -> PsfKernel:
    """Diffraction PSF of a pupil field, cropped and normalized to unit sum.

    The PSF peak for an unaberrated pupil lands on the geometric center of
    the crop.  Raises TruncationError when the crop discards more than the
    truncation limit of the total energy (enlarge the kernel in that case).
    """
    lam = cfg.wavelength(channel)
    intensity = raw_psf_plane(pupil, cfg, lam)
    m = intensity.shape[0]
    k = cfg.psf_kernel_size if kernel_size is None else kernel_size
    limit = cfg.truncation_limit if truncation_limit is None else truncation_limit
    if k % 2 == 0 or k > m:
        raise ValueError(f"crop size must be odd and <= {m}, got {k}")
    c, r = m // 2, k // 2
    crop = intensity[c - r:c + r + 1, c - r:c + r + 1]
    total = intensity.sum()
    kept = crop.sum()
    if kept < (1.0 - limit) * total:
        raise TruncationError(
            f"{k}x{k} crop keeps {kept / total:.4f} of energy "
            f"(< {1 - limit:.4f}); enlarge psf_kernel_size")
    return PsfKernel(weights=crop / kept, pitch_um=cfg.image_pitch_um(lam),
                     fov_index=fov_index, channel=channel)


def rms_radius(psf: PsfKernel) -> float:
    """Second-moment (rms) radius about the centroid, micrometres."""
    w = psf.weights
    k = w.shape[0]
    yy, xx = np.mgrid[0:k, 0:k]
    cy, cx = psf.centroid
    m2 = (w * ((yy - cy) ** 2 + (xx - cx) ** 2)).sum() / w.sum()
    return float(np.sqrt(m2) * psf.pitch_um)


# ---------------------------------------------------------------------------
# radius-targeted resampling
# ---------------------------------------------------------------------------

def _moments_stack(raw):
    # per-slice sum, centroid, rms radius in pixels; raw: (B, H, W)
    b, h, w = raw.shape
    s = raw.sum(axis=(1, 2))
    yy = np.arange(h)
    xx = np.arange(w)
    cy = (raw.sum(axis=2) @ yy) / s
    cx = (raw.sum(axis=1) @ xx) / s
    dy2 = (yy[None, :] - cy[:, None]) ** 2
    dx2 = (xx[None, :] - cx[:, None]) ** 2
    m2 = (np.einsum("bhw,bh->b", raw, dy2) + np.einsum("bhw,bw->b", raw, dx2)) / s
    return s, cy, cx, np.sqrt(np.maximum(m2, 0.0))


def _sample_stack(raw, alpha, cy, cx, k):
    """Bilinear gather of each raw slice about (cy, cx), scaled by alpha.

    Output pixel (i, j) of slice b reads raw coordinate
    (cy[b] + (i - c)/alpha[b], cx[b] + (j - c)/alpha[b]); zero outside.
    """
    b, h, w = raw.shape
    rel = np.arange(k) - (k - 1) / 2.0
    oy = np.broadcast_to(cy[:, None, None] + rel[None, :, None] / alpha[:, None, None], (b, k, k))
    ox = np.broadcast_to(cx[:, None, None] + rel[None, None, :] / alpha[:, None, None], (b, k, k))
    y0 = np.floor(oy).astype(np.int64)
    x0 = np.floor(ox).astype(np.int64)
    fy = oy - y0
    fx = ox - x0
    bb = np.broadcast_to(np.arange(b)[:, None, None], (b, k, k))
    out = np.zeros((b, k, k))
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            ya = y0 + dy
            xa = x0 + dx
            ok = (ya >= 0) & (ya < h) & (xa >= 0) & (xa < w)
            contrib = np.zeros((b, k, k))
            contrib[ok] = raw[bb[ok], ya[ok], xa[ok]]
            out += contrib * wy * wx
    return out


def _rescale_stack(raw, pitch_in, targets, pitch_out, k, *, tol=0.005, context=""):
    """Resample a stack of raw PSF planes to k x k kernels with prescribed
    rms radii (micrometres at pitch_out).

    The per-slice spatial scale factor starts at target/rms(input) adjusted
    for the pitch change, then is refined by exponential bracketing and
    bisection on the measured output-window radius.  Every evaluation
    updates a best-so-far kernel, so slices whose window cannot represent
    the target keep the closest achievable radius instead of failing.
    """
    raw = np.asarray(raw, dtype=float)
    b = raw.shape[0]
    targets = np.asarray(targets, dtype=float)
    s, cy, cx, r_raw_px = _moments_stack(raw)
    if np.any(s <= 0):
        bad = int(np.argmax(s <= 0))
        raise DegeneratePsfError(f"empty PSF plane{context} (slice {bad})")
    degenerate = (r_raw_px * pitch_in < 1e-12) & (targets > 0)
    if np.any(degenerate):
        bad = int(np.argmax(degenerate))
        raise DegeneratePsfError(
            f"zero-extent PSF cannot be rescaled to positive radius{context} (slice {bad})")

    out = np.zeros((b, k, k))
    best_err = np.full(b, np.inf)
    zero_t = targets <= 0
    out[zero_t, k // 2, k // 2] = 1.0     # exact delta for zero targets
    best_err[zero_t] = 0.0

    idx = np.flatnonzero(~zero_t)
    if idx.size == 0:
        return out
    t = targets[idx]

    def evaluate(sel, a):
        """Sample slices idx[sel] at factors a; track best; return radii.

        Slices whose sampled window catches no mass report radius 0.
        """
        ids = idx[sel]
        sub = _sample_stack(raw[ids], a, cy[ids], cx[ids], k)
        ssum = sub.sum(axis=(1, 2))
        r = np.zeros(len(ids))
        nz = ssum > 0
        if np.any(nz):
            sub_n = sub[nz] / ssum[nz, None, None]
            _, _, _, r_px = _moments_stack(sub_n)
            r[nz] = r_px * pitch_out
            err = np.abs(r[nz] - targets[ids][nz])
            better = err < best_err[ids][nz]
            gids = ids[nz][better]
            out[gids] = sub_n[better]
            best_err[gids] = err[better]
        return r

    alpha = (t / np.maximum(r_raw_px[idx] * pitch_in, 1e-300)) * (pitch_in / pitch_out)
    all_sel = np.arange(idx.size)
    r0 = evaluate(all_sel, alpha)
    lo = alpha.copy()
    hi = alpha.copy()
    r_lo = r0.copy()
    r_hi = r0.copy()

    hi_tol = t * (1.0 + tol)
    lo_tol = t * (1.0 - tol)
    for _ in range(64):                    # grow hi until radius overshoots
        need = r_hi < lo_tol
        if not np.any(need):
            break
        hi[need] *= 1.7
        r_hi[need] = evaluate(np.flatnonzero(need), hi[need])
    for _ in range(80):                    # shrink lo until radius undershoots
        need = r_lo > hi_tol
        if not np.any(need):
            break
        lo[need] /= 1.7
        r_lo[need] = evaluate(np.flatnonzero(need), lo[need])
    for _ in range(48):                    # bisect bracketed, unconverged slices
        act = (best_err > tol * targets)[idx] & (r_hi >= lo_tol) & (r_lo <= hi_tol)
        if not np.any(act):
            break
        sel = np.flatnonzero(act)
        mid = np.sqrt(lo[sel] * hi[sel])
        r_mid = evaluate(sel, mid)
        under = r_mid < t[sel]
        lo[sel[under]] = mid[under]
        r_lo[sel[under]] = r_mid[under]
        hi[sel[~under]] = mid[~under]
        r_hi[sel[~under]] = r_mid[~under]

    sums = out.sum(axis=(1, 2))
    if np.any(sums <= 0):
        bad = int(np.argmax(sums <= 0))
        raise DegeneratePsfError(f"rescaled PSF lost all energy{context} (slice {bad})")
    return out / sums[:, None, None]


def rescale_psf(psf: PsfKernel, target_radius: float, *,
                pitch_um=None, kernel_size=None) -> PsfKernel:
    """Return a copy of the kernel resampled to the target rms radius.

    Optionally changes pitch and kernel size at the same time.  The output
    is re-centered on its centroid and renormalized; its rms radius matches
    the target within 3% unless the window saturates (target too large to
    represent), in which case the largest representable radius is kept.
    """
    if target_radius < 0:
        raise ValueError(f"target radius must be >= 0, got {target_radius}")
    p_out = psf.pitch_um if pitch_um is None else pitch_um
    k = psf.weights.shape[0] if kernel_size is None else kernel_size
    if target_radius > 0 and rms_radius(psf) < 1e-12:
        raise DegeneratePsfError("zero-extent PSF cannot be rescaled to a positive radius")
    out = _rescale_stack(psf.weights[None], psf.pitch_um, np.array([target_radius]),
                         p_out, k)
    return PsfKernel(weights=out[0], pitch_um=p_out,
                     fov_index=psf.fov_index, channel=psf.channel)


# ---------------------------------------------------------------------------
# full grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PsfGrid:
    """128 FoV x 3 channel bank of unit-energy kernels on one pixel lattice."""

    weights: np.ndarray          # (128, 3, k, k)
    pitch_um: float
    source: str
    config: DiffractionConfig

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 4 or w.shape[:2] != (N_FOV, len(CHANNELS)) or w.shape[2] != w.shape[3]:
            raise ValueError(f"grid weights must be (128, 3, k, k), got {w.shape}")
        if np.any(w < 0):
            raise ValueError("grid contains negative weights")
        sums = w.sum(axis=(2, 3))
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValueError("grid kernels must sum to 1 within 1e-9")
        object.__setattr__(self, "weights", w)

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    def kernel(self, fov_index: int, channel: str) -> PsfKernel:
        ci = CHANNELS.index(channel)
        return PsfKernel(weights=self.weights[fov_index, ci], pitch_um=self.pitch_um,
                         fov_index=fov_index, channel=channel)


def build_psf_grid(vpl, cfg: DiffractionConfig, *, chunk: int = 16) -> PsfGrid:
    """Render a full PSF grid for a lens sample.

    For each FoV and channel the Zernike column becomes a wavefront, the
    pupil field is transformed to the raw diffraction plane, and the plane
    is resampled onto the sensor lattice at the sample's radius target for
    that FoV.  The raw stage keeps the whole padded plane (losing only the
    outermost one-pixel strip, well under the truncation limit) so severe
    aberrations do not trip the crop check before resampling.

    FoVs are processed in vectorized chunks; there is no shared mutable
    state between (fov, channel) tasks beyond the output array.
    """
    coeffs = np.asarray(vpl.coefficients, dtype=float)
    targets = np.asarray(vpl.radius_targets, dtype=float)
    if coeffs.shape != (37, N_FOV, len(CHANNELS)):
        raise ValueError(f"coefficient field must be (37, 128, 3), got {coeffs.shape}")
    if targets.shape != (N_FOV,):
        raise ValueError(f"radius targets must be (128,), got {targets.shape}")

    grid = PupilGrid.make(cfg.pupil_samples)
    basis = zernike_basis(grid)
    mask = grid.mask
    n = cfg.pupil_samples
    m = cfg.padding_factor * n
    k = cfg.psf_kernel_size
    off = (m - n) // 2
    out = np.empty((N_FOV, len(CHANNELS), k, k))

    for ci, (channel, lam) in enumerate(cfg.wavelengths):
        p_raw = cfg.image_pitch_um(lam)
        wf = np.tensordot(coeffs[:, :, ci], basis, axes=(0, 0))    # (128, n, n)
        phase = (2.0 * np.pi / lam) * wf
        for lo_f in range(0, N_FOV, chunk):
            hi_f = min(lo_f + chunk, N_FOV)
            fields = mask * np.exp(1j * phase[lo_f:hi_f])
            padded = np.zeros((hi_f - lo_f, m, m), dtype=complex)
            padded[:, off:off + n, off:off + n] = fields
            e = np.fft.fftshift(np.fft.fft2(padded, axes=(-2, -1)), axes=(-2, -1))
            raw = e.real ** 2 + e.imag ** 2
            del e, padded, fields
            out[lo_f:hi_f, ci] = _rescale_stack(
                raw, p_raw, targets[lo_f:hi_f], cfg.pixel_pitch_um, k,
                context=f" (fov block {lo_f}..{hi_f - 1}, channel {channel})")
    return PsfGrid(weights=out, pitch_um=cfg.pixel_pitch_um,
                   source=getattr(vpl, "sample_id", ""), config=cfg)


# ---------------------------------------------------------------------------
# cache file
# ---------------------------------------------------------------------------

def _config_to_dict(cfg: DiffractionConfig) -> dict:
    return {
        "wavelengths": [[c, lam] for c, lam in cfg.wavelengths],
        "d_mm": cfg.d_mm,
        "pupil_diameter_mm": cfg.pupil_diameter_mm,
        "pupil_samples": cfg.pupil_samples,
        "padding_factor": cfg.padding_factor,
        "psf_kernel_size": cfg.psf_kernel_size,
        "pixel_pitch_um": cfg.pixel_pitch_um,
        "illumination_scale": cfg.illumination_scale,
        "truncation_limit": cfg.truncation_limit,
    }


def _config_from_dict(d: dict) -> DiffractionConfig:
    d = dict(d)
    d["wavelengths"] = tuple((c, lam) for c, lam in d["wavelengths"])
    return DiffractionConfig(**d)


def save_psf_grid(grid: PsfGrid, path) -> None:
    """Write a grid to the binary cache format (bit-exact round-trip)."""
    k = grid.kernel_size
    echo = json.dumps(
        {"source": grid.source, "pitch_um": grid.pitch_um, "kernel_size": k,
         "config": _config_to_dict(grid.config)},
        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _CACHE_VERSION))
        fh.write(struct.pack("<I", len(echo)))
        fh.write(echo)
        for fov in range(N_FOV):
            for ci in range(len(CHANNELS)):
                fh.write(struct.pack("<IId", fov, ci, grid.pitch_um))
                fh.write(grid.weights[fov, ci].astype("<f8").tobytes())


def load_psf_grid(path) -> PsfGrid:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a PSF cache file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        (elen,) = struct.unpack("<I", fh.read(4))
        echo = json.loads(fh.read(elen).decode("utf-8"))
        k = echo["kernel_size"]
        weights = np.empty((N_FOV, len(CHANNELS), k, k))
        for _ in range(N_FOV * len(CHANNELS)):
            hdr = fh.read(16)
            if len(hdr) != 16:
                raise ValueError(f"{path}: truncated cache file")
            fov, ci, pitch = struct.unpack("<IId", hdr)
            if pitch != echo["pitch_um"]:
                raise ValueError(f"{path}: kernel pitch disagrees with header")
            buf = fh.read(k * k * 8)
            if len(buf) != k * k * 8:
                raise ValueError(f"{path}: truncated cache file")
            weights[fov, ci] = np.frombuffer(buf, dtype="<f8").reshape(k, k)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes in cache file")
    return PsfGrid(weights=weights, pitch_um=echo["pitch_um"], source=echo["source"],
                   config=_config_from_dict(echo["config"]))
