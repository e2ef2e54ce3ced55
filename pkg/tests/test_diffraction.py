"""PSF synthesis tests: oracles for the transform, moments and rescaling."""

from types import SimpleNamespace

import numpy as np
import numpy.testing as npt
import pytest

from vplsim.diffraction import (
    DegeneratePsfError,
    DiffractionConfig,
    PsfGrid,
    PsfKernel,
    TruncationError,
    build_psf_grid,
    load_psf_grid,
    psf_compute,
    pupil_field,
    raw_psf_plane,
    rescale_psf,
    rms_radius,
    save_psf_grid,
)
from vplsim.vplgen import level_spec, sample_vpl
from vplsim.zernike import JMAX, PupilGrid, wavefront_map


def cfg_with(**kw):
    return DiffractionConfig(**kw)


def wf(coeffs, n):
    c = np.zeros(JMAX)
    for j, v in coeffs.items():
        c[j - 1] = v
    return wavefront_map(c, PupilGrid.make(n))


def zero_sample(n_fov=128, radius=10.0, coeffs=None):
    c = np.zeros((37, 128, 3)) if coeffs is None else coeffs
    return SimpleNamespace(coefficients=c,
                           radius_targets=np.full(128, radius),
                           sample_id="synthetic")


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------


def test_config_defaults_valid():
    cfg = DiffractionConfig()
    assert cfg.wavelength("G") == 0.550
    assert cfg.image_pitch_um(0.550) == pytest.approx(0.55 * 50 / (4 * 10))


@pytest.mark.parametrize("kw", [
    {"pupil_samples": 100},              # not a power of two
    {"pupil_samples": 64},               # < 2x kernel
    {"psf_kernel_size": 64},             # even
    {"d_mm": 0.0},
    {"pupil_diameter_mm": -1.0},
    {"wavelengths": (("R", 0.62), ("G", -0.5), ("B", 0.47))},
    {"wavelengths": (("R", 0.62), ("B", 0.47), ("G", 0.55))},   # wrong order
    {"pixel_pitch_um": 0.0},
    {"truncation_limit": 0.0},
])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        DiffractionConfig(**kw)


# ---------------------------------------------------------------------------
# pupil field
# ---------------------------------------------------------------------------


def test_pupil_field_flat_wavefront():
    w = wf({}, 32)
    f = pupil_field(w, 0.55)
    npt.assert_array_equal(f[w.grid.mask], 1.0 + 0.0j)
    npt.assert_array_equal(f[~w.grid.mask], 0.0)


def test_pupil_field_half_wave_piston():
    lam = 0.55
    w = wf({1: lam / 2}, 32)
    f = pupil_field(w, lam)
    npt.assert_allclose(f[w.grid.mask], -1.0 + 0.0j, atol=1e-12)


def test_pupil_field_matches_pointwise_oracle():
    g = PupilGrid.make(16)
    rng = np.random.default_rng(3)
    vals = rng.normal(0, 0.3, (16, 16)) * g.mask
    from vplsim.zernike import WavefrontMap
    w = WavefrontMap(values=vals, grid=g)
    lam = 0.47
    f = pupil_field(w, lam)
    for i in range(16):
        for k in range(16):
            expect = (np.cos(2 * np.pi / lam * vals[i, k])
                      + 1j * np.sin(2 * np.pi / lam * vals[i, k])) if g.mask[i, k] else 0.0
            assert abs(f[i, k] - expect) < 1e-14


def test_pupil_field_rejects_bad_wavelength():
    with pytest.raises(ValueError):
        pupil_field(wf({}, 32), 0.0)


# ---------------------------------------------------------------------------
# psf_compute
# ---------------------------------------------------------------------------


def test_airy_peak_and_first_dark_ring():
    # padding factor 8: ring expected at 1.22 * 8 = 9.76 px from center
    cfg = cfg_with(pupil_samples=128, padding_factor=8, psf_kernel_size=63)
    psf = psf_compute(pupil_field(wf({}, 128), 0.55), cfg, "G", truncation_limit=0.2)
    w = psf.weights
    k = w.shape[0]
    assert np.unravel_index(np.argmax(w), w.shape) == (k // 2, k // 2)
    # azimuthally averaged profile via bilinear sampling on circles
    ang = np.linspace(0, 2 * np.pi, 256, endpoint=False)
    radii = np.arange(0, 20, 0.05)
    ys = k // 2 + radii[:, None] * np.sin(ang)
    xs = k // 2 + radii[:, None] * np.cos(ang)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy, fx = ys - y0, xs - x0
    prof = (w[y0, x0] * (1 - fy) * (1 - fx) + w[y0, x0 + 1] * (1 - fy) * fx
            + w[y0 + 1, x0] * fy * (1 - fx) + w[y0 + 1, x0 + 1] * fy * fx).mean(axis=1)
    floor = 0.05 * prof[0]
    i = 1
    while not (prof[i] < floor and prof[i] <= prof[i - 1] and prof[i] <= prof[i + 1]):
        i += 1
    ring_px = radii[i]
    expect_px = 1.22 * cfg.padding_factor
    assert abs(ring_px - expect_px) <= 1.0


def test_tilt_shifts_centroid_linearly():
    cfg = cfg_with(pupil_samples=128, padding_factor=4, psf_kernel_size=63)
    shifts = []
    for c in (0.25, 0.5):
        psf = psf_compute(pupil_field(wf({3: c}, 128), 0.55), cfg, "G",
                          truncation_limit=0.2)
        cy, cx = psf.centroid
        shifts.append(cy - 31)
        assert abs(cx - 31) < 0.05          # pure y-tilt: no x motion
    assert shifts[1] == pytest.approx(2.0 * shifts[0], rel=0.02)


def test_psf_unit_sum_exact():
    cfg = cfg_with(pupil_samples=64, padding_factor=4, psf_kernel_size=31)
    rng = np.random.default_rng(8)
    c = {j: v for j, v in zip((4, 6, 7), rng.normal(0, 0.1, 3))}
    psf = psf_compute(pupil_field(wf(c, 64), 0.62), cfg, "R", truncation_limit=0.5)
    assert psf.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(psf.weights >= 0)


@pytest.mark.parametrize("n", [16, 32])
def test_fft_matches_direct_dft(n):
    # independent O(N^4) oracle: explicit DFT matrix products
    cfg = cfg_with(pupil_samples=n, padding_factor=4, psf_kernel_size=n // 2 - 1)
    rng = np.random.default_rng(n)
    c = {j: v for j, v in zip((2, 3, 4, 5, 6, 7, 8, 9, 11), rng.normal(0, 0.15, 9))}
    pupil = pupil_field(wf(c, n), 0.55)
    m = cfg.padding_factor * n
    padded = np.zeros((m, m), complex)
    off = (m - n) // 2
    padded[off:off + n, off:off + n] = pupil
    omega = np.exp(-2j * np.pi * np.outer(np.arange(m), np.arange(m)) / m)
    direct = np.fft.fftshift(omega @ padded @ omega.T)
    expect = np.abs(direct) ** 2
    got = np.abs(np.fft.fftshift(np.fft.fft2(padded))) ** 2
    assert np.linalg.norm(got - expect) / np.linalg.norm(expect) < 1e-10
    # and the public op agrees on the cropped window
    psf = psf_compute(pupil, cfg, "G", truncation_limit=0.999)
    ctr = m // 2
    r = psf.weights.shape[0] // 2
    crop = expect[ctr - r:ctr + r + 1, ctr - r:ctr + r + 1]
    npt.assert_allclose(psf.weights, crop / crop.sum(), rtol=0, atol=1e-12)


def test_truncation_error_on_tight_crop():
    # Airy tails hold ~2.3% of energy outside a 63x63 crop at padding 4
    cfg = cfg_with(pupil_samples=128, padding_factor=4, psf_kernel_size=63)
    with pytest.raises(TruncationError):
        psf_compute(pupil_field(wf({}, 128), 0.55), cfg, "G")


def test_parseval_total_energy():
    cfg = cfg_with(pupil_samples=32, padding_factor=2, psf_kernel_size=15)
    g = PupilGrid.make(32)
    rng = np.random.default_rng(4)
    w = wf({j: v for j, v in zip((4, 5, 6), rng.normal(0, 0.2, 3))}, 32)
    lam = 0.55
    intensity = raw_psf_plane(pupil_field(w, lam), cfg, lam)
    m = cfg.padding_factor * 32
    scale = cfg.illumination_scale / (lam * cfg.d_mm)
    expect = m * m * g.mask.sum() * scale * scale
    assert intensity.sum() == pytest.approx(expect, rel=1e-6)


def test_shift_theorem_rms_invariance():
    # tilt translates the PSF without reshaping it: full-plane rms radius
    cfg = cfg_with(pupil_samples=128, padding_factor=4)
    base = {4: 0.08, 6: -0.05, 9: 0.04}

    def full_plane_rms(coeffs):
        lam = 0.55
        intensity = raw_psf_plane(pupil_field(wf(coeffs, 128), lam), cfg, lam)
        w = intensity / intensity.sum()
        m = w.shape[0]
        yy, xx = np.mgrid[0:m, 0:m]
        cy = (w * yy).sum()
        cx = (w * xx).sum()
        return np.sqrt((w * ((yy - cy) ** 2 + (xx - cx) ** 2)).sum())

    r0 = full_plane_rms(base)
    r1 = full_plane_rms({**base, 3: 0.3})
    r2 = full_plane_rms({**base, 2: -0.3})
    assert r1 == pytest.approx(r0, rel=0.01)
    assert r2 == pytest.approx(r0, rel=0.01)


# ---------------------------------------------------------------------------
# rms_radius / rescale_psf
# ---------------------------------------------------------------------------


def delta_kernel(k=15, pitch=1.0):
    w = np.zeros((k, k))
    w[k // 2, k // 2] = 1.0
    return PsfKernel(weights=w, pitch_um=pitch)


def test_rms_radius_delta_is_zero():
    assert rms_radius(delta_kernel()) == 0.0


def test_rms_radius_uniform_3x3():
    w = np.zeros((15, 15))
    w[6:9, 6:9] = 1.0 / 9.0
    psf = PsfKernel(weights=w, pitch_um=2.0)
    assert rms_radius(psf) == pytest.approx(2.0 * 2.0 / np.sqrt(3.0), rel=1e-12)


def test_rms_radius_gaussian():
    k = 63
    yy, xx = np.mgrid[0:k, 0:k] - (k - 1) / 2.0
    w = np.exp(-(yy ** 2 + xx ** 2) / (2 * 2.0 ** 2))
    psf = PsfKernel(weights=w / w.sum(), pitch_um=1.0)
    assert rms_radius(psf) == pytest.approx(2.0 * np.sqrt(2.0), rel=0.02)


def gaussian_kernel(k=63, sigma=3.0, pitch=1.0):
    yy, xx = np.mgrid[0:k, 0:k] - (k - 1) / 2.0
    w = np.exp(-(yy ** 2 + xx ** 2) / (2 * sigma ** 2))
    return PsfKernel(weights=w / w.sum(), pitch_um=pitch)


def test_rescale_identity():
    psf = gaussian_kernel()
    r0 = rms_radius(psf)
    out = rescale_psf(psf, r0)
    assert rms_radius(out) == pytest.approx(r0, rel=1e-3)


def test_rescale_doubles_radius():
    psf = gaussian_kernel(sigma=3.0)
    r0 = rms_radius(psf)
    out = rescale_psf(psf, 2.0 * r0)
    assert rms_radius(out) == pytest.approx(2.0 * r0, rel=0.03)
    assert out.weights.sum() == pytest.approx(1.0, abs=1e-9)


def test_rescale_shrinks_radius():
    psf = gaussian_kernel(sigma=6.0)
    r0 = rms_radius(psf)
    out = rescale_psf(psf, 0.5 * r0)
    assert rms_radius(out) == pytest.approx(0.5 * r0, rel=0.03)


def test_rescale_subpixel_target():
    psf = gaussian_kernel(sigma=5.0, pitch=12.0)
    out = rescale_psf(psf, 5.0)     # 0.42 px at this pitch
    assert rms_radius(out) == pytest.approx(5.0, rel=0.03)


def test_rescale_degenerate_delta():
    with pytest.raises(DegeneratePsfError):
        rescale_psf(delta_kernel(), 3.0)


def test_rescale_zero_target_gives_delta():
    psf = gaussian_kernel()
    out = rescale_psf(psf, 0.0)
    assert rms_radius(out) == 0.0
    assert out.weights[31, 31] == 1.0


def test_rescale_rejects_negative_target():
    with pytest.raises(ValueError):
        rescale_psf(gaussian_kernel(), -1.0)


# ---------------------------------------------------------------------------
# kernel / grid types
# ---------------------------------------------------------------------------


def test_kernel_rejects_negative_weights():
    w = np.full((5, 5), 1.0 / 25.0)
    w[0, 0] = -0.01
    w[0, 1] += 0.01 + 1.0 / 25.0
    with pytest.raises(ValueError):
        PsfKernel(weights=w, pitch_um=1.0)


def test_kernel_rejects_bad_sum():
    with pytest.raises(ValueError):
        PsfKernel(weights=np.full((5, 5), 0.1), pitch_um=1.0)


def test_grid_shape_enforced():
    with pytest.raises(ValueError):
        PsfGrid(weights=np.zeros((10, 3, 5, 5)), pitch_um=1.0, source="x",
                config=DiffractionConfig())


# ---------------------------------------------------------------------------
# build_psf_grid
# ---------------------------------------------------------------------------


def test_grid_zero_sample_all_kernels_equal():
    lam = 0.55
    mono = (("R", lam), ("G", lam), ("B", lam))
    cfg = cfg_with(wavelengths=mono, pupil_samples=128, padding_factor=4,
                   psf_kernel_size=63, pixel_pitch_um=0.6875)
    # diffraction-limited rms at the raw pitch, from a generous direct crop
    ref = psf_compute(pupil_field(wf({}, 128), lam), cfg, "G", truncation_limit=0.2)
    r_dl = rms_radius(ref)
    grid = build_psf_grid(zero_sample(radius=r_dl), cfg)
    w = grid.weights
    flat = w.reshape(-1, w.shape[2], w.shape[3])
    spread = np.abs(flat - flat[0]).max()
    assert spread < 1e-9
    assert grid.pitch_um == cfg.pixel_pitch_um


def test_grid_c3_edge_center_ratio_tracks_targets():
    sample = sample_vpl(level_spec("C3"), "csl", seed=20)
    cfg = cfg_with(pupil_samples=128, padding_factor=4, psf_kernel_size=63,
                   pixel_pitch_um=12.0)
    grid = build_psf_grid(sample, cfg)
    r_edge = rms_radius(grid.kernel(127, "G"))
    r_center = rms_radius(grid.kernel(0, "G"))
    assert r_edge > r_center
    expect = sample.radius_targets[127] / sample.radius_targets[0]
    assert r_edge / r_center == pytest.approx(expect, rel=0.05)


def test_grid_h1_radius_ratio_bounded():
    sample = sample_vpl(level_spec("H1"), "hrdl", seed=21)
    cfg = cfg_with(pupil_samples=128, padding_factor=4, psf_kernel_size=63,
                   pixel_pitch_um=4.0)
    grid = build_psf_grid(sample, cfg)
    radii = np.array([[rms_radius(grid.kernel(f, ch)) for ch in "RGB"]
                      for f in range(0, 128, 9)])
    assert radii.max() / radii.min() <= (25.0 / 15.0) * 1.05


def test_grid_csl_rms_tracks_monotone_targets():
    sample = sample_vpl(level_spec("C1"), "csl", seed=22)
    cfg = cfg_with(pupil_samples=128, padding_factor=4, psf_kernel_size=63,
                   pixel_pitch_um=2.5)
    grid = build_psf_grid(sample, cfg)
    radii = np.array([rms_radius(grid.kernel(f, "G")) for f in range(128)])
    # targets are exactly monotone; measured radii may jitter by the solve
    # tolerance, so allow 1% local slack while requiring the global trend
    assert np.all(np.diff(radii) >= -0.01 * radii[:-1])
    assert radii[-1] > radii[0]


def test_grid_rejects_bad_sample_shapes():
    bad = SimpleNamespace(coefficients=np.zeros((37, 64, 3)),
                          radius_targets=np.full(128, 5.0), sample_id="bad")
    with pytest.raises(ValueError):
        build_psf_grid(bad, DiffractionConfig())


# ---------------------------------------------------------------------------
# cache round-trip
# ---------------------------------------------------------------------------


def small_grid():
    cfg = cfg_with(pupil_samples=32, padding_factor=4, psf_kernel_size=15,
                   pixel_pitch_um=10.0)
    coeffs = np.zeros((37, 128, 3))
    coeffs[3, :, :] = np.linspace(0.0, 0.2, 128)[:, None]
    return build_psf_grid(zero_sample(radius=18.0, coeffs=coeffs), cfg), cfg


def test_cache_round_trip_bit_exact(tmp_path):
    grid, cfg = small_grid()
    path = tmp_path / "grid.psf"
    save_psf_grid(grid, path)
    loaded = load_psf_grid(path)
    assert np.array_equal(loaded.weights, grid.weights)
    assert loaded.pitch_um == grid.pitch_um
    assert loaded.source == grid.source
    assert loaded.config == grid.config
    again = tmp_path / "grid2.psf"
    save_psf_grid(loaded, again)
    assert path.read_bytes() == again.read_bytes()


def test_cache_rejects_corrupt_file(tmp_path):
    grid, _ = small_grid()
    path = tmp_path / "grid.psf"
    save_psf_grid(grid, path)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    bad = tmp_path / "bad.psf"
    bad.write_bytes(bytes(data))
    with pytest.raises(ValueError):
        load_psf_grid(bad)
    short = tmp_path / "short.psf"
    short.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(ValueError):
        load_psf_grid(short)
