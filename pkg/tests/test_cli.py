"""End-to-end tests of the command-line interface (in-process)."""

import json

import numpy as np
import pytest
from PIL import Image

from vplsim.cli import main
from vplsim.diffraction import load_psf_grid
from vplsim.segeval import ConfusionMatrix, accumulate, miou
from vplsim.vplgen import load_sample, validate_sample

SMALL = {
    "optics": {"pupil_samples": 32, "psf_kernel_size": 9, "padding_factor": 2,
               "pixel_pitch_um": 24.0},
    "layout": {"patch_size": 32, "overlap": 8},
}


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def _gen(tmp_path, cfg, level="C1", count=1, seed=11, sub="samples"):
    d = tmp_path / sub
    rc = main(["gen", "--level", level, "--count", str(count),
               "--seed", str(seed), "--out", str(d), "--config", cfg])
    assert rc == 0
    return d


def _png(path, shape=(40, 48), seed=0):
    rng = np.random.default_rng(seed)
    Image.fromarray(rng.integers(0, 256, size=(*shape, 3), dtype=np.uint8),
                    mode="RGB").save(path)
    return str(path)


# ---------------------------------------------------------------------------
# top-level behavior
# ---------------------------------------------------------------------------

def test_version_exits_zero(capsys):
    assert main(["--version"]) == 0
    assert "vplsim" in capsys.readouterr().out


def test_missing_subcommand_is_usage_error():
    assert main([]) == 2


def test_unknown_flag_is_usage_error():
    assert main(["gen", "--level", "1", "--out", "x", "--frobnicate"]) == 2


def test_unknown_level_is_usage_error(tmp_path):
    assert main(["gen", "--level", "C9", "--out", str(tmp_path)]) == 2
    assert main(["gen", "--level", "0", "--out", str(tmp_path)]) == 2


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def test_gen_writes_valid_samples_and_echo(tmp_path, cfg):
    d = _gen(tmp_path, cfg, level="C1", count=5, seed=7)
    files = sorted(d.glob("C1-*.json"))
    assert len(files) == 5
    assert (d / "run-config.json").exists()
    for f in files:
        validate_sample(load_sample(f))
    echo = json.loads((d / "run-config.json").read_text())
    assert echo["command"] == "gen" and echo["seed"] == 7
    assert echo["options"]["count"] == 5


def test_gen_is_deterministic(tmp_path, cfg):
    a = _gen(tmp_path, cfg, level="H3", count=3, seed=9, sub="a")
    b = _gen(tmp_path, cfg, level="H3", count=3, seed=9, sub="b")
    fa, fb = sorted(f.name for f in a.glob("H3-*")), sorted(
        f.name for f in b.glob("H3-*"))
    assert fa == fb
    for name in fa:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_gen_level_id_implies_behavior(tmp_path, cfg):
    d = _gen(tmp_path, cfg, level="H2", count=2)
    assert len(list(d.glob("H2-*.json"))) == 2


def test_gen_behavior_level_conflict(tmp_path):
    rc = main(["gen", "--level", "C1", "--behavior", "hrdl",
               "--out", str(tmp_path / "x")])
    assert rc == 2


def test_gen_level5_pools_base_levels(tmp_path, cfg):
    d = _gen(tmp_path, cfg, level="5", count=8, seed=3)
    prefixes = {f.name.split("-")[0] for f in d.glob("*.json")
                if f.name != "run-config.json"}
    assert prefixes == {"C1", "C2", "C3", "C4"}


def test_gen_level5_default_count_is_20(tmp_path, cfg):
    d = tmp_path / "pool"
    rc = main(["gen", "--level", "H5", "--seed", "1", "--out", str(d),
               "--config", cfg])
    assert rc == 0
    assert len([f for f in d.glob("*.json") if f.name != "run-config.json"]) == 20


# ---------------------------------------------------------------------------
# psf
# ---------------------------------------------------------------------------

def test_psf_builds_cache(tmp_path, cfg):
    d = _gen(tmp_path, cfg)
    sample_file = next(d.glob("C1-*.json"))
    cache = tmp_path / "cache"
    rc = main(["psf", "--sample", str(sample_file), "--out", str(cache),
               "--config", cfg])
    assert rc == 0
    grid_path = cache / (sample_file.stem + ".psfgrid")
    assert grid_path.exists()
    grid = load_psf_grid(grid_path)
    assert grid.kernel_size == 9
    assert grid.config.pupil_samples == 32


def test_flags_override_config_file(tmp_path, cfg):
    d = _gen(tmp_path, cfg)
    sample_file = next(d.glob("C1-*.json"))
    cache = tmp_path / "cache"
    rc = main(["psf", "--sample", str(sample_file), "--out", str(cache),
               "--config", cfg, "--kernel-size", "7"])
    assert rc == 0
    assert load_psf_grid(cache / (sample_file.stem + ".psfgrid")).kernel_size == 7


# ---------------------------------------------------------------------------
# degrade
# ---------------------------------------------------------------------------

def test_degrade_single_image(tmp_path, cfg, capsys):
    d = _gen(tmp_path, cfg)
    sid = next(d.glob("C1-*.json")).stem
    img = _png(tmp_path / "photo.png")
    out = tmp_path / "out"
    rc = main(["degrade", "--image", img, "--samples", str(d),
               "--sample-id", sid, "--out", str(out), "--config", cfg,
               "--seed", "2", "--jobs", "1"])
    assert rc == 0
    assert (out / f"photo__{sid}.png").exists()
    assert (out / "manifest.tsv").exists()
    assert (out / "run-config.json").exists()
    assert "degraded 1/1" in capsys.readouterr().out


def test_degrade_manifest_deterministic_across_jobs(tmp_path, cfg):
    d = _gen(tmp_path, cfg, count=2, seed=4)
    ins = [_png(tmp_path / f"i{k}.png", seed=k) for k in range(3)]
    man = tmp_path / "man.tsv"
    lines = ["vpl-manifest/1"] + [f"{p}\to{k}.png\t\t" for k, p in enumerate(ins)]
    man.write_text("\n".join(lines) + "\n")

    def run(sub, jobs):
        out = tmp_path / sub
        rc = main(["degrade", "--manifest", str(man), "--samples", str(d),
                   "--out", str(out), "--config", cfg, "--seed", "5",
                   "--jobs", str(jobs)])
        assert rc == 0
        return {f.name: f.read_bytes() for f in out.glob("o*.png")}

    first, second, parallel = run("r1", 1), run("r2", 1), run("r3", 2)
    assert len(first) == 3
    assert first == second
    assert first == parallel


def test_degrade_partial_failure_returns_one(tmp_path, cfg, capsys):
    d = _gen(tmp_path, cfg)
    sid = next(d.glob("C1-*.json")).stem
    good = _png(tmp_path / "ok.png")
    man = tmp_path / "man.tsv"
    man.write_text("vpl-manifest/1\n"
                   f"{good}\tok_out.png\t{sid}\t\n"
                   f"{tmp_path / 'missing.png'}\tbad_out.png\t{sid}\t\n")
    out = tmp_path / "out"
    rc = main(["degrade", "--manifest", str(man), "--samples", str(d),
               "--out", str(out), "--config", cfg, "--jobs", "1"])
    assert rc == 1
    assert (out / "ok_out.png").exists()
    assert not (out / "bad_out.png").exists()
    assert "missing.png" in capsys.readouterr().err


def test_degrade_unknown_sample_id_fails(tmp_path, cfg):
    d = _gen(tmp_path, cfg)
    img = _png(tmp_path / "p.png")
    rc = main(["degrade", "--image", img, "--samples", str(d),
               "--sample-id", "C9-deadbeef", "--out", str(tmp_path / "o"),
               "--config", cfg, "--jobs", "1"])
    assert rc == 1


def test_degrade_reuses_psf_cache(tmp_path, cfg):
    d = _gen(tmp_path, cfg)
    sid = next(d.glob("C1-*.json")).stem
    img = _png(tmp_path / "p.png")
    cache = tmp_path / "cache"
    argv = ["degrade", "--image", img, "--samples", str(d), "--sample-id", sid,
            "--out", str(tmp_path / "o1"), "--config", cfg, "--jobs", "1",
            "--psf-cache", str(cache)]
    assert main(argv) == 0
    grid_path = cache / f"{sid}.psfgrid"
    assert grid_path.exists()
    stamp = grid_path.stat().st_mtime_ns
    argv[argv.index("--out") + 1] = str(tmp_path / "o2")   # second run, cache hit
    assert main(argv) == 0
    assert grid_path.stat().st_mtime_ns == stamp
    # a config mismatch must not silently reuse the cache
    rc = main(argv + ["--pixel-pitch", "12.0"])
    assert rc == 1


# ---------------------------------------------------------------------------
# checkerboard
# ---------------------------------------------------------------------------

def test_checkerboard_cli(tmp_path, cfg, capsys):
    d = _gen(tmp_path, cfg, level="H1", seed=6)
    sample_file = next(d.glob("H1-*.json"))
    out = tmp_path / "diag" / "board.png"
    rc = main(["checkerboard", "--sample", str(sample_file), "--out", str(out),
               "--dims", "96x96", "--square", "8", "--config", cfg,
               "--json-summary", str(tmp_path / "s.json")])
    assert rc == 0
    assert out.exists()
    assert (out.parent / "board.config.json").exists()
    assert "gradient ratio" in capsys.readouterr().out
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["results"]["gradient_ratio"] > 0


def test_checkerboard_bad_dims_is_usage_error(tmp_path, cfg):
    assert main(["checkerboard", "--sample", "x.json", "--out", "o.png",
                 "--dims", "512by512"]) == 2


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _label(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path)


def test_eval_cli_matches_direct_scoring(tmp_path, capsys):
    pred_d, gt_d = tmp_path / "pred", tmp_path / "gt"
    pred_d.mkdir(), gt_d.mkdir()
    rng = np.random.default_rng(8)
    conf = ConfusionMatrix(n_classes=3)
    for name in ("a.png", "b.png"):
        gt = rng.integers(0, 3, size=(10, 10))
        pred = rng.integers(0, 3, size=(10, 10))
        _label(pred_d / name, pred)
        _label(gt_d / name, gt)
        accumulate(conf, pred, gt)
    rc = main(["eval", "--pred", str(pred_d), "--gt", str(gt_d),
               "--classes", "3", "--json-summary", str(tmp_path / "s.json")])
    assert rc == 0
    assert "mIoU" in capsys.readouterr().out
    doc = json.loads((tmp_path / "s.json").read_text())
    assert doc["results"]["miou"] == pytest.approx(miou(conf)[1])
    assert doc["results"]["pixels"] == 200


def test_eval_without_pairs_fails(tmp_path):
    (tmp_path / "pred").mkdir()
    (tmp_path / "gt").mkdir()
    rc = main(["eval", "--pred", str(tmp_path / "pred"),
               "--gt", str(tmp_path / "gt")])
    assert rc == 1
