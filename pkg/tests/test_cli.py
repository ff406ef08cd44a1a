import json
import subprocess
import sys
import time

import numpy as np
import pytest

from fruitsplat.cli import main
from fruitsplat.colmap import parse_colmap_model
from fruitsplat.dataset import write_image
from fruitsplat.gaussians import GaussianCloud, export_ply, import_ply

SMALL = ["--n-gaussians", "50", "--n-cameras", "8", "--image-size", "32", "--n-background", "16"]


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "scene"
    assert main(["synth", "--out", str(out), *SMALL]) == 0
    return out


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_layout(fixture_dir):
    for rel in ("sparse/cameras.bin", "sparse/images.bin", "sparse/points3D.bin", "gt.ply",
                "ground_truth.json", "config.json", "images/frame_0001.png",
                "masks/strawberry/frame_0001.png", "masks/bruise/frame_0001.png"):
        assert (fixture_dir / rel).is_file(), rel
    frames, points = parse_colmap_model(fixture_dir / "sparse")
    assert len(frames) == 8 and len(points) == 66
    truth = json.loads((fixture_dir / "ground_truth.json").read_text())
    assert truth["strawberry_count"] == 50


def test_synth_same_seed_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), *SMALL, "--seed", "4"]) == 0
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_synth_rejects_single_camera(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"), "--n-cameras", "1"]) != 0
    assert "n_cameras" in capsys.readouterr().err


def test_synth_bruise_fraction(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "z"), *SMALL, "--bruise-fraction", "0"]) == 0
    assert json.loads((tmp_path / "z" / "ground_truth.json").read_text())["bruise_fraction"] == 0.0
    assert main(["synth", "--out", str(tmp_path / "bad"), "--bruise-fraction", "1.2"]) != 0


def test_train_smoke_under_60s(fixture_dir, tmp_path, capsys):
    t0 = time.perf_counter()
    code = main(["train", str(fixture_dir / "config.json"), "--steps", "100", "--output-dir", str(tmp_path / "r1")])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    assert code == 0 and elapsed < 60.0
    assert "held-out PSNR:" in out and "final losses:" in out
    for rel in ("checkpoint.ply", "checkpoint.json", "losses.csv", "metrics.json", "renders/frame_0001.png"):
        assert (tmp_path / "r1" / rel).is_file(), rel
    side = json.loads((tmp_path / "r1" / "checkpoint.json").read_text())
    assert side["step"] == 100 and side["seed"] == 0

    assert main(["train", str(fixture_dir / "config.json"), "--steps", "100",
                 "--output-dir", str(tmp_path / "r2")]) == 0
    assert _tree_bytes(tmp_path / "r1") == _tree_bytes(tmp_path / "r2")


def test_train_missing_image_dir(fixture_dir, tmp_path, capsys):
    cfg = json.loads((fixture_dir / "config.json").read_text())
    cfg["data"]["image_dir"] = "no_such_images"
    (fixture_dir / "broken.json").write_text(json.dumps(cfg))
    assert main(["train", str(fixture_dir / "broken.json"), "--steps", "1"]) != 0
    err = capsys.readouterr().err
    assert "no_such_images" in err and "config" in err


def test_train_missing_config(tmp_path, capsys):
    assert main(["train", str(tmp_path / "nope.json")]) == 1
    assert "nope.json" in capsys.readouterr().err


def test_render_and_export(fixture_dir, tmp_path, capsys):
    gt = fixture_dir / "gt.ply"
    assert main(["render", str(gt), "--model", str(fixture_dir / "sparse"), "--frames", "1", "2",
                 "--out", str(tmp_path / "r")]) == 0
    assert sorted(p.name for p in (tmp_path / "r").iterdir()) == [
        "frame_0001.png", "frame_0001_bruise.png", "frame_0001_strawberry.png",
        "frame_0002.png", "frame_0002_bruise.png", "frame_0002_strawberry.png"]
    assert (tmp_path / "r" / "frame_0001.png").read_bytes() == (fixture_dir / "images" / "frame_0001.png").read_bytes()
    assert main(["render", str(gt), "--model", str(fixture_dir / "sparse"), "--frames", "99",
                 "--out", str(tmp_path / "r")]) == 1

    assert main(["export", str(gt), "--out", str(tmp_path / "e.ply"), "--strawberry-threshold", "0.5"]) == 0
    exported = import_ply(tmp_path / "e.ply")
    assert len(exported) == 50
    assert np.allclose(exported.s_logits, import_ply(gt).s_logits[:50], atol=1e-6)


def test_ingest(fixture_dir, tmp_path, capsys):
    assert main(["ingest", str(fixture_dir / "sparse"), "--images", str(fixture_dir / "images"),
                 "--strawberry-masks", str(fixture_dir / "masks/strawberry"),
                 "--convert", str(tmp_path / "txt"), "--to", "text"]) == 0
    out = capsys.readouterr().out
    assert "8 frames, 1 cameras, 66 points" in out and "8 with masks" in out
    assert parse_colmap_model(tmp_path / "txt", "text")[0] == parse_colmap_model(fixture_dir / "sparse")[0]
    assert main(["ingest", str(tmp_path / "empty")]) == 1


def _ply(path, s_logits, b_logits):
    n = len(s_logits)
    cloud = GaussianCloud(np.zeros((n, 3)), np.zeros((n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)), np.zeros(n),
                          np.zeros((n, 3)), s_logits, b_logits)
    export_ply(cloud, path)


def test_analyze(tmp_path, capsys):
    _ply(tmp_path / "a.ply", [5.0] * 4, [-5.0, -5.0, -5.0, 5.0])
    assert main(["analyze", str(tmp_path / "a.ply"), str(tmp_path / "a.ply"), "--out", str(tmp_path / "r.json")]) == 0
    assert json.loads((tmp_path / "r.json").read_text())["delta_pct"] == 0.0
    assert "+0.00%" in capsys.readouterr().out


def test_analyze_filter_error_surfaced(tmp_path, capsys):
    _ply(tmp_path / "u.ply", [0.0] * 5, [0.0] * 5)  # untrained logits
    assert main(["analyze", str(tmp_path / "u.ply"), str(tmp_path / "u.ply"), "--strawberry-threshold", "0.999"]) == 1
    assert "no strawberry points above threshold" in capsys.readouterr().err


def test_analyze_threshold_validated(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["analyze", "a", "b", "--bruise-threshold", "1.5"])
    assert exc.value.code == 2


HEADER = "fruit_id,phase,point_index,force_newtons,displacement_mm\n"


def test_stiffness(tmp_path, capsys):
    p = tmp_path / "s.csv"
    p.write_text(HEADER + "".join(f"f1,PRE,{i},0.5,1.25\nf1,POST,{i},0.25,1.25\n" for i in range(4))
                 + "".join(f"f2,PRE,{i},0.3,1.25\nf2,POST,{i},0.3,1.25\n" for i in range(4)))
    assert main(["stiffness", str(p), "--out", str(tmp_path / "s.json")]) == 0
    out = capsys.readouterr().out
    assert "50.00" in out and "100.00" in out
    fruits = json.loads((tmp_path / "s.json").read_text())["fruits"]
    assert fruits[0]["pre_k"] == pytest.approx(0.4) and fruits[1]["retention_pct"] == 100.0


def test_stiffness_malformed_row(tmp_path, capsys):
    p = tmp_path / "s.csv"
    p.write_text(HEADER + "f1,PRE,0,0.5,1.25\nf1,PRE,1,0.5\n")
    assert main(["stiffness", str(p)]) == 1
    assert "s.csv:3" in capsys.readouterr().err


def _tactile_dir(root, images):
    root.mkdir()
    for i, img in enumerate(images):
        write_image(root / f"{i:03d}.png", img)
    return root


def test_contact(tmp_path, capsys):
    ref = np.full((8, 8, 3), 0.4)
    write_image(tmp_path / "ref.png", ref)
    frames = [ref, ref, ref + 0.2, ref + 0.4]
    d = _tactile_dir(tmp_path / "frames", frames)
    assert main(["contact", "--frames", str(d), "--reference", str(tmp_path / "ref.png"), "--tau", "1.0",
                 "--out", str(tmp_path / "c.csv")]) == 0
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "index,energy,contact_flag"
    assert [l.split(",")[2] for l in lines[1:]] == ["0", "0", "1", "1"]
    assert float(lines[3].split(",")[1]) == pytest.approx(64 * (51 / 255) ** 2, rel=1e-9)
    assert "first contact: 2" in capsys.readouterr().out

    calib = _tactile_dir(tmp_path / "calib", [ref, ref])
    assert main(["contact", "--frames", str(d), "--reference", str(tmp_path / "ref.png"),
                 "--calibrate", str(calib)]) == 0
    assert capsys.readouterr().out.splitlines()[1:] == ["0,0.0,0", "1,0.0,0",
                                                        f"2,{lines[3].split(',')[1]},1", f"3,{lines[4].split(',')[1]},1"]


def test_contact_empty_dir(tmp_path, capsys):
    write_image(tmp_path / "ref.png", np.zeros((4, 4, 3)))
    (tmp_path / "frames").mkdir()
    assert main(["contact", "--frames", str(tmp_path / "frames"), "--reference", str(tmp_path / "ref.png"),
                 "--tau", "1"]) == 1
    assert "no PNG frames" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "fruitsplat", "stiffness", str(tmp_path / "missing.csv")],
                         capture_output=True, text=True)
    assert res.returncode == 1 and "missing.csv" in res.stderr
    res = subprocess.run([sys.executable, "-m", "fruitsplat", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "fruitsplat" in res.stdout
