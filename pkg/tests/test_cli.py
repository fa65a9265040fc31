import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import random_scene
from locogs.cli import main
from locogs.model import load_ply, save_ply
from locogs.render import Camera, render, save_png
from locogs.synthetic import coherent_scene

FIELD_FLAGS = ["--levels", "3", "--min-res", "4", "--max-res", "32", "--table-size-log2", "8"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    lines = [json.loads(l) for l in out.splitlines() if l.strip()]
    return code, lines, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    save_ply(coherent_scene(400, seed=2), d / "scene.ply")
    code = main(["distill", str(d / "scene.ply"), "-o", str(d / "ckpt"), *FIELD_FLAGS,
                 "--iterations", "20", "--warmup-iters", "5", "--log-every", "10"])
    assert code == 0
    assert main(["encode", str(d / "ckpt"), "-o", str(d / "scene.locogs")]) == 0
    return d


def test_no_arguments_prints_usage(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "locogs.cli"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr


def test_errors_are_json_on_stderr(capsys, tmp_path):
    code, lines, err = run(capsys, "stats", tmp_path / "missing.locogs")
    assert code == 1 and lines == []
    rec = json.loads(err.strip().splitlines()[-1])
    assert rec["error"] == "FileNotFoundError"
    (tmp_path / "junk.locogs").write_bytes(b"nonsense bytes here, not a container")
    code, _, err = run(capsys, "stats", tmp_path / "junk.locogs")
    assert code == 1 and "magic" in json.loads(err.strip().splitlines()[-1])["message"]


def test_distill_logs_json_lines(capsys, tmp_path):
    save_ply(random_scene(60, seed=1), tmp_path / "s.ply")
    code, lines, _ = run(capsys, "distill", tmp_path / "s.ply", "-o", tmp_path / "ck", *FIELD_FLAGS,
                         "--iterations", "12", "--log-every", "5")
    assert code == 0
    assert [l["step"] for l in lines[:-1]] == [0, 5, 10, 11]
    assert set(lines[-1]["rmse"]) == {"opacity", "norm_scale", "rotation", "residual_sh"}
    assert {p.name for p in (tmp_path / "ck").iterdir()} == {"scene.ply", "explicit.npz", "field.bin", "masks.npz",
                                                              "config.json"}


def test_stats_reports_exact_categories(capsys, workspace):
    code, lines, _ = run(capsys, "stats", workspace / "scene.locogs")
    assert code == 0
    rec = lines[-1]
    assert list(rec["storage"]) == ["Position", "Color", "Scale", "Mask", "Hash+MLP", "Total"]
    parts = sum(v for k, v in rec["storage"].items() if k != "Total")
    assert parts == rec["storage"]["Total"] == rec["container_bytes"] - rec["header_bytes"]


def test_encode_decode_keeps_positions(capsys, workspace, tmp_path):
    code, _, _ = run(capsys, "decode", workspace / "scene.locogs", "-o", tmp_path / "out.ply",
                     "--field-out", tmp_path / "f.bin")
    assert code == 0 and (tmp_path / "f.bin").exists()
    src = load_ply(workspace / "scene.ply").positions.astype(np.float16).astype(np.float32)
    dec = load_ply(tmp_path / "out.ply").positions
    assert sorted(map(bytes, src)) == sorted(map(bytes, dec))


def test_encode_from_scene_and_field(capsys, workspace, tmp_path):
    code, lines, _ = run(capsys, "encode", "--scene", workspace / "ckpt" / "scene.ply",
                         "--field", workspace / "ckpt" / "field.bin", "-o", tmp_path / "b.locogs")
    assert code == 0 and lines[-1]["gaussians"] == 400
    code, _, err = run(capsys, "encode", "-o", tmp_path / "c.locogs")
    assert code == 1 and "checkpoint" in err


def test_cli_is_deterministic(capsys, workspace, tmp_path):
    for name in ("a", "b"):
        assert main(["distill", str(workspace / "scene.ply"), "-o", str(tmp_path / name), *FIELD_FLAGS,
                     "--iterations", "15"]) == 0
        assert main(["encode", str(tmp_path / name), "-o", str(tmp_path / f"{name}.locogs")]) == 0
    capsys.readouterr()
    assert (tmp_path / "a.locogs").read_bytes() == (tmp_path / "b.locogs").read_bytes()


def test_render_with_reference(capsys, workspace, tmp_path):
    args = ["--orbit", "2", "--size", "24"]
    code, lines, _ = run(capsys, "render", workspace / "scene.locogs", "-o", tmp_path / "a.png", *args)
    assert code == 0 and (tmp_path / "a.png").exists()
    code, lines, _ = run(capsys, "render", workspace / "scene.locogs", "-o", tmp_path / "b.png",
                         "--reference", tmp_path / "a.png", *args)
    assert lines[-1]["psnr"] == "inf" and lines[-1]["ssim"] == pytest.approx(1.0)


def test_analyze_writes_reports(capsys, workspace, tmp_path):
    code, lines, _ = run(capsys, "analyze", workspace / "scene.ply", "--pairs", "2000", "--thresholds", "0.1", "0.3",
                         "--json", tmp_path / "r.json", "--csv", tmp_path / "r.csv")
    assert code == 0
    assert len(lines[-1]["thresholds"]) == 2
    assert json.loads((tmp_path / "r.json").read_text())
    assert (tmp_path / "r.csv").read_text().count("\n") >= 2


def test_densify_then_train(capsys, tmp_path):
    code, lines, _ = run(capsys, "densify", "--field", "shell", "--rays", "200", "--samples", "128",
                         "--orbit", "2", "--size", "16", "-o", tmp_path / "pts.ply")
    assert code == 0 and 0 < lines[-1]["points"] <= 200
    scene = coherent_scene(50, seed=0)
    cam = Camera.look_at((0, -0.5, -3), (0, 0, 0), up=(0, -1, 0), width=16, height=16)
    save_png(render(scene, cam), tmp_path / "v0.png")
    (tmp_path / "views.json").write_text(json.dumps([{"image": "v0.png", "camera": cam.to_dict()}]))
    code, lines, _ = run(capsys, "train", "--views", tmp_path / "views.json", "--init", tmp_path / "pts.ply",
                         "-o", tmp_path / "ck", *FIELD_FLAGS, "--iterations", "6", "--prune-every", "3",
                         "--log-every", "2")
    assert code == 0
    assert lines[-1]["gaussians"] <= 200 and len(lines[-1]["survivors"]) == 2


def test_config_file_supplies_defaults(capsys, tmp_path):
    save_ply(random_scene(30, seed=5), tmp_path / "s.ply")
    (tmp_path / "cfg.json").write_text(json.dumps({"iterations": 3, "distill": {"log_every": 1, "levels": 2,
                                                                                "min_res": 2, "max_res": 8,
                                                                                "table_size_log2": 6}}))
    code, lines, _ = run(capsys, "--config", tmp_path / "cfg.json", "distill", tmp_path / "s.ply", "-o",
                         tmp_path / "ck")
    assert code == 0
    assert [l["step"] for l in lines[:-1]] == [0, 1, 2]
