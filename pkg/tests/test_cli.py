import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from neundiff.cli import main
from neundiff.raster import load_raster


def _png(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)
    return str(path)


def _csv(path, pts):
    path.write_text("x,y\n" + "".join(f"{x},{y}\n" for x, y in pts))
    return str(path)


@pytest.fixture
def synth_img(tmp_path):
    prefix = str(tmp_path / "s")
    assert main(["synth", "--out_prefix", prefix, "--width", "128", "--height", "128",
                 "--n_cells", "8", "--seed", "3"]) == 0
    return prefix


class TestDiffuse:
    def test_constant(self, tmp_path):
        src = _png(tmp_path / "c.png", np.full((16, 16), 100))
        out = tmp_path / "o.png"
        assert main(["diffuse", src, str(out)]) == 0
        assert np.all(np.asarray(Image.open(out)) == 100)

    def test_zero_iterations_copy(self, tmp_path):
        a = np.random.default_rng(0).integers(0, 256, (10, 12))
        src = _png(tmp_path / "r.png", a)
        out = tmp_path / "o.png"
        assert main(["diffuse", src, str(out), "--n_iters", "0"]) == 0
        np.testing.assert_array_equal(np.asarray(Image.open(out)), a)

    def test_extremum_bounds(self, tmp_path, synth_img):
        out = tmp_path / "o.png"
        assert main(["diffuse", synth_img + ".png", str(out)]) == 0
        a = load_raster(synth_img + ".png").data
        b = load_raster(out).data
        assert b.min() >= a.min() and b.max() <= a.max()


class TestDetect:
    def test_blank(self, tmp_path):
        src = _png(tmp_path / "b.png", np.full((32, 32), 255))
        out = tmp_path / "r.json"
        assert main(["detect", src, "--out", str(out)]) == 0
        rep = json.loads(out.read_text())
        assert rep["detections"] == []
        assert rep["rejected"]["above_threshold"] == rep["n_candidates"]
        assert (tmp_path / "r.csv").read_text() == "x,y\n"

    def test_single_cell(self, tmp_path):
        prefix = str(tmp_path / "one")
        main(["synth", "--out_prefix", prefix, "--width", "96", "--height", "96",
              "--n_cells", "1", "--seed", "9"])
        out = tmp_path / "r.json"
        assert main(["detect", prefix + ".png", "--out", str(out), "--intensity_threshold", "210"]) == 0
        rep = json.loads(out.read_text())
        assert len(rep["detections"]) == 1
        tx, ty = map(int, open(prefix + ".csv").read().splitlines()[1].split(","))
        d = rep["detections"][0]
        assert (d["x"] - tx) ** 2 + (d["y"] - ty) ** 2 <= 121

    def test_missing_input(self, tmp_path, capsys):
        code = main(["detect", str(tmp_path / "nope.png"), "--out", str(tmp_path / "r.json")])
        assert code == 2
        assert "nope.png" in capsys.readouterr().err

    def test_bad_param(self, tmp_path, synth_img):
        code = main(["detect", synth_img + ".png", "--out", str(tmp_path / "r.json"), "--lambda", "-1"])
        assert code == 1
        code = main(["detect", synth_img + ".png", "--out", str(tmp_path / "r.json"), "--dt", "0.5"])
        assert code == 1

    def test_config_rerun_is_byte_identical(self, tmp_path, synth_img):
        first = tmp_path / "a.json"
        main(["detect", synth_img + ".png", "--out", str(first), "--intensity_threshold", "205",
              "--boundary", "neumann"])
        second = tmp_path / "b.json"
        assert main(["detect", "--config", str(first), "--out", str(second)]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert json.loads(second.read_text())["config"] == json.loads(first.read_text())["config"]

    def test_config_unknown_key(self, tmp_path, synth_img):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"input": synth_img + ".png", "sigma": 3}))
        assert main(["detect", "--config", str(cfg), "--out", str(tmp_path / "r.json")]) == 1

    def test_threads_env(self, tmp_path, synth_img, monkeypatch):
        outs = []
        for n in ("1", "8"):
            monkeypatch.setenv("NEUNDIFF_THREADS", n)
            out = tmp_path / f"t{n}.json"
            assert main(["detect", synth_img + ".png", "--out", str(out)]) == 0
            outs.append((tmp_path / f"t{n}.csv").read_bytes())
        assert outs[0] == outs[1]
        monkeypatch.setenv("NEUNDIFF_THREADS", "many")
        assert main(["detect", synth_img + ".png", "--out", str(tmp_path / "x.json")]) == 1

    def test_downsample_maps_back(self, tmp_path):
        prefix = str(tmp_path / "big")
        main(["synth", "--out_prefix", prefix, "--width", "192", "--height", "192",
              "--n_cells", "6", "--seed", "2", "--noise_amplitude", "0"])
        out = tmp_path / "r.json"
        assert main(["detect", prefix + ".png", "--out", str(out), "--downsample",
                     "--intensity_threshold", "210", "--min_blob_area", "15"]) == 0
        rep = json.loads(out.read_text())
        assert rep["config"]["n_iters"] == 3
        truth = np.loadtxt(prefix + ".csv", delimiter=",", skiprows=1, ndmin=2)
        for d in rep["detections"]:
            assert np.min(np.hypot(truth[:, 0] - d["x"], truth[:, 1] - d["y"])) <= 11

    def test_timing(self, tmp_path, synth_img, capsys):
        main(["detect", synth_img + ".png", "--out", str(tmp_path / "r.json"), "--timing"])
        err = capsys.readouterr().err
        assert "timing diffuse" in err and "per_pixel" in err and "section" in err


class TestEval:
    def test_identical(self, tmp_path, capsys):
        a = _csv(tmp_path / "a.csv", [(0, 0), (50, 50)])
        b = _csv(tmp_path / "b.csv", [(0, 0), (50, 50)])
        assert main(["eval", a, b]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["pairwise"]["a|b"] == 1.0

    def test_delta_identical(self, tmp_path, capsys):
        pts = [(0, 0), (50, 50), (90, 10)]
        files = [_csv(tmp_path / f"r{i}.csv", pts) for i in range(3)]
        m = _csv(tmp_path / "m.csv", pts)
        assert main(["eval", *files, "--method", m]) == 0
        assert json.loads(capsys.readouterr().out)["delta_ratio"] == 1.0

    def test_three_of_four(self, tmp_path, capsys):
        a = _csv(tmp_path / "a.csv", [(0, 0), (100, 0), (200, 0), (300, 0)])
        b = _csv(tmp_path / "b.csv", [(2, 0), (100, 3), (201, 1), (300, 90)])
        assert main(["eval", a, b, "--radius", "11"]) == 0
        assert json.loads(capsys.readouterr().out)["pairwise"]["a|b"] == 0.6

    def test_truth(self, tmp_path, capsys):
        t = _csv(tmp_path / "t.csv", [(i * 40, 0) for i in range(10)])
        m = _csv(tmp_path / "m.csv", [(i * 40, 0) for i in range(9)] + [(999, 999)])
        assert main(["eval", "--truth", t, "--method", m]) == 0
        st = json.loads(capsys.readouterr().out)["detection_stats"]
        assert st["f1"] == 0.9

    def test_too_few(self, tmp_path):
        a = _csv(tmp_path / "a.csv", [(0, 0)])
        assert main(["eval", a]) == 1

    def test_malformed(self, tmp_path, capsys):
        a = _csv(tmp_path / "a.csv", [(0, 0)])
        bad = tmp_path / "bad.csv"
        bad.write_text("x,y\n1,2\nfoo\n")
        assert main(["eval", a, str(bad)]) == 1
        assert "line 3" in capsys.readouterr().err


class TestDensity:
    def test_frame_boundary(self, tmp_path, capsys):
        pts = _csv(tmp_path / "p.csv", [(26, 26), (27, 27)])
        out, counts = tmp_path / "d.png", tmp_path / "d.csv"
        assert main(["density", pts, "--width", "54", "--height", "54", "--blur_sigma", "0",
                     "--out", str(out), "--csv", str(counts), "--um_per_px", "0.5"]) == 0
        assert counts.read_text() == "1,0\n0,1\n"
        assert np.asarray(Image.open(out)).tolist() == [[255, 0], [0, 255]]
        meta = json.loads(capsys.readouterr().out)
        assert meta["n_points"] == 2 and meta["frame_area_um2"] == 13.5**2

    def test_like(self, tmp_path, synth_img):
        out = tmp_path / "d.png"
        assert main(["density", synth_img + ".csv", "--like", synth_img + ".png", "--out", str(out)]) == 0
        assert np.asarray(Image.open(out)).shape == (5, 5)

    def test_needs_dims(self, tmp_path):
        pts = _csv(tmp_path / "p.csv", [(1, 1)])
        assert main(["density", pts, "--out", str(tmp_path / "d.png")]) == 1

    def test_out_of_bounds(self, tmp_path):
        pts = _csv(tmp_path / "p.csv", [(100, 1)])
        assert main(["density", pts, "--width", "50", "--height", "50",
                     "--out", str(tmp_path / "d.png")]) == 1


class TestSynth:
    def test_outputs(self, synth_img):
        assert load_raster(synth_img + ".png").shape == (128, 128)
        assert len(open(synth_img + ".csv").read().splitlines()) == 9
        meta = json.loads(open(synth_img + ".json").read())
        assert meta["spec"]["seed"] == 3 and meta["spec"]["n_cells"] == 8

    def test_reproducible(self, tmp_path, synth_img):
        again = str(tmp_path / "again")
        main(["synth", "--out_prefix", again, "--width", "128", "--height", "128",
              "--n_cells", "8", "--seed", "3"])
        assert open(again + ".png", "rb").read() == open(synth_img + ".png", "rb").read()

    def test_infeasible(self, tmp_path):
        code = main(["synth", "--out_prefix", str(tmp_path / "x"), "--width", "30", "--height", "30",
                     "--n_cells", "50", "--max_retries", "20"])
        assert code == 1


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "neundiff", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "neundiff" in proc.stdout
