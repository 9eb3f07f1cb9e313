import csv
import json

import pytest

from vmprior.checkpoint import load_prior
from vmprior.cli import main
from vmprior.datagen import read_clip
from vmprior.motion_prior import decode_latent, encode_clip

TRAIN_CFG = {
    "epochs": 2,
    "batch_size": 4,
    "log_every": 0,
    "prior": {"latent_dim": 16, "n_layers": 1, "n_heads": 2, "ff_dim": 32, "mapping_depth": 2, "clip_len": 8},
    "video": {"image_size": 16, "widths": [4, 4, 4], "dim": 8, "n_heads": 2, "ff_dim": 16, "n_spatial": 1,
              "n_temporal": 1, "pool_size": 1, "clip_len": 8},
}
DATA_CFG = {"counts": {"oscillate": 2, "keyframe_spline": 1, "drift_static": 1}, "T": 8, "image_size": 16}


def run(*argv):
    return main([str(a) for a in argv])


def run_fail(capsys, *argv):
    with pytest.raises(SystemExit) as exc:
        run(*argv)
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    return exc.value.code, err


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "train.json").write_text(json.dumps(TRAIN_CFG))
    (root / "data.json").write_text(json.dumps(DATA_CFG))
    assert run("gen-data", "--config", root / "data.json", "--seed", 4, "--out", root / "data") == 0
    manifest = root / "data" / "dataset.manifest.json"
    assert run("train-prior", "--config", root / "train.json", "--manifest", manifest, "--out", root / "p", "--deterministic") == 0
    return root


def clip_path(ws, name="oscillate_000"):
    return ws / "data" / "clips" / f"{name}.mclip.json"


def report(path):
    return json.loads((path / "report.json").read_text())


class TestGenData:
    def test_outputs(self, ws):
        rep = report(ws / "data")
        assert rep["n_clips"] == 4 and rep["manifest"] == "dataset.manifest.json"
        assert (ws / "data" / "videos" / "oscillate_000").is_dir()

    def test_seed_changes_data(self, ws, tmp_path):
        run("gen-data", "--config", ws / "data.json", "--seed", 5, "--out", tmp_path)
        assert read_clip(clip_path(ws)) != read_clip(tmp_path / "clips" / "oscillate_000.mclip.json")


class TestTraining:
    def test_prior_outputs(self, ws):
        names = {p.name for p in (ws / "p").iterdir()}
        assert {"prior.ckpt", "report.json", "curves.csv", "timing.json"} <= names
        rep = report(ws / "p")
        assert rep["stage"] == "prior" and "wall_clock_s" not in rep
        rows = list(csv.DictReader((ws / "p" / "curves.csv").open()))
        assert len(rows) == 2 and list(rows[0]) == ["epoch", "total", "l3d", "llb", "lv", "lkl", "l2d"]

    def test_deterministic_rerun_is_bit_identical(self, ws, tmp_path):
        manifest = ws / "data" / "dataset.manifest.json"
        run("train-prior", "--config", ws / "train.json", "--manifest", manifest, "--out", tmp_path, "--deterministic")
        for name in ("report.json", "curves.csv", "prior.ckpt"):
            assert (tmp_path / name).read_bytes() == (ws / "p" / name).read_bytes()

    def test_capture_stage(self, ws, tmp_path):
        manifest = ws / "data" / "dataset.manifest.json"
        assert run("train-capture", "--config", ws / "train.json", "--manifest", manifest,
                   "--prior", ws / "p" / "prior.ckpt", "--out", tmp_path, "--deterministic") == 0
        rep = report(tmp_path)
        assert rep["final_metrics"]["prior_digest_before"] == rep["final_metrics"]["prior_digest_after"]
        assert (tmp_path / "video_encoder.ckpt").exists()
        assert (tmp_path / "curves.csv").read_text().splitlines()[0].endswith(",lcam")

        out = tmp_path / "cap"
        video = ws / "data" / "videos" / "oscillate_000"
        assert run("capture", "--prior", ws / "p" / "prior.ckpt", "--encoder", tmp_path / "video_encoder.ckpt",
                   "--video", video, "--out", out, "--deterministic") == 0
        assert read_clip(out / "captured.mclip.json").num_frames == 8
        assert report(out)["camera"]["s"] > 0

    def test_capture_without_prior(self, ws, tmp_path, capsys):
        code, err = run_fail(capsys, "train-capture", "--config", ws / "train.json",
                             "--manifest", ws / "data" / "dataset.manifest.json", "--out", tmp_path)
        assert code == 1 and err["error"] == "MissingCheckpointError"


class TestInference:
    def test_synthesize(self, ws, tmp_path):
        run("synthesize", "--prior", ws / "p" / "prior.ckpt", "--n", 6, "--seed", 1, "--out", tmp_path,
            "--trace", tmp_path / "trace.csv", "--deterministic")
        rep = report(tmp_path)
        for key in ("apd", "clip_apd", "local_apd_s1", "local_apd_s5"):
            assert rep[key] > 0
        assert len(list((tmp_path / "clips").iterdir())) == 6
        rows = (tmp_path / "trace.csv").read_text().splitlines()
        assert rows[0] == "frame,joint,x,y,z" and len(rows) == 1 + 8 * 24

    def test_synthesize_same_latent_is_zero(self, ws, tmp_path):
        run("synthesize", "--prior", ws / "p" / "prior.ckpt", "--n", 4, "--same-latent", "--out", tmp_path)
        rep = report(tmp_path)
        assert rep["apd"] == rep["clip_apd"] == rep["local_apd_s1"] == rep["local_apd_s5"] == 0.0

    def test_synthesize_deterministic_reports(self, ws, tmp_path):
        for sub in ("a", "b"):
            run("synthesize", "--prior", ws / "p" / "prior.ckpt", "--n", 3, "--seed", 8, "--out", tmp_path / sub, "--deterministic")
        assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()

    def test_interpolate_two_steps_are_endpoints(self, ws, tmp_path):
        a, b = clip_path(ws), clip_path(ws, "drift_static_000")
        run("interpolate", "--prior", ws / "p" / "prior.ckpt", "--clip-a", a, "--clip-b", b, "--steps", 2,
            "--out", tmp_path, "--deterministic")
        prior = load_prior(ws / "p" / "prior.ckpt")
        for i, src in enumerate((a, b)):
            expected = decode_latent(prior, encode_clip(prior, read_clip(src)).mu)
            assert read_clip(tmp_path / "clips" / f"step_{i:03d}.mclip.json") == expected
        assert len(report(tmp_path)["step_displacement"]) == 1

    def test_rectify(self, ws, tmp_path):
        run("rectify", "--prior", ws / "p" / "prior.ckpt", "--clip", clip_path(ws), "--reference", clip_path(ws), "--out", tmp_path)
        rep = report(tmp_path)
        assert rep["input_mpjpe"] == 0.0 and rep["output_mpjpe"] == rep["input_vs_output_mpjpe"]

    def test_evaluate_identical_is_zero(self, ws, tmp_path):
        run("evaluate", "--pred", clip_path(ws), "--gt", clip_path(ws), "--out", tmp_path, "--deterministic")
        rep = report(tmp_path)
        assert {k: rep[k] for k in ("mpjpe", "pa_mpjpe", "mpvpe", "accel")} == dict.fromkeys(("mpjpe", "pa_mpjpe", "mpvpe", "accel"), 0.0)

    def test_evaluate_length_mismatch(self, ws, tmp_path, capsys):
        run("gen-data", "--out", tmp_path / "d")  # default T=16
        code, err = run_fail(capsys, "evaluate", "--pred", clip_path(ws), "--gt", tmp_path / "d" / "clips" / "oscillate_000.mclip.json",
                             "--out", tmp_path / "e")
        assert code == 1 and err["error"] == "ConfigError"


class TestErrors:
    def test_unknown_command(self, tmp_path, capsys):
        code, err = run_fail(capsys, "frobnicate", "--out", tmp_path)
        assert code == 2 and err["error"] == "UsageError"

    def test_missing_required_flag(self, capsys):
        code, err = run_fail(capsys, "evaluate", "--pred", "x")
        assert code == 2 and "required" in err["message"]

    def test_seed_range(self, tmp_path, capsys):
        code, err = run_fail(capsys, "gen-data", "--seed", 2**64, "--out", tmp_path)
        assert code == 2

    def test_malformed_config(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text("{not json")
        code, err = run_fail(capsys, "train-prior", "--config", tmp_path / "bad.json", "--out", tmp_path)
        assert code == 1 and err["error"] == "ConfigError" and "bad.json:1:2" in err["message"]

    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"epochz": 1}))
        code, err = run_fail(capsys, "train-prior", "--config", tmp_path / "c.json", "--out", tmp_path)
        assert code == 1 and "epochz" in err["message"]

    def test_missing_prior_checkpoint(self, tmp_path, capsys):
        code, err = run_fail(capsys, "synthesize", "--prior", tmp_path / "none.ckpt", "--out", tmp_path)
        assert code == 1 and err["error"] == "MissingCheckpointError"

    def test_malformed_clip(self, ws, tmp_path, capsys):
        (tmp_path / "c.mclip.json").write_text(json.dumps({"version": 1}))
        code, err = run_fail(capsys, "evaluate", "--pred", tmp_path / "c.mclip.json", "--gt", clip_path(ws), "--out", tmp_path)
        assert code == 1 and err["error"] == "ClipFormatError"
