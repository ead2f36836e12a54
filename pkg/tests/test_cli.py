"""End-to-end command-line pipeline at micro scale."""

import json
import shutil

import pytest

from voxelgen.cli import main

MICRO = """
seed = 13
corpus_size = 12
grid_size = 16
holdout_size = 4
clip_epochs = 1
vae_epochs = 1
diffusion_epochs = 1
classifier_epochs = 1
timesteps = 5
permutation_trials = 10
utility_size = 4
eval_batch_size = 8
retrieval_k = 2
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "micro.cfg"
    cfg.write_text(MICRO)
    out = root / "run"
    for command in ("make-data", "train-clip", "train-vae", "cache-latents",
                    "train-diffusion"):
        assert main([command, "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


class TestPipeline:
    def test_artifacts_exist(self, run_dir):
        _, out = run_dir
        for name in ("corpus/manifest.jsonl", "vocab.txt", "clip.pt",
                     "vae.pt", "latents.bin", "denoiser.pt",
                     "config.resolved.txt"):
            assert (out / name).exists(), name

    def test_generate_and_evals(self, run_dir):
        cfg, out = run_dir
        assert main(["generate", "--config", str(cfg), "--out", str(out),
                     "--limit", "3"]) == 0
        records = [json.loads(line) for line in
                   (out / "generated" / "manifest.jsonl").read_text().splitlines()]
        assert len(records) == 3
        assert (out / "generated" / records[0]["volume"]).exists()
        for command in ("eval-zeroshot", "eval-retrieval", "eval-fid"):
            assert main([command, "--config", str(cfg), "--out", str(out)]) == 0
        report = json.loads((out / "eval" / "zeroshot.json").read_text())
        assert 0.0 <= report["metrics"]["auc_macro"] <= 1.0
        report = json.loads((out / "eval" / "retrieval.json").read_text())
        assert report["gallery_size"] == 4 and report["k"] == 2

    def test_generate_prompt_flag(self, run_dir, tmp_path):
        cfg, out = run_dir
        work = tmp_path / "promptrun"
        shutil.copytree(out, work)
        assert main(["generate", "--config", str(cfg), "--out", str(work),
                     "--prompt", "this scan shows signs of lung nodule."]) == 0
        lines = (work / "generated" / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 1

    def test_generate_deterministic(self, run_dir, tmp_path):
        cfg, out = run_dir
        a = tmp_path / "a"
        b = tmp_path / "b"
        shutil.copytree(out, a)
        shutil.copytree(out, b)
        for work in (a, b):
            assert main(["generate", "--config", str(cfg), "--out", str(work),
                         "--limit", "2"]) == 0
        for rel in ("generated/manifest.jsonl", "generated/volumes/000000.vox",
                    "generated/volumes/000001.vox"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def test_render_slices(self, run_dir, tmp_path):
        cfg, out = run_dir
        vol = out / "corpus" / "volumes" / "000000.vox"
        work = tmp_path / "render"
        assert main(["render-slices", "--out", str(work),
                     "--volume", str(vol), "--planes", "axial,coronal"]) == 0
        image = (work / "renders" / "000000_axial.pgm").read_bytes()
        assert image.startswith(b"P5\n")
        assert not (work / "renders" / "000000_sagittal.pgm").exists()


class TestErrorPaths:
    def test_usage_error_exit_2(self):
        assert main(["no-such-command"]) == 2

    def test_bad_config_exit_3(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("grid_size = 16\n")  # seed missing
        assert main(["make-data", "--config", str(cfg),
                     "--out", str(tmp_path / "out")]) == 3

    def test_unknown_key_exit_3(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("seed = 1\nnot_a_key = 5\n")
        assert main(["make-data", "--config", str(cfg),
                     "--out", str(tmp_path / "out")]) == 3

    def test_diffusion_without_latents_exit_3(self, run_dir, tmp_path, capsys):
        cfg, out = run_dir
        work = tmp_path / "nolatents"
        shutil.copytree(out, work)
        (work / "latents.bin").unlink()
        assert main(["train-diffusion", "--config", str(cfg),
                     "--out", str(work)]) == 3
        assert "cache-latents" in capsys.readouterr().err

    def test_clip_before_data_exit_3(self, tmp_path, capsys):
        cfg = tmp_path / "micro.cfg"
        cfg.write_text(MICRO)
        assert main(["train-clip", "--config", str(cfg),
                     "--out", str(tmp_path / "empty")]) == 3
        assert "make-data" in capsys.readouterr().err

    def test_failure_removes_partial_outputs(self, run_dir, tmp_path):
        cfg, out = run_dir
        work = tmp_path / "partial"
        shutil.copytree(out, work)
        shutil.rmtree(work / "generated", ignore_errors=True)
        (work / "clip.pt").unlink()
        # vocab.txt exists but clip.pt is gone: generate must fail without
        # leaving a generated/ directory behind
        assert main(["generate", "--config", str(cfg), "--out", str(work),
                     "--limit", "1"]) == 3
        assert not (work / "generated").exists()

    def test_seed_flag_overrides_config(self, run_dir, tmp_path):
        cfg, out = run_dir
        work = tmp_path / "seeded"
        shutil.copytree(out, work)
        assert main(["generate", "--config", str(cfg), "--out", str(work),
                     "--limit", "1", "--seed", "99"]) == 0
        text = (work / "config.resolved.txt").read_text()
        assert "seed = 99" in text
        first = (work / "generated" / "volumes" / "000000.vox").read_bytes()
        assert main(["generate", "--config", str(cfg), "--out", str(work),
                     "--limit", "1", "--seed", "100"]) == 0
        second = (work / "generated" / "volumes" / "000000.vox").read_bytes()
        assert first != second
