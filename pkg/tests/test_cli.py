import numpy as np
import pytest

from msca import checkpoint, cli
from msca.diffcore import suite
from msca.imageio import read_image, write_image, write_label_grid
from msca.metrics import parse_results
from msca.selfsup import gen_synthetic_scene
from msca.synthesis import GeneratorParams, ModelConfig

CLASSES = 3


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A tiny generator checkpoint plus a few 16x16 scenes on disk."""
    root = tmp_path_factory.mktemp("cli")
    params = GeneratorParams.init(ModelConfig.tiny(classes=CLASSES, levels=3), seed=2)
    checkpoint.save(root / "g.bin", params.named())
    assert cli.main(["gen-data", "--n", "3", "--extent", "16", "--classes", str(CLASSES),
                     "--out", str(root / "scenes"), "--seed", "4"]) == 0
    big = gen_synthetic_scene(np.random.default_rng(8), CLASSES, 32)
    write_image(root / "center.png", big.image[:, 8:24, 8:24])
    write_label_grid(root / "center_label.png", big.label.grid[8:24, 8:24])
    write_label_grid(root / "global_label.png", big.label.grid)
    return root


def scene_args(work, i=0, flag="--exemplar"):
    return [flag, str(work / "scenes" / f"scene_{i:04d}.png"),
            f"{flag}-label", str(work / "scenes" / f"scene_{i:04d}_label.png")]


class TestUsage:
    def test_no_args(self, capsys):
        assert cli.main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert cli.main(["paint"]) == 1
        err = capsys.readouterr().err
        assert "invalid choice" in err and "usage" in err

    def test_help_is_success(self, capsys):
        assert cli.main(["synth", "--help"]) == 0
        assert "--dump-attention" in capsys.readouterr().out

    def test_missing_required_flag(self):
        assert cli.main(["synth", "--checkpoint", "x.bin"]) == 1

    def test_bad_config_key(self, work, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("colour = blue\n")
        assert cli.main(["train", "--data", str(work / "scenes"), "--out", str(tmp_path / "o"),
                         "--config", str(cfg)]) == 1

    def test_missing_file_is_runtime_failure(self, work, tmp_path, capsys):
        rc = cli.main(["synth", "--checkpoint", str(work / "g.bin"), "--label", str(tmp_path / "no.png"),
                       *scene_args(work), "--out", str(tmp_path / "o.png")])
        assert rc == 2
        assert "msca:" in capsys.readouterr().err


class TestGenData:
    def test_writes_scene_pairs(self, tmp_path):
        assert cli.main(["gen-data", "--n", "8", "--extent", "128", "--out", str(tmp_path)]) == 0
        images = sorted(p.name for p in tmp_path.glob("*.png") if not p.stem.endswith("_label"))
        labels = sorted(tmp_path.glob("*_label.png"))
        assert len(images) == 8 and len(labels) == 8
        assert read_image(tmp_path / images[0]).shape == (3, 128, 128)

    def test_seed_reproducible(self, tmp_path):
        for d in ("a", "b"):
            assert cli.main(["gen-data", "--n", "2", "--extent", "16", "--seed", "7",
                             "--out", str(tmp_path / d)]) == 0
        for p in (tmp_path / "a").iterdir():
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


class TestSynthesis:
    def test_synth_and_attention_dump(self, work, tmp_path):
        out = tmp_path / "x.png"
        rc = cli.main(["synth", "--checkpoint", str(work / "g.bin"),
                       "--label", str(work / "scenes" / "scene_0001_label.png"), *scene_args(work),
                       "--out", str(out), "--dump-attention", str(tmp_path / "att")])
        assert rc == 0
        assert read_image(out).shape == (3, 16, 16)
        assert (tmp_path / "att" / "gates.txt").exists()
        assert (tmp_path / "att" / "alpha_s0_k0.png").exists()

    def test_synth_bit_reproducible_in_64_bit(self, work, tmp_path):
        for name in ("a.png", "b.png"):
            assert cli.main(["synth", "--checkpoint", str(work / "g.bin"), "--dtype", "float64",
                             "--label", str(work / "scenes" / "scene_0002_label.png"),
                             *scene_args(work), "--out", str(tmp_path / name), "--seed", "3"]) == 0
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_interpolate_modes(self, work, tmp_path):
        base = ["interpolate", "--checkpoint", str(work / "g.bin"),
                "--label", str(work / "scenes" / "scene_0000_label.png"),
                *scene_args(work, 1), *scene_args(work, 2, "--exemplar2")]
        assert cli.main(base + ["--a", "0.3", "--out", str(tmp_path / "a.png"),
                                "--dump-attention", str(tmp_path / "att")]) == 0
        assert (tmp_path / "att" / "joint_alpha_s0_k0.png").exists()
        ramp = (np.linspace(255, 0, 16)[None].repeat(16, axis=0)).astype(np.uint8)
        write_label_grid(tmp_path / "w.png", ramp)
        assert cli.main(base + ["--weight-map", str(tmp_path / "w.png"), "--out", str(tmp_path / "w_out.png")]) == 0
        assert read_image(tmp_path / "w_out.png").shape == (3, 16, 16)
        # exactly one of --a / --weight-map, and a within [0, 1]
        assert cli.main(base + ["--out", str(tmp_path / "n.png")]) == 1
        assert cli.main(base + ["--a", "0.3", "--weight-map", str(tmp_path / "w.png"),
                                "--out", str(tmp_path / "n.png")]) == 1
        assert cli.main(base + ["--a", "1.5", "--out", str(tmp_path / "n.png")]) == 1

    def test_extrapolate(self, work, tmp_path):
        args = ["extrapolate", "--checkpoint", str(work / "g.bin"), "--center", str(work / "center.png"),
                "--center-label", str(work / "center_label.png"),
                "--global-label", str(work / "global_label.png"), "--seed", "5", "--sites", "3"]
        assert cli.main(args + ["--out", str(tmp_path / "e.png"), "--dump-attention", str(tmp_path / "att")]) == 0
        out = read_image(tmp_path / "e.png")
        assert out.shape == (3, 32, 32)
        np.testing.assert_array_equal(out[:, 8:24, 8:24], read_image(work / "center.png"))
        assert (tmp_path / "att" / "blend_weight.png").exists()
        assert (tmp_path / "att" / "site6_gates.txt").exists()
        assert cli.main(args + ["--out", str(tmp_path / "e2.png")]) == 0
        assert (tmp_path / "e.png").read_bytes() == (tmp_path / "e2.png").read_bytes()

    def test_swap_grid(self, work, tmp_path):
        assert cli.main(["swap", "--checkpoint", str(work / "g.bin"), "--scenes", str(work / "scenes"),
                         "--out", str(tmp_path / "grid.png")]) == 0
        assert read_image(tmp_path / "grid.png").shape == (3, 48, 48)


class TestEval:
    def test_results_file_appends_and_parses(self, work, tmp_path, capsys):
        res = tmp_path / "res.txt"
        args = ["eval", "--checkpoint", str(work / "g.bin"), "--data", str(work / "scenes"), "--out", str(res)]
        assert cli.main(args) == 0
        assert cli.main(args[:-2] + ["--task", "mirror", "--out", str(res)]) == 0
        blocks = parse_results(res.read_text())
        assert [b.task for b in blocks] == ["duplicate", "mirror", "mirror"]
        assert blocks[1] == blocks[2]
        assert len(blocks[0].ids) == 3
        assert "psnr_mean" in capsys.readouterr().out


class TestTraining:
    def test_train_resume_and_synth_from_training_checkpoint(self, work, tmp_path):
        sets = ["--set", "model=tiny", "--set", f"classes={CLASSES}", "--set", "patch=8",
                "--set", "epochs=2", "--set", "phase_switch=1", "--set", "batch=1",
                "--set", "dtype=float64"]
        out = tmp_path / "run"
        base = ["train", "--data", str(work / "scenes"), "--out", str(out), "--desk", *sets]
        assert cli.main(base + ["--set", "max_steps=2"]) == 0
        assert (out / "final.bin").exists() and (out / "metrics.log").exists()
        assert "model = tiny" in (out / "config.txt").read_text()
        assert cli.main(base + ["--set", "max_steps=3", "--resume", str(out / "final.bin")]) == 0
        steps = [line.split()[0] for line in (out / "metrics.log").read_text().splitlines()
                 if line.startswith("step=")]
        assert steps[-1] == "step=2"
        assert cli.main(["synth", "--checkpoint", str(out / "final.bin"),
                         "--label", str(work / "scenes" / "scene_0000_label.png"), *scene_args(work, 1),
                         "--out", str(tmp_path / "s.png")]) == 0

    def test_pretrain(self, work, tmp_path):
        rc = cli.main(["pretrain", "--data", str(work / "scenes"), "--out", str(tmp_path), "--steps", "2",
                       "--set", "model=tiny", "--set", f"classes={CLASSES}", "--set", "patch=8"])
        assert rc == 0
        assert len((tmp_path / "pretrain.log").read_text().splitlines()) == 2
        names = set(checkpoint.load(tmp_path / "pretrained.bin"))
        assert "wx.0.w" in names and not any(n.startswith("head.") for n in names)


class TestTools:
    def test_bench(self, tmp_path, capsys):
        assert cli.main(["bench", "--sides", "8", "16", "--k", "4", "--repetitions", "1",
                         "--out", str(tmp_path / "b.txt")]) == 0
        text = (tmp_path / "b.txt").read_text()
        assert "slope time" in text and text == capsys.readouterr().out

    def test_gradcheck_passes(self, capsys):
        assert cli.main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "generator 8x8" in out and out.rstrip().endswith("all passed")

    def test_gradcheck_fails_on_wrong_gradient(self, monkeypatch, capsys):
        broken = {"broken": (lambda x: suite.dc.mul(x, suite.Tensor(x.data)),
                             lambda c, h, w, r: [r.normal(size=(c, h, w))])}
        monkeypatch.setattr(cli, "run_suite", lambda tol, seed: suite.run_suite(
            sizes=((2, 3, 3),), tol=tol, seed=seed, primitives=broken))
        assert cli.main(["gradcheck", "--skip-generator"]) == 2
        assert "FAIL" in capsys.readouterr().out
