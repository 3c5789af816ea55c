import math

import numpy as np
import pytest

from msca import diffcore as dc
from msca.diffcore import ShapeError
from msca.metrics import EvalResult, gram, gram_distance, gram_style_loss, parse_results, psnr, run_task
from msca.selfsup import gen_dataset
from msca.synthesis import GeneratorParams, ModelConfig


class TestPsnr:
    def test_identical_is_inf(self, rng):
        a = rng.uniform(-1, 1, (3, 8, 8))
        assert psnr(a, a.copy()) == math.inf

    def test_extreme_pair_is_zero_db(self):
        # -1 and 1 map to 0 and 1 on the unit scale: MSE 1
        assert psnr(-np.ones((3, 4, 4)), np.ones((3, 4, 4))) == pytest.approx(0.0, abs=1e-12)

    def test_checkerboard_vs_direct_arithmetic(self):
        y, x = np.mgrid[0:6, 0:6]
        board = np.where((x + y) % 2 == 0, 0.5, -0.5)[None].repeat(3, axis=0)
        # unit-scale values 0.75 / 0.25 against a flat 0.5: every error is 0.25
        expected = 10 * math.log10(1 / 0.25 ** 2)
        assert psnr(board, np.zeros_like(board)) == pytest.approx(expected, rel=1e-12)

    def test_extent_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


@pytest.fixture(scope="module")
def backbone():
    return GeneratorParams.init(ModelConfig.tiny(levels=2), seed=3, dtype=np.float64).backbone


class TestGram:
    def test_equal_images_zero(self, rng, backbone):
        a = rng.uniform(-1, 1, (3, 8, 8))
        assert gram_style_loss(a, a, backbone) == 0.0

    def test_spatial_shuffle_invariance(self, rng):
        f = rng.normal(size=(5, 6, 7))
        perm = rng.permutation(42)
        g = f.reshape(5, 42)[:, perm].reshape(5, 6, 7)
        np.testing.assert_allclose(gram(f), gram(g), atol=1e-14)
        assert gram_distance([f], [g]) < 1e-28

    def test_seeded_pair_vs_recomputation(self, rng, backbone):
        a, b = rng.uniform(-1, 1, (2, 3, 8, 8))
        with dc.precision(np.float64):
            fa = [t.data for t in backbone(dc.Tensor(a))]
            fb = [t.data for t in backbone(dc.Tensor(b))]
        expected = 0.0
        for x, y in zip(fa, fb):
            c, h, w = x.shape
            ga = np.einsum("ihw,jhw->ij", x, x) / (c * h * w)
            gb = np.einsum("ihw,jhw->ij", y, y) / (c * h * w)
            expected += ((ga - gb) ** 2).sum() / (c * c)
        got = gram_style_loss(a, b, backbone)
        assert got > 0
        assert got == pytest.approx(expected, rel=1e-10)

    def test_extent_mismatch(self, backbone):
        with pytest.raises(ShapeError):
            gram_style_loss(np.zeros((3, 8, 8)), np.zeros((3, 4, 8)), backbone)


class TestEvalResult:
    def sample(self):
        r = EvalResult("duplicate")
        r.add("scene_0000", 12.5, 1e-3)
        r.add("scene_0001", math.inf, 0.0)
        r.add("scene_0002", 0.1 + 0.2, 2.5e-7)
        return r

    def test_summary(self):
        r = EvalResult("mirror")
        for i, (p, s) in enumerate([(10.0, 1.0), (14.0, 3.0), (11.0, 2.0)]):
            r.add(str(i), p, s)
        assert r.summary() == {"psnr_mean": pytest.approx(35 / 3), "psnr_median": 11.0,
                               "style_mean": 2.0, "style_median": 2.0}

    def test_appended_blocks_round_trip(self, tmp_path):
        path = tmp_path / "results.txt"
        first, second = self.sample(), EvalResult("mirror", ["a"], [3.25], [4.0])
        for r in (first, second):
            with open(path, "a") as fh:
                fh.write(r.to_text())
        back = parse_results(path.read_text())
        assert [b.task for b in back] == ["duplicate", "mirror"]
        assert back[0] == first and back[1] == second
        assert back[0].psnr[2] == 0.1 + 0.2

    def test_line_schema(self):
        lines = self.sample().to_text().splitlines()
        assert lines[0] == "# task duplicate"
        assert lines[1].split() == ["scene_0000", "12.5", "0.001"]
        assert lines[2].split()[1] == "inf"
        assert lines[-1].startswith("# summary n=3 ")

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            EvalResult("x").add("a", 1.0, -1e-9)
        with pytest.raises(ValueError):
            parse_results("a 1.0 2.0\n")
        with pytest.raises(ValueError):
            parse_results("# task t\na 1.0\n")


def test_run_task_smoke_on_untrained_model():
    params = GeneratorParams.init(ModelConfig.tiny(classes=4, levels=3), seed=0, dtype=np.float64)
    scenes = gen_dataset(2, 4, 16, seed=5)
    for task in ("duplicate", "mirror"):
        r = run_task(task, scenes, params)
        assert r.ids == ["scene_0000", "scene_0001"]
        assert all(math.isfinite(p) for p in r.psnr)
        assert all(s >= 0 for s in r.style)
    with pytest.raises(ValueError):
        run_task("retrieval", scenes, params)


def test_trained_model_duplicate_not_worse_than_mirror(desk_run):
    """Mirroring only reorients the exemplar, so it cannot help much over duplicating."""
    params = desk_run["result"].state.g
    patch = desk_run["cfg"].patch
    scenes = [s.resized(patch, patch) for s in desk_run["scenes"][:8]]
    dup, mir = run_task("duplicate", scenes, params), run_task("mirror", scenes, params)
    assert dup.summary()["psnr_mean"] >= mir.summary()["psnr_mean"] - 1.0
