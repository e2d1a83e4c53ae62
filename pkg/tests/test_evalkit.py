import hashlib

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from ropecast.dit import DiT, ModelConfig
from ropecast.evalkit import EvalReport, classify_pattern, evaluate, region_mse, ssim
from ropecast.synthdata import Dataset, Garment, SceneParams, generate_triple, render_garment
from ropecast.trainer import RunConfig, TrainConfig, make_optimizer, save_training_state


class TestRegionMSE:
    def test_identical(self):
        x = np.random.default_rng(0).random((8, 8, 3))
        assert region_mse(x, x, np.ones((8, 8), bool)) == 0.0

    def test_empty_mask(self):
        x = np.zeros((4, 4, 3))
        with pytest.raises(ValueError):
            region_mse(x, x, np.zeros((4, 4), bool))

    def test_checkerboard_vs_inverse(self):
        board = (np.indices((6, 6)).sum(axis=0) % 2).astype(float)
        assert region_mse(board, 1 - board, np.ones((6, 6), bool)) == 1.0

    def test_only_mask_counts(self):
        a = np.zeros((4, 4, 3))
        b = a.copy()
        b[0, 0] = 1.0
        mask = np.zeros((4, 4), bool)
        mask[0, 0] = True
        assert region_mse(a, b, mask) == 1.0
        assert region_mse(a, b, ~mask) == 0.0


class TestSSIM:
    def test_identity(self):
        x = np.random.default_rng(0).random((16, 16, 3))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            x, y = rng.random((2, 12, 12, 3))
            assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-14)

    def test_constant_images(self):
        x = np.full((10, 10, 3), 0.3)
        assert ssim(x, x.copy()) == pytest.approx(1.0)

    def test_bounds(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            x, y = rng.random((2, 12, 12, 3))
            assert -1.0 <= ssim(x, y) <= 1.0
        board = (np.indices((12, 12)).sum(axis=0) % 2).astype(float)
        assert ssim(board, 1 - board) < 0

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            x = rng.random((32, 32, 3))
            y = np.clip(x + 0.2 * rng.standard_normal(x.shape), 0, 1)
            ref = structural_similarity(x, y, win_size=7, data_range=1.0, channel_axis=-1,
                                        K1=0.01, K2=0.03, use_sample_covariance=True)
            assert ssim(x, y) == pytest.approx(ref, abs=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 9)))


@pytest.mark.parametrize("seed", range(10))
def test_classifier_recovers_ground_truth(seed):
    p = SceneParams.random(seed)
    t = generate_triple(p)
    assert classify_pattern(t.target_image, p.torso_rect, p.garment_b) == p.garment_b.pattern


def test_classifier_templates():
    g = Garment("checker", ((0.2, 0.2, 0.2), (0.8, 0.8, 0.8)))
    img = np.ones((32, 32, 3))
    img[4:16, 4:14] = render_garment(Garment("stripes", g.palette), (12, 10))
    assert classify_pattern(img, (4, 4, 16, 14), g) == "stripes"


@pytest.fixture(scope="module")
def tiny_checkpoint(tmp_path_factory):
    run = RunConfig(model=ModelConfig(d_model=16, n_heads=2, depth=1), train=TrainConfig(steps=0))
    model = DiT(run.model)
    path = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    save_training_state(path, model, make_optimizer(model, run.train), run, 0)
    return path


def test_evaluate_does_not_mutate_checkpoint(tiny_checkpoint):
    before = hashlib.sha256(tiny_checkpoint.read_bytes()).hexdigest()
    evaluate(tiny_checkpoint, Dataset.generate(2, seed=9), ["tryon"], steps=2)
    assert hashlib.sha256(tiny_checkpoint.read_bytes()).hexdigest() == before


def test_evaluate_deterministic_and_serializable(tiny_checkpoint):
    ds = Dataset.generate(3, seed=9)
    a = evaluate(tiny_checkpoint, ds, ["tryon", "garment_reconstruction"], steps=2, seed=1)
    b = evaluate(tiny_checkpoint, ds, ["tryon", "garment_reconstruction"], steps=2, seed=1)
    assert a.to_json() == b.to_json()
    back = EvalReport.from_json(a.to_json())
    assert back.tasks["tryon"].n == 3
    assert back.tasks["garment_reconstruction"].pattern_accuracy is not None
    for m in back.tasks.values():
        assert all(np.isfinite([m.background_mse, m.edit_mse, m.ssim_mean]))
