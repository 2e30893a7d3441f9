"""End-to-end pipeline wiring on tiny models (untrained; contracts only)."""

import numpy as np
import pytest

from floc import metrics, pipeline
from floc.data import build_config, dataset_load, synth_forgery_generate
from floc.model import DualBranchModel


@pytest.fixture(scope="module")
def tiny_cfg():
    return build_config(
        {"input_size": 48, "blocks": 2, "channels": 8, "dim": 16, "heads": 2, "scales": [48], "batch": 4}
    )


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe_corpus")
    synth_forgery_generate(8, 48, seed=11, out_dir=root, uniform_paste=True)
    return dataset_load(root, eval_mode=True)


@pytest.fixture(scope="module")
def tiny_model(tiny_cfg):
    return DualBranchModel(tiny_cfg.model_config(), seed=0)


class TestAnalyze:
    def test_result_shapes(self, tiny_model, tiny_corpus):
        s = tiny_corpus[0]
        res = pipeline.analyze_image(tiny_model, s.image, scales=(48,), rho=0.4)
        assert (res.mask.height, res.mask.width) == (s.image.height, s.image.width)
        assert res.cam.raw.shape == (48, 48)
        assert 0.0 <= res.score <= 1.0

    def test_null_mode_returns_coarse(self, tiny_model, tiny_corpus):
        s = tiny_corpus[0]
        res = pipeline.analyze_image(
            tiny_model, s.image, scales=(48,), rho=0.4, prompt_mode="null", refiner="region"
        )
        np.testing.assert_array_equal(res.mask.data, res.coarse.data)
        assert res.prompts is None

    def test_refiner_none_keeps_coarse(self, tiny_model, tiny_corpus):
        s = tiny_corpus[0]
        res = pipeline.analyze_image(
            tiny_model, s.image, scales=(48,), rho=0.4, prompt_mode="box+point", refiner="none"
        )
        np.testing.assert_array_equal(res.mask.data, res.coarse.data)

    def test_empty_coarse_short_circuits(self, tiny_model, tiny_corpus):
        s = tiny_corpus[0]
        res = pipeline.analyze_image(
            tiny_model, s.image, scales=(48,), rho=0.999, prompt_mode="box+point", refiner="region"
        )
        if res.coarse.count == 0:
            assert res.prompts is None
            assert res.mask.count == 0


class TestEvaluate:
    def test_keys_present(self, tiny_model, tiny_corpus):
        out = pipeline.evaluate_dataset(tiny_model, tiny_corpus, scales=(48,), rho=0.4)
        assert set(out) >= {"n_images", "i_auc", "p_f1"}
        assert 0.0 <= out["i_auc"] <= 1.0
        assert 0.0 <= out["p_f1"] <= 1.0

    def test_mean_f1_requires_masks(self, tiny_model, tiny_corpus):
        authentic_only = [s for s in tiny_corpus if s.label == 0]
        with pytest.raises(ValueError, match="manipulated"):
            pipeline.mean_localization_f1(tiny_model, authentic_only, scales=(48,), rho=0.4)


class TestRobustness:
    def test_level_order_preserved(self, tiny_model, tiny_corpus):
        curve = metrics.robustness_sweep(
            tiny_model, tiny_corpus, "jpeg", [100, 50, 80], scales=(48,), rho=0.4
        )
        assert [lv for lv, _ in curve] == [100, 50, 80]

    def test_single_level_matches_plain_eval(self, tiny_model, tiny_corpus):
        curve = metrics.robustness_sweep(
            tiny_model, tiny_corpus, "blur", [0], scales=(48,), rho=0.4
        )
        plain = pipeline.mean_localization_f1(tiny_model, tiny_corpus, scales=(48,), rho=0.4)
        assert len(curve) == 1
        assert curve[0][1] == pytest.approx(plain, abs=1e-12)

    def test_empty_levels_rejected(self, tiny_model, tiny_corpus):
        with pytest.raises(ValueError, match="nonempty"):
            metrics.robustness_sweep(tiny_model, tiny_corpus, "jpeg", [], scales=(48,))


class TestAblations:
    def test_prompt_modes_table(self, tiny_model, tiny_corpus, tiny_cfg):
        rows = pipeline.ablate_prompts(tiny_corpus, tiny_model, tiny_cfg)
        assert [r["mode"] for r in rows] == ["null", "point", "box", "box+point"]
        for r in rows:
            assert 0.0 <= r["p_f1"] <= 1.0

    def test_prompt_ablation_requires_refiner(self, tiny_model, tiny_corpus):
        from floc.cgsr import ablate_prompt_modes

        with pytest.raises(ValueError, match="refiner"):
            ablate_prompt_modes(tiny_corpus, tiny_model, "none")

    def test_null_row_equals_unrefined_pipeline(self, tiny_model, tiny_corpus, tiny_cfg):
        rows = pipeline.ablate_prompts(tiny_corpus, tiny_model, tiny_cfg)
        plain = pipeline.mean_localization_f1(
            tiny_model, tiny_corpus, prompt_mode="null", refiner="none",
            scales=tiny_cfg.scales, rho=tiny_cfg.rho, remote_url=None,
        )
        assert rows[0]["p_f1"] == pytest.approx(plain, abs=1e-12)


class TestFit:
    def test_history_and_determinism(self, tiny_cfg):
        from dataclasses import replace

        root_cfg = replace(tiny_cfg, epochs=2, lr=1e-3)
        rng = np.random.default_rng(0)
        from floc.data import ManipSample, procedural_image

        samples = [
            ManipSample(f"s{i}", procedural_image(rng, 48), i % 2) for i in range(8)
        ]
        m1, h1 = pipeline.fit(samples, root_cfg)
        m2, h2 = pipeline.fit(samples, root_cfg)
        assert len(h1) == 2
        assert [e.loss for e in h1] == [e.loss for e in h2]
        for k, p in m1.parameters().items():
            np.testing.assert_array_equal(p.data, m2.parameters()[k].data)
