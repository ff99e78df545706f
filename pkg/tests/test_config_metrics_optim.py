import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdct.config import Config
from fdct.errors import ConfigError
from fdct.metrics import MetricsReport, confusion_matrix, pr_curve, precision_recall, read_metrics
from fdct.nn import Parameter
from fdct.optim import AdamW, clip_grad_norm, cosine_lr


class TestConfig:
    def test_defaults(self):
        cfg = Config()
        ts = cfg.train_settings()
        assert (ts.lr, ts.weight_decay, ts.batch_size, ts.epochs, ts.clip) == (2e-4, 0.05, 24, 40, 5.0)
        assert len(ts.seeds) >= 3
        m = cfg.model_config()
        assert (m.dim, m.depth, m.heads, m.patch, m.prototypes) == (64, 4, 4, 4, 10)
        assert (m.gamma1, m.gamma2, m.gamma3) == (0.1, 0.07, 0.2)

    def test_parse_and_round_trip(self):
        text = """
        # comment
        preset = desk
        udt.dim = 32    # trailing comment
        scma.weighting = attention
        loss.cpa = 0
        """
        cfg = Config.parse(text)
        assert cfg["udt.dim"] == 32 and cfg["loss.cpa"] == 0.0
        assert cfg.model_config().weighting == "attention"
        again = Config.parse(cfg.dumps())
        assert again.values == cfg.values and again.preset == cfg.preset

    def test_paper_scale_preset(self):
        cfg = Config(preset="paper-scale")
        assert cfg["data.image_size"] == 224
        assert cfg.model_config().udt_config().num_tokens == 196

    @pytest.mark.parametrize("text", ["udt.bogus = 1", "train.lr = 0", "train.epochs = 0", "udt.dim = abc",
                                      "just words", "preset = huge", "udt.heads = 5", "loss.ita = -1"])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            Config.parse(text)

    def test_unknown_weighting(self):
        with pytest.raises(ConfigError):
            Config.parse("scma.weighting = learned")

    def test_replace(self):
        cfg = Config().replace(loss__ita=0)
        assert cfg.loss_weights().ita == 0.0 and Config().loss_weights().ita == 1.0

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            Config.load(tmp_path / "nope.cfg")


class TestMetrics:
    def test_confusion_and_accuracy(self):
        labels = np.array([0, 0, 1, 1, 2, 2, 2])
        logits = np.eye(3)[[0, 1, 1, 1, 2, 0, 2]]
        rep = MetricsReport.from_logits(logits, labels, 3)
        np.testing.assert_array_equal(rep.confusion.sum(axis=1), [2, 2, 3])
        assert rep.accuracy == pytest.approx(np.trace(rep.confusion) / 7)
        np.testing.assert_allclose(rep.precision, [1 / 2, 2 / 3, 1.0])
        np.testing.assert_allclose(rep.recall, [1 / 2, 1.0, 2 / 3])

    def test_never_predicted_class(self):
        p, r = precision_recall(confusion_matrix([0, 1], [0, 0], 2))
        assert p[1] == 0.0 and r[1] == 0.0

    def test_pr_curve_endpoints(self, rng):
        labels = rng.integers(0, 3, 50)
        scores = rng.uniform(size=(50, 3))
        pts = pr_curve(labels, scores, 1)
        assert pts[-1][2] == pytest.approx(1.0)        # lowest threshold recalls everything
        assert all(0 <= p <= 1 and 0 <= r <= 1 for _, p, r in pts)
        assert [r for _, _, r in pts] == sorted(r for _, _, r in pts)

    def test_write_tables(self, tmp_path, rng):
        labels = rng.integers(0, 3, 20)
        rep = MetricsReport.from_logits(rng.normal(size=(20, 3)), labels, 3, accuracy_visible_only=0.25)
        rep.write(tmp_path)
        m = read_metrics(tmp_path)
        assert m["accuracy"] == rep.accuracy and m["accuracy_visible_only"] == 0.25
        rows = (tmp_path / "confusion.csv").read_text().splitlines()
        assert len(rows) == 4
        assert (tmp_path / "pr.csv").read_text().startswith("class,threshold,precision,recall")


class TestCosine:
    def test_endpoints(self):
        assert cosine_lr(0, 1000, 2e-4) == 2e-4
        assert cosine_lr(999, 1000, 2e-4) <= 1e-2 * 2e-4
        assert cosine_lr(500, 1000, 2e-4) == pytest.approx(1e-4)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5000))
    def test_monotone(self, total):
        lrs = [cosine_lr(s, total, 1.0) for s in range(0, total + 1, max(1, total // 50))]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestAdamW:
    def test_first_step_is_sign_times_lr(self):
        p = Parameter(np.array([1.0, -2.0]))
        p.grad = np.array([0.3, -5.0], dtype=p.dtype)
        AdamW([p], lr=0.1, weight_decay=0.0).step()
        np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-5)

    def test_decoupled_decay_on_matrices_only(self):
        w, b = Parameter(np.ones((2, 2))), Parameter(np.ones(2))
        w.grad, b.grad = np.zeros((2, 2), np.float32), np.zeros(2, np.float32)
        AdamW([w, b], lr=0.1, weight_decay=0.5).step()
        np.testing.assert_allclose(w.data, 0.95, rtol=1e-6)
        np.testing.assert_array_equal(b.data, 1.0)

    def test_matches_reference_over_steps(self, rng):
        p = Parameter(rng.normal(size=(3, 2)))
        x = p.data.astype(np.float64).copy()
        m = v = np.zeros_like(x)
        opt = AdamW([p], lr=0.01, weight_decay=0.05)
        for t in range(1, 6):
            g = rng.normal(size=x.shape)
            p.grad = g.astype(np.float32)
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x * (1 - 0.01 * 0.05)
            x = x - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=1e-5)

    def test_rejects_nonpositive_lr(self):
        with pytest.raises(ValueError):
            AdamW([], lr=0)


class TestClip:
    def test_clips_global_norm(self):
        a, b = Parameter(np.zeros(2)), Parameter(np.zeros(1))
        a.grad, b.grad = np.array([3.0, 0.0], np.float32), np.array([4.0], np.float32)
        assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
        norm = math.sqrt(float((a.grad ** 2).sum() + (b.grad ** 2).sum()))
        assert norm == pytest.approx(1.0, rel=1e-5)

    def test_leaves_small_gradients(self):
        a = Parameter(np.zeros(2))
        a.grad = np.array([0.3, 0.4], np.float32)
        clip_grad_norm([a], 5.0)
        np.testing.assert_array_equal(a.grad, np.array([0.3, 0.4], np.float32))
