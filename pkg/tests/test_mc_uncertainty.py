import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uatriage.mc_uncertainty import (PredictiveSample, histogram, histogram_csv, mc_predict,
                                     nearest_rank_index, pass_seed, sample_csv, summarize)
from uatriage.network import Conv, Dense, Flatten, ModelConfig, ReLU, Softmax, Stochastic, build_reference_model, forward, init_weights

CLASSES = ("a", "b", "c")


@pytest.fixture(scope="module")
def model():
    cfg = build_reference_model((1, 16, 16), CLASSES)
    return cfg, init_weights(cfg, 4)


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(0).random((1, 16, 16)).astype(np.float32)


class TestMcPredict:
    def test_rows_match_stochastic_forward(self, model, image):
        cfg, w = model
        sample = mc_predict(cfg, w, image, passes=40, base_seed=1000)
        for t in (0, 17, 39):
            assert np.array_equal(sample.probs[t], forward(cfg, w, image, Stochastic(1000 ^ t)).probs)

    def test_zero_dropout_rows_equal_deterministic(self, model, image):
        cfg, w = model
        cfg0 = cfg.with_dropout(0.0)
        sample = mc_predict(cfg0, w, image, passes=10)
        det = forward(cfg0, w, image).probs
        assert all(np.array_equal(row, det) for row in sample.probs)

    def test_repeatable(self, model, image):
        cfg, w = model
        a = mc_predict(cfg, w, image, passes=50, base_seed=3).probs
        b = mc_predict(cfg, w, image, passes=50, base_seed=3).probs
        assert np.array_equal(a, b)

    def test_prefix_of_longer_run(self, model, image):
        cfg, w = model
        short = mc_predict(cfg, w, image, passes=7, base_seed=5).probs
        long = mc_predict(cfg, w, image, passes=70, base_seed=5).probs
        assert np.array_equal(short, long[:7])

    def test_rows_are_probability_vectors_and_vary(self, model, image):
        cfg, w = model
        probs = mc_predict(cfg, w, image, passes=60).probs
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert abs(probs.mean(axis=0).sum() - 1) <= 1e-6
        assert len({row.tobytes() for row in probs}) > 1

    def test_zero_passes_rejected(self, model, image):
        with pytest.raises(ValueError):
            mc_predict(*model, image, passes=0)

    def test_no_dropout_warns(self, image):
        cfg = ModelConfig((1, 16, 16), (Conv(2), ReLU(), Flatten(), Dense(3), Softmax()), CLASSES)
        with pytest.warns(UserWarning, match="no Dropout"):
            sample = mc_predict(cfg, init_weights(cfg, 0), image, passes=3)
        assert np.array_equal(sample.probs[0], sample.probs[2])

    def test_pass_seed_is_xor(self):
        assert pass_seed(0b1100, 0b1010) == 0b0110


class TestSummarize:
    def test_single_row(self):
        s = summarize(PredictiveSample(np.array([[0.1, 0.7, 0.2]])))
        np.testing.assert_array_equal(s.medians, [0.1, 0.7, 0.2])
        assert s.predicted_class == 1 and s.confidence == 0.7

    def test_odd_median(self):
        s = summarize(PredictiveSample(np.array([[0.6, 0.4], [0.2, 0.8], [0.4, 0.6]])))
        assert s.medians[0] == 0.4

    def test_lower_median_even(self):
        s = summarize(PredictiveSample(np.array([[0.1, 0.9], [0.3, 0.7], [0.2, 0.8], [0.4, 0.6]])))
        assert s.medians[0] == 0.2 and s.medians[1] == 0.7

    def test_sort_oracle(self):
        probs = np.random.default_rng(1).dirichlet(np.ones(3), size=9)
        s = summarize(PredictiveSample(probs))
        for c in range(3):
            assert s.medians[c] == sorted(probs[:, c])[4]
            assert s.p10[c] == sorted(probs[:, c])[0]
            assert s.p90[c] == sorted(probs[:, c])[8]
        assert s.predicted_class == int(np.argmax(s.medians))

    def test_argmax_tie_lowest(self):
        s = summarize(PredictiveSample(np.array([[0.5, 0.5]])))
        assert s.predicted_class == 0

    @settings(max_examples=50)
    @given(st.integers(1, 30), st.integers(0, 10_000))
    def test_row_permutation_invariance(self, t, seed):
        rng = np.random.default_rng(seed)
        probs = rng.dirichlet(np.ones(4), size=t)
        a = summarize(PredictiveSample(probs))
        b = summarize(PredictiveSample(probs[rng.permutation(t)]))
        assert np.array_equal(a.medians, b.medians) and a.confidence == b.confidence


class TestHistogram:
    def test_all_ones_land_in_last_bin(self):
        h = histogram(PredictiveSample(np.ones((8, 2))), 50)
        assert h.counts[:, -1].tolist() == [8, 8] and h.counts[:, :-1].sum() == 0

    def test_single_bin(self):
        probs = np.random.default_rng(2).dirichlet(np.ones(3), size=11)
        assert histogram(PredictiveSample(probs), 1).counts.tolist() == [[11], [11], [11]]

    def test_naive_binning(self):
        probs = np.random.default_rng(3).dirichlet(np.ones(3), size=40)
        bins = 7
        h = histogram(PredictiveSample(probs), bins)
        naive = np.zeros((3, bins), dtype=int)
        for row in probs:
            for c, v in enumerate(row):
                naive[c, min(int(v * bins), bins - 1)] += 1
        np.testing.assert_array_equal(h.counts, naive)
        assert (h.counts.sum(axis=1) == 40).all()

    def test_bad_bins(self):
        with pytest.raises(ValueError):
            histogram(PredictiveSample(np.ones((1, 1))), 0)


def test_nearest_rank_index():
    assert nearest_rank_index(10, 10) == 0
    assert nearest_rank_index(30, 10) == 2   # 0.1 * 30 is not exactly 3 in binary floating point
    assert nearest_rank_index(11, 10) == 1
    assert nearest_rank_index(5, 0) == 0


def test_csv_exports():
    sample = PredictiveSample(np.array([[0.25, 0.75], [0.5, 0.5]]))
    assert sample_csv(sample, ("x", "y")).splitlines() == [
        "pass_index,class_name,probability", "0,x,0.25", "0,y,0.75", "1,x,0.5", "1,y,0.5"]
    lines = histogram_csv(histogram(sample, 2), ("x", "y")).splitlines()
    assert lines[0] == "class_name,bin_lo,bin_hi,count"
    assert lines[1:] == ["x,0,0.5,1", "x,0.5,1,1", "y,0,0.5,0", "y,0.5,1,2"]
