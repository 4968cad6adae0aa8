import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from taf.datagen import SynthConfig, generate
from taf.estimator import PermutationAwareSegmenter, check_sequences
from taf.types import FeatureSequence, ValidationError


def small_data():
    ds = generate(SynthConfig(num_videos=3, num_actions=3, input_dim=5, min_frames=15,
                              max_frames=25, seed=2))
    return [v.features.frames for v in ds], [v.labels.framewise for v in ds]


def fast(**kw):
    base = dict(n_actions=3, dim=8, stage1_epochs=2, stage2_epochs=1)
    base.update(kw)
    return PermutationAwareSegmenter(**base)


class TestCheckSequences:
    def test_single_array_is_wrapped(self, rng):
        out = check_sequences(rng.normal(size=(4, 3)))
        assert len(out) == 1 and out[0].dtype == np.float64

    def test_feature_sequences_accepted(self, rng):
        out = check_sequences([FeatureSequence(rng.normal(size=(4, 3)), "a")])
        assert out[0].shape == (4, 3)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError, match="expected 3"):
            check_sequences([rng.normal(size=(4, 3)), rng.normal(size=(4, 2))])

    def test_too_few_frames(self, rng):
        with pytest.raises(ValueError):
            check_sequences([rng.normal(size=(2, 3))], min_frames=3)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            check_sequences([np.array([[1.0, np.inf]])])

    def test_empty(self):
        with pytest.raises(ValueError):
            check_sequences([])


class TestEstimator:
    def test_params_round_trip(self):
        est = fast(rho=0.05, sigma=0.2)
        params = est.get_params()
        assert params["rho"] == 0.05 and params["sigma"] == 0.2
        twin = clone(est)
        assert twin.get_params() == params
        est.set_params(beta=0.0)
        assert est.beta == 0.0

    def test_not_fitted(self, rng):
        with pytest.raises(NotFittedError):
            fast().predict([rng.normal(size=(10, 5))])

    def test_fit_predict(self):
        X, y = small_data()
        est = fast().fit(X)
        preds = est.predict(X)
        assert [len(p) for p in preds] == [len(x) for x in X]
        assert all(set(np.unique(p)) == {0, 1, 2} for p in preds)
        assert 0.0 <= est.score(X, y) <= 1.0
        assert est.n_features_in_ == 5
        assert len(est.loss_log_) == 3 * 3

    def test_proba_and_transform(self):
        X, _ = small_data()
        est = fast().fit(X)
        for p, x in zip(est.predict_proba(X), X):
            assert p.shape == (len(x), 3)
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        for e in est.transform(X):
            np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-12)

    def test_frame_only_falls_back_to_frame_decoding(self):
        X, _ = small_data()
        est = fast(stage2_epochs=0).fit(X)
        assert est._decode_config().source == "frame"
        assert len(est.predict(X)) == 3

    def test_deterministic(self):
        X, _ = small_data()
        a = fast(random_state=4).fit(X).predict(X)
        b = fast(random_state=4).fit(X).predict(X)
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa, pb)

    def test_input_dim_checked_at_predict(self, rng):
        X, _ = small_data()
        est = fast().fit(X)
        with pytest.raises(ValueError):
            est.predict([rng.normal(size=(10, 4))])

    def test_score_length_mismatch(self):
        X, y = small_data()
        est = fast().fit(X)
        with pytest.raises(ValidationError):
            est.score(X, y[:2])
