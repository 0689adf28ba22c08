import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from builders import tiny_config
from vimpac.estimators import VimpacClassifier, VimpacPretrainer, check_store
from vimpac.masking import MaskingConfig
from vimpac.model import VimpacModel
from vimpac.pipeline import CropConfig, FinetuneConfig, PairSamplerConfig, TrainConfig
from vimpac.synthetic import smooth_store
from vimpac.tokens import VideoTokenStore, Vocabulary

TRAIN = TrainConfig(group_size=4, accumulation_target=4, steps=2, sampler=PairSamplerConfig(clip_len=3),
                    masking=MaskingConfig(num_blocks=2))
FT = FinetuneConfig(batch_size=6, steps=60, peak_lr=1e-2, clip_len=3)


def constant_grids():
    return np.stack([np.full((3, 3, 3), k % 4) for k in range(6)])


class TestCheckStore:
    def test_array_input(self):
        store = check_store(np.zeros((2, 3, 3, 3), int), 16)
        assert len(store) == 2 and store.vocab.vq_size == 16

    def test_rejects_float_arrays(self):
        with pytest.raises(ValueError):
            check_store(np.zeros((2, 3, 3, 3)), 16)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            check_store(VideoTokenStore(Vocabulary(16), ()), 16)

    def test_vocab_mismatch(self):
        with pytest.raises(ValueError):
            check_store(smooth_store(2, (3, 3, 3), vq_size=16), 32)


class TestPretrainer:
    def test_params_and_clone(self):
        est = VimpacPretrainer(tiny_config(), TRAIN)
        assert est.get_params()["train_config"] is TRAIN
        assert clone(est).get_params()["model_config"] == tiny_config()

    def test_fit_transform(self):
        store = smooth_store(4, (4, 3, 3), vq_size=16)
        est = VimpacPretrainer(tiny_config(), TRAIN).fit(store)
        assert len(est.history_) == 2
        feats = est.transform(store)
        assert feats.shape == (4, est.n_features_out_)
        assert_array_equal(feats, est.transform(store))

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            VimpacPretrainer(tiny_config(), TRAIN).transform(np.zeros((1, 3, 3, 3), int))


class TestClassifier:
    def test_fit_predict_string_labels(self):
        X = constant_grids()
        y = np.array(["odd" if k % 2 else "even" for k in range(6)])
        clf = VimpacClassifier(tiny_config(), FT, CropConfig(temporal_crops=1)).fit(X, y)
        assert list(clf.classes_) == ["even", "odd"]
        assert_array_equal(clf.predict(X), y)
        assert clf.score(X, y) == 1.0
        proba = clf.predict_proba(X)
        assert_allclose(proba.sum(axis=1), 1.0)

    def test_init_model_is_copied_not_modified(self):
        store = smooth_store(4, (4, 3, 3), vq_size=16)
        pre = VimpacPretrainer(tiny_config(), TRAIN).fit(store)
        before = pre.model_.params["embed.token"].data.copy()
        clf = VimpacClassifier(finetune_config=FinetuneConfig(steps=3, clip_len=3), init_model=pre.model_)
        clf.fit(constant_grids(), np.arange(6) % 2)
        assert_array_equal(pre.model_.params["embed.token"].data, before)
        assert "classifier.weight" not in pre.model_.params

    def test_linear_probe_flag(self):
        clf = VimpacClassifier(tiny_config(), FinetuneConfig(steps=3, clip_len=3), linear_probe=True)
        clf.fit(constant_grids(), np.arange(6) % 2)
        fresh = VimpacModel(tiny_config())
        for k, v in fresh.params.items():
            assert_array_equal(clf.model_.params[k].data, v.data, err_msg=k)
        assert np.abs(clf.model_.params["classifier.weight"].data).sum() > 0

    def test_label_length_mismatch(self):
        with pytest.raises(ValueError):
            VimpacClassifier(tiny_config(), FT).fit(constant_grids(), [0, 1])

    def test_clone_keeps_params(self):
        clf = VimpacClassifier(tiny_config(), FT, linear_probe=True)
        assert clone(clf).get_params()["linear_probe"] is True
