import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from defined import DefinedDetector, MMSEDetector, PerfectCSIDetector
from defined.channel import generate_batch
from defined.config import SimConfig

FRAMES = generate_batch(SimConfig(scheme="BPSK", T=6, snr_db_min=5, snr_db_max=5, seed=2), 0, 10)


def _tiny(**kw):
    params = dict(scheme="BPSK", T=6, snr_db_min=5, snr_db_max=5, d_e=16, n_layers=1, n_heads=2,
                  batch_size=8, pretrain_steps=3, finetune_steps=2, warmup_steps=1)
    params.update(kw)
    return DefinedDetector(**params)


@pytest.fixture(scope="module")
def fitted():
    return _tiny().fit()


def test_params_and_clone():
    est = _tiny(alpha=0.3)
    assert est.get_params()["alpha"] == 0.3
    c = clone(est.set_params(k_pilots=2))
    assert c.get_params() == est.get_params()
    assert MMSEDetector(k_pilots=3).get_params() == {"k_pilots": 3, "feedback": False}


def test_classical_detectors():
    assert MMSEDetector(2).fit(FRAMES).predict(FRAMES).shape == (10, 4, 1)
    assert MMSEDetector(2, feedback=True).predict(list(FRAMES.frame(i) for i in range(3))).shape == (3, 4, 1)
    pred = PerfectCSIDetector().fit().predict(FRAMES)
    assert pred.shape == (10, 6, 1)
    assert 0.5 < PerfectCSIDetector().score(FRAMES) <= 1.0


def test_unfitted_model_raises():
    with pytest.raises(NotFittedError):
        _tiny().predict(FRAMES)


def test_fit_predict_shapes(fitted):
    assert len(fitted.loss_trace_) == 5
    assert fitted.predict(FRAMES).shape == (10, 5, 1)
    icl = clone(fitted).set_params(mode="icl")
    icl.model_, icl.checkpoint_ = fitted.model_, fitted.checkpoint_
    assert icl.predict(FRAMES).shape == (10, 6, 1)
    proba = fitted.predict_proba(FRAMES)
    np.testing.assert_allclose(proba.sum(-1), 1.0, rtol=1e-6)
    assert 0.0 <= fitted.score(FRAMES) <= 1.0


def test_save_and_reload(fitted, tmp_path):
    path = fitted.save(tmp_path / "m.ckpt")
    again = DefinedDetector.from_checkpoint(path)
    np.testing.assert_array_equal(again.predict(FRAMES), fitted.predict(FRAMES))
    assert again.get_params()["d_e"] == 16


def test_input_validation(fitted):
    other = generate_batch(SimConfig(scheme="QPSK", T=6), 0, 2)
    with pytest.raises(ValueError):
        fitted.predict(other)
    with pytest.raises(ValueError):
        fitted.predict(generate_batch(SimConfig(scheme="BPSK", T=9), 0, 2))
    with pytest.raises(ValueError):
        MMSEDetector(k_pilots=6).predict(FRAMES)
    with pytest.raises(TypeError):
        MMSEDetector().predict(np.zeros((3, 6)))
    with pytest.raises(ValueError):
        MMSEDetector().predict([])
    with pytest.raises(ValueError):
        _tiny(mode="beam").fit()
