import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from shrinknet.estimators import DistilledEmbeddingNetwork, EmbeddingNetwork, PrunedEmbeddingNetwork
from shrinknet.synthdata import DatasetSpec, generate


@pytest.fixture(scope="module")
def data():
    ds = generate(DatasetSpec(n_subjects=4, stacks_per_session=2, pixel_noise_scale=0.02, session_shift_scale=0.05))
    names = np.array(["ann", "bob", "cyd", "dee"])
    return ds.images, names[ds.subject]


@pytest.fixture(scope="module")
def teacher(data):
    return EmbeddingNetwork(arch="student_plain", epochs=30, batch_size=16, lr=0.01, patience=30, random_state=0).fit(*data)


def test_get_params_and_clone():
    est = EmbeddingNetwork(lr=0.1, epochs=3)
    assert est.get_params()["lr"] == 0.1
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est


def test_unfitted_raises(data):
    with pytest.raises(NotFittedError):
        EmbeddingNetwork().transform(data[0])


def test_fit_predict_transform(teacher, data):
    X, y = data
    assert list(teacher.classes_) == ["ann", "bob", "cyd", "dee"]
    emb = teacher.transform(X[:7])
    assert emb.shape == (7, 64)
    proba = teacher.predict_proba(X[:7])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(teacher.predict(X)) <= set(y)
    assert teacher.score(X, y) > 0.5
    assert teacher.train_report_.epochs >= 1


def test_input_validation(teacher, data):
    with pytest.raises(ValueError):
        teacher.transform(np.zeros((2, 16, 16, 1)))
    with pytest.raises(ValueError):
        EmbeddingNetwork().fit(data[0][:, :, :, 0], data[1])
    with pytest.raises(ValueError, match="two identities"):
        EmbeddingNetwork().fit(data[0][:4], ["a"] * 4)


def test_distilled(teacher, data):
    X, y = data
    student = DistilledEmbeddingNetwork(teacher=teacher, arch="student_depthwise", epochs=2).fit(X, y)
    assert student.transform(X[:3]).shape == (3, 64)
    with pytest.raises(ValueError, match="same identities"):
        DistilledEmbeddingNetwork(teacher=teacher, epochs=1).fit(X[y != "ann"], y[y != "ann"])


def test_pruned(teacher, data):
    X, y = data
    before = {n: p.data.copy() for n, p in teacher.model_.params.items()}
    pruned = PrunedEmbeddingNetwork(teacher, target_cr=4, iterations=2, fine_tune_epochs=1).fit(X, y)
    assert abs(pruned.cr_params_ - 4) < 0.05
    assert pruned.predict(X[:2]).shape == (2,)
    for n, p in teacher.model_.params.items():
        np.testing.assert_array_equal(p.data, before[n])
