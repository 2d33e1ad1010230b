import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from csimtl.channels import generate_dataset, get_profile
from csimtl.errors import ConfigError
from csimtl.estimators import CsiAutoencoder, SharedEncoderFeedback
from csimtl.models import CompressionConfig
from csimtl.training import TrainConfig, evaluate, train_single_task

DIMS = dict(num_subcarriers=16, num_antennas=8, num_delay_taps=8)
COUNTS = {"train": 64, "val": 8, "test": 16}


@pytest.fixture(scope="module")
def data():
    return [generate_dataset(get_profile(n).with_dims(**DIMS), COUNTS, 0)
            for n in ("indoor-like", "cdlE-like")]


@pytest.fixture(scope="module")
def autoencoder(data):
    return CsiAutoencoder(batch_size=16, epochs=3, seed=5).fit(data[0].train)


def test_params_round_trip_through_clone():
    est = CsiAutoencoder(cr="1/8", epochs=7)
    assert est.get_params()["cr"] == "1/8"
    copy = clone(est.set_params(seed=9))
    assert copy.get_params() == est.get_params()
    assert not hasattr(copy, "model_")


def test_unfitted_use_raises():
    with pytest.raises(NotFittedError):
        CsiAutoencoder().predict(np.zeros((1, 2, 8, 8), np.float32))


def test_autoencoder_shapes(autoencoder, data):
    x = data[0].test
    codes = autoencoder.transform(x)
    assert codes.shape == (len(x), autoencoder.codeword_length_) == (16, 32)
    assert autoencoder.inverse_transform(codes).shape == x.shape
    assert autoencoder.predict(x).shape == x.shape
    assert len(autoencoder.loss_curve_) == 3


def test_autoencoder_matches_functional_training(autoencoder, data):
    ref = train_single_task(CompressionConfig(8, 8, "1/4"), data[0].train,
                            TrainConfig(1e-3, 16, 3, seed=5)).model
    assert np.array_equal(autoencoder.predict(data[0].test), ref.reconstruct(data[0].test))
    assert autoencoder.score(data[0].test) == -evaluate(ref, data[0].test)[1]


def test_flat_input_accepted_after_fit(autoencoder, data):
    x = data[0].test
    np.testing.assert_array_equal(autoencoder.predict(x.reshape(len(x), -1)), autoencoder.predict(x))


@pytest.mark.parametrize("bad", [
    np.zeros((4, 3, 8, 8)),
    np.zeros((4, 2, 8, 4)),
    np.zeros((4, 100)),
    np.full((4, 2, 8, 8), np.nan),
])
def test_invalid_input_rejected(autoencoder, bad):
    with pytest.raises(ValueError):
        autoencoder.predict(bad)


def test_wrong_codeword_length_rejected(autoencoder):
    with pytest.raises(ValueError, match="length"):
        autoencoder.inverse_transform(np.zeros((2, 5)))


def test_shared_encoder_routes_by_label(data):
    x = np.concatenate([d.train for d in data])
    y = np.repeat(["indoor", "cdlE"], [len(d.train) for d in data])
    est = SharedEncoderFeedback(batch_size=16, pretrain_epochs=3, finetune_epochs=1,
                                finetune_size=32, seed=1).fit(x, y)
    assert sorted(est.decoders_) == ["cdlE", "indoor"]
    test = np.concatenate([d.test for d in data])
    labels = np.repeat(["indoor", "cdlE"], [len(d.test) for d in data])
    out = est.predict(test, labels)
    assert out.shape == test.shape
    own = est._decoder_model("cdlE").reconstruct(data[1].test)
    assert np.array_equal(out[labels == "cdlE"], own)
    # the encoder is shared, so codewords do not depend on the label
    assert est.transform(test).shape == (len(test), 32)
    assert np.isfinite(est.score(test, labels))
    with pytest.raises(ValueError, match="unknown scenario"):
        est.predict(test[:1], ["outdoor"])


def test_shared_encoder_validates_labels_and_epochs(data):
    x = data[0].train
    with pytest.raises(ValueError):
        SharedEncoderFeedback(pretrain_epochs=2, finetune_epochs=1).fit(x, np.zeros(3))
    with pytest.raises(ConfigError):
        SharedEncoderFeedback(pretrain_epochs=2, finetune_epochs=2).fit(x, np.zeros(len(x)))
