"""Tests for the CAE / CDAE / CSAE detectors, weight transfer and classification"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autodiff import Tensor
from dataset import Dataset, DatasetProfile, two_gaussian_benchmark
from detectors import (AutoencoderNet, ConvEncoder, VariantConfig, classifier_inputs, classify,
                       decide, evaluate, load_detector, mean_activation, predict_scores,
                       reconstruction_error, save_detector, sparsity_penalty, train_autoencoder,
                       train_classifier, transfer_weights)
from settings import DomainError, ShapeError

Q = 16
KL_EXAMPLE = 0.05 * np.log(0.05 / 0.5) + 0.95 * np.log(0.95 / 0.5)


def _quick(kind='cae', **overrides) -> VariantConfig:
    values = dict(ae_epochs=2, clf_epochs=2, batch_size=32, seed=4)
    values.update(overrides)
    return VariantConfig.for_variant(kind, **values)


def _benchmark(n=40, seed=0) -> Dataset:
    return two_gaussian_benchmark(n, Q, seed=seed)


def _rngs(seed=0):
    return np.random.default_rng(seed), np.random.default_rng(seed + 1)


# ============================================================================
# CONFIG
# ============================================================================

def test_variant_defaults():
    cae = VariantConfig.for_variant('cae')
    cdae = VariantConfig.for_variant('CDAE')
    csae = VariantConfig.for_variant('csae')
    assert (cae.ae_epochs, cae.ae_optimizer, cae.noise_factor, cae.beta) == (30, 'adam', 0.0, 0.0)
    assert (cdae.ae_epochs, cdae.ae_optimizer, cdae.noise_factor) == (15, 'adagrad', 0.3)
    assert (csae.ae_epochs, csae.ae_optimizer, csae.beta, csae.rho) == (15, 'sgd', 0.01, 0.05)
    assert cae.classifier_input == 'raw'
    assert cdae.classifier_input == csae.classifier_input == 'recon_error'
    assert VariantConfig.for_variant('cdae', noise_factor=0.1).noise_factor == 0.1
    with pytest.raises(DomainError):
        VariantConfig.for_variant('vae')


# ============================================================================
# SPARSITY
# ============================================================================

def test_sparsity_penalty_example():
    value = sparsity_penalty(0.05, np.array([0.5]), 1.0).item()
    assert value == pytest.approx(KL_EXAMPLE, abs=1e-12)
    assert value == pytest.approx(0.4946, abs=1e-4)
    assert sparsity_penalty(0.05, np.array([0.5, 0.5]), 0.5).item() == pytest.approx(KL_EXAMPLE)


def test_sparsity_penalty_zero_at_target():
    assert abs(sparsity_penalty(0.05, np.full(8, 0.05), 1.0).item()) < 1e-12


@settings(max_examples=100, deadline=None)
@given(rho=st.floats(0.01, 0.99), rho_hat=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8))
def test_sparsity_penalty_is_non_negative(rho, rho_hat):
    assert sparsity_penalty(rho, np.array(rho_hat), 1.0).item() >= -1e-12


def test_sparsity_penalty_rejects_bad_rho():
    with pytest.raises(DomainError):
        sparsity_penalty(0.0, np.array([0.5]), 1.0)


def test_mean_activation_is_per_channel():
    pre = Tensor(np.zeros((4, 3, 5)))
    np.testing.assert_allclose(mean_activation(pre).data, np.full(3, 0.5))


# ============================================================================
# NETWORKS
# ============================================================================

@pytest.mark.parametrize("q,lengths", [(16, [16, 8, 4, 2]), (15, [15, 8, 4, 2]), (160, [160, 80, 40, 20])])
def test_autoencoder_mirrors_encoder(q, lengths):
    ae = AutoencoderNet(q, VariantConfig(), *_rngs())
    assert ae.encoder.lengths == lengths
    assert ae.num_layers == 3
    assert ae.encoder.out_features == 8 * lengths[-1]
    ae.eval()
    out = ae(np.random.default_rng(0).random((3, q)))
    assert out.shape == (3, q)
    assert np.all((out.data > 0.0) & (out.data < 1.0))


def test_encoder_rejects_wrong_width():
    encoder = ConvEncoder(Q, (4, 2), 3, 2, 0.0, *_rngs())
    with pytest.raises(ShapeError):
        encoder(np.zeros((2, Q + 1)))


def test_reconstruction_error_shapes():
    ae = AutoencoderNet(Q, VariantConfig(), *_rngs())
    x = np.random.default_rng(3).random((5, Q))
    batch = reconstruction_error(ae, x)
    assert batch.shape == (5, Q) and np.all(batch >= 0)
    np.testing.assert_allclose(reconstruction_error(ae, x[0]), batch[0])
    assert ae.training


# ============================================================================
# AUTOENCODER TRAINING
# ============================================================================

def test_constant_input_is_reconstructed():
    profile = DatasetProfile(id=0, name="constant", total=1000, jammed=500, non_jammed=500)
    ds = Dataset(features=np.full((1000, Q), 0.5), labels=np.arange(1000) % 2, profile=profile,
                 normalized=True)
    cfg = VariantConfig.for_variant('cae', lr=1e-2, ae_epochs=30)
    result = train_autoencoder(cfg, ds)
    assert result.history['recon_loss'].iloc[-1] <= 1e-3


def test_autoencoder_history_and_preconditions():
    ds = _benchmark()
    result = train_autoencoder(_quick('csae', beta=0.5), ds)
    assert list(result.history.columns) == ['epoch', 'loss', 'recon_loss']
    assert result.history['epoch'].tolist() == [1, 2]
    assert np.all(result.history['loss'] >= result.history['recon_loss'])

    raw = ds.model_copy(update={'normalized': False})
    with pytest.raises(DomainError):
        train_autoencoder(_quick(), raw)


def test_cdae_without_noise_matches_cae_with_adagrad():
    ds = _benchmark()
    cae = train_autoencoder(_quick('cae', ae_optimizer='adagrad'), ds).model
    cdae = train_autoencoder(_quick('cdae', noise_factor=0.0), ds).model
    for (name, a), (_, b) in zip(cae.state_dict().items(), cdae.state_dict().items()):
        np.testing.assert_array_equal(a, b, err_msg=name)


def test_cdae_noise_changes_training():
    ds = _benchmark()
    clean = train_autoencoder(_quick('cdae', noise_factor=0.0), ds).model
    noisy = train_autoencoder(_quick('cdae', noise_factor=0.3), ds).model
    assert not np.array_equal(clean.decoder.deconvs[-1].bias.data, noisy.decoder.deconvs[-1].bias.data)


def test_training_is_seed_deterministic():
    ds = _benchmark()
    a = train_autoencoder(_quick('csae'), ds)
    b = train_autoencoder(_quick('csae'), ds)
    assert a.history.equals(b.history)


# ============================================================================
# TRANSFER AND CLASSIFIER
# ============================================================================

def test_transfer_copies_every_encoder_layer():
    ae = AutoencoderNet(Q, VariantConfig(), *_rngs())
    model = transfer_weights(ae, _quick())
    for conv_ae, conv_clf in zip(ae.encoder.convs, model.encoder.convs):
        np.testing.assert_array_equal(conv_ae.weight.data, conv_clf.weight.data)
        np.testing.assert_array_equal(conv_ae.bias.data, conv_clf.bias.data)
    model.encoder.convs[0].weight.data[...] = 0.0
    assert np.any(ae.encoder.convs[0].weight.data != 0.0)


def test_transfer_without_encoder_stage():
    ae = AutoencoderNet(Q, VariantConfig(), *_rngs())
    model = transfer_weights(ae, _quick('cdae', recon_through_encoder=False))
    assert model.encoder is None
    assert model.hidden.weight.shape == (Q, 64)
    # CAE always keeps the encoder
    assert transfer_weights(ae, _quick('cae', recon_through_encoder=False)).encoder is not None


def test_classifier_learns_benchmark():
    ds = _benchmark(100)
    cfg = _quick('cae', clf_epochs=30, lr=3e-3)
    ae = train_autoencoder(cfg, ds).model
    result = train_classifier(transfer_weights(ae, cfg), cfg, ds, 'raw', ae)
    history = result.history
    assert list(history.columns) == ['epoch', 'train_bce', 'val_bce', 'val_accuracy']
    assert history['train_bce'].iloc[-1] < history['train_bce'].iloc[0]

    test = _benchmark(50, seed=1)
    _, predictions = evaluate(result.model, test, 'raw')
    assert np.mean(predictions == test.labels) >= 0.9


def test_classifier_on_reconstruction_error():
    ds = _benchmark()
    cfg = _quick('csae')
    ae = train_autoencoder(cfg, ds).model
    model = transfer_weights(ae, cfg)
    result = train_classifier(model, cfg, ds, cfg.classifier_input, ae)
    assert len(result.history) == 2
    scores, labels = evaluate(model, ds, cfg.classifier_input, ae)
    assert scores.shape == labels.shape == (len(ds),)


def test_frozen_encoder_keeps_transferred_weights():
    ds = _benchmark()
    cfg = _quick('cae', freeze_encoder=True, lr=1e-2)
    ae = train_autoencoder(cfg, ds).model
    model = transfer_weights(ae, cfg)
    before = model.encoder.state_dict()
    head_before = model.out.weight.data.copy()
    train_classifier(model, cfg, ds, 'raw')
    for key, value in model.encoder.state_dict().items():
        np.testing.assert_array_equal(value, before[key])
    assert not np.array_equal(model.out.weight.data, head_before)


def test_classifier_needs_both_labels():
    ds = _benchmark()
    cfg = _quick()
    model = transfer_weights(AutoencoderNet(Q, cfg, *_rngs()), cfg)
    with pytest.raises(DomainError):
        train_classifier(model, cfg, ds.subset(np.flatnonzero(ds.labels == 0)), 'raw')


def test_classifier_inputs_validation():
    x = np.zeros((2, Q))
    np.testing.assert_array_equal(classifier_inputs(x, 'raw'), x)
    with pytest.raises(DomainError):
        classifier_inputs(x, 'recon_error')
    with pytest.raises(DomainError):
        classifier_inputs(x, 'spectrum')


# ============================================================================
# DECISIONS
# ============================================================================

def test_decide_uses_inclusive_threshold():
    np.testing.assert_array_equal(decide([0.49, 0.5, 0.51]), [0, 1, 1])
    np.testing.assert_array_equal(decide([0.49, 0.5, 0.51], gamma=0.505), [0, 0, 1])


def test_classify_single_and_batch():
    cfg = _quick()
    model = transfer_weights(AutoencoderNet(Q, cfg, *_rngs()), cfg)
    x = np.random.default_rng(0).random((4, Q))
    score, label = classify(model, x[0])
    assert isinstance(score, float) and label in (0, 1)
    scores, labels = classify(model, x)
    assert scores[0] == pytest.approx(score)
    np.testing.assert_array_equal(classify(model, x, gamma=0.0)[1], np.ones(4))
    np.testing.assert_array_equal(predict_scores(model, x), predict_scores(model, x))


# ============================================================================
# PERSISTENCE
# ============================================================================

def test_detector_checkpoint_round_trip(tmp_path):
    ds = _benchmark()
    cfg = _quick('cdae', threshold=0.4)
    ae = train_autoencoder(cfg, ds).model
    model = transfer_weights(ae, cfg)
    train_classifier(model, cfg, ds, cfg.classifier_input, ae)
    path = save_detector(tmp_path / "cdae.npz", ae, model, cfg)

    ae2, model2, cfg2 = load_detector(path)
    assert cfg2 == cfg
    assert model2.threshold == 0.4
    a = evaluate(model, ds, cfg.classifier_input, ae)
    b = evaluate(model2, ds, cfg2.classifier_input, ae2)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
