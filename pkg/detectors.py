"""
Detectors - CAE / CDAE / CSAE Jamming Detectors
===============================================

Autoencoder-based jamming detection:
- Convolutional autoencoder with 3 encoder / 3 mirrored decoder layers
- Denoising (Gaussian corruption) and sparse (KL penalty) variants
- Encoder weight transfer into a fully connected classifier head
- BCE fine-tuning with a stratified 8:2 train/validation split
- Thresholded decisions (score >= gamma -> jammed)
- Checkpoints: .npz parameters + JSON metadata
"""

import json
import logging
from pathlib import Path
from typing import List, Literal, NamedTuple, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

import autodiff as ad
from autodiff import Tensor
from dataset import Dataset, stratified_indices
from nn_layers import (Conv1d, ConvTranspose1d, Dense, Dropout, Module, bce,
                       load_parameters, mse, save_parameters)
from optimizers import make_optimizer
from settings import DomainError, ShapeError

logger = logging.getLogger(__name__)

VariantKind = Literal['cae', 'cdae', 'csae']
VARIANTS: Tuple[str, ...] = ('cae', 'cdae', 'csae')

KL_EPS = 1e-6

# Per-variant defaults: (ae_epochs, clf_epochs, ae_optimizer, clf_optimizer)
_VARIANT_SCHEDULES = {
    'cae': (30, 30, 'adam', 'adam'),
    'cdae': (15, 30, 'adagrad', 'adam'),
    'csae': (15, 30, 'sgd', 'adam'),
}


class VariantConfig(BaseModel):
    """Detector hyperparameters; build with VariantConfig.for_variant(kind)"""
    model_config = ConfigDict(frozen=True)

    kind: VariantKind = 'cae'
    noise_factor: float = Field(default=0.0, ge=0.0)
    rho: float = Field(default=0.05, gt=0.0, lt=1.0)
    beta: float = Field(default=0.0, ge=0.0)
    batch_size: int = Field(default=200, gt=0)
    lr: float = Field(default=1e-4, gt=0)
    dropout: float = Field(default=0.2, ge=0.0, lt=1.0)
    ae_epochs: int = Field(default=30, gt=0)
    clf_epochs: int = Field(default=30, gt=0)
    ae_optimizer: str = 'adam'
    clf_optimizer: str = 'adam'
    encoder_channels: Tuple[int, ...] = (32, 16, 8)
    kernel_size: int = Field(default=3, gt=0)
    stride: int = Field(default=2, gt=0)
    hidden_units: int = Field(default=64, gt=0)
    freeze_encoder: bool = False
    recon_through_encoder: bool = True
    validation_frac: float = Field(default=0.2, gt=0.0, lt=1.0)
    threshold: float = 0.5
    seed: int = 0

    @classmethod
    def for_variant(cls, kind: str, **overrides) -> 'VariantConfig':
        kind = kind.lower()
        if kind not in _VARIANT_SCHEDULES:
            raise DomainError(f"Unknown detector variant '{kind}' (known: {', '.join(VARIANTS)})")
        ae_epochs, clf_epochs, ae_opt, clf_opt = _VARIANT_SCHEDULES[kind]
        values = dict(kind=kind, ae_epochs=ae_epochs, clf_epochs=clf_epochs,
                      ae_optimizer=ae_opt, clf_optimizer=clf_opt,
                      noise_factor=0.3 if kind == 'cdae' else 0.0,
                      beta=0.01 if kind == 'csae' else 0.0)
        values.update(overrides)
        return cls(**values)

    @property
    def classifier_input(self) -> str:
        """'raw' for CAE, 'recon_error' for CDAE / CSAE"""
        return 'raw' if self.kind == 'cae' else 'recon_error'


# ============================================================================
# NETWORKS
# ============================================================================

class ConvEncoder(Module):
    """Strided conv stack, ReLU + dropout after every layer"""

    def __init__(self, q: int, channels: Tuple[int, ...], kernel_size: int, stride: int,
                 dropout: float, rng: np.random.Generator, dropout_rng: np.random.Generator):
        super().__init__()
        self.q = q
        self.lengths = [q]
        self.convs, self.drops = [], []
        in_ch = 1
        for ch in channels:
            conv = Conv1d(in_ch, ch, kernel_size, rng, stride=stride, padding=kernel_size // 2)
            length = conv.output_length(self.lengths[-1])
            if length < 1:
                raise DomainError(f"Q={q} is too short for {len(channels)} stride-{stride} layers")
            self.lengths.append(length)
            self.convs.append(conv)
            self.drops.append(Dropout(dropout, dropout_rng))
            in_ch = ch
        self.channels = tuple(channels)

    @property
    def out_features(self) -> int:
        return self.channels[-1] * self.lengths[-1]

    def forward(self, x) -> Tensor:
        return self.encode(x)[0]

    def encode(self, x) -> Tuple[Tensor, Tensor]:
        """(latent (B, C, L), last pre-activation)"""
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.q:
            raise ShapeError(f"encoder expects (batch, {self.q}) inputs", x.shape)
        h = ad.reshape(x, (x.shape[0], 1, self.q))
        pre = h
        for conv, drop in zip(self.convs, self.drops):
            pre = conv(h)
            h = drop(ad.relu(pre))
        return h, pre

    def clone(self, dropout_rng: np.random.Generator) -> 'ConvEncoder':
        """Deep copy of every layer's weights and biases"""
        conv0 = self.convs[0]
        copy = ConvEncoder(self.q, self.channels, conv0.weight.shape[2], conv0.stride,
                           self.drops[0].p, np.random.default_rng(0), dropout_rng)
        copy.load_state_dict(self.state_dict())
        return copy


class ConvDecoder(Module):
    """Transposed conv stack mirroring a ConvEncoder; ReLU hidden, sigmoid output"""

    def __init__(self, encoder: ConvEncoder, kernel_size: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.q = encoder.q
        self.deconvs = []
        channels = list(encoder.channels[::-1]) + [1]
        lengths = encoder.lengths[::-1]
        padding = kernel_size // 2
        for i in range(len(channels) - 1):
            natural = (lengths[i] - 1) * stride - 2 * padding + kernel_size
            output_padding = lengths[i + 1] - natural
            self.deconvs.append(ConvTranspose1d(channels[i], channels[i + 1], kernel_size, rng,
                                                stride=stride, padding=padding,
                                                output_padding=output_padding))

    def forward(self, h) -> Tensor:
        for i, deconv in enumerate(self.deconvs):
            h = deconv(h)
            h = ad.sigmoid(h) if i == len(self.deconvs) - 1 else ad.relu(h)
        return ad.reshape(h, (h.shape[0], self.q))


class AutoencoderNet(Module):
    def __init__(self, q: int, cfg: VariantConfig, rng: np.random.Generator,
                 dropout_rng: np.random.Generator):
        super().__init__()
        self.q = q
        self.encoder = ConvEncoder(q, cfg.encoder_channels, cfg.kernel_size, cfg.stride,
                                   cfg.dropout, rng, dropout_rng)
        self.decoder = ConvDecoder(self.encoder, cfg.kernel_size, cfg.stride, rng)

    @property
    def num_layers(self) -> int:
        return len(self.encoder.convs)

    def forward(self, x) -> Tensor:
        return self.decoder(self.encoder(x))


class ClassifierModel(Module):
    """Transferred encoder + dense(hidden) / ReLU / dropout / dense(1) / sigmoid"""

    def __init__(self, encoder: Optional[ConvEncoder], q: int, cfg: VariantConfig,
                 rng: np.random.Generator, dropout_rng: np.random.Generator):
        super().__init__()
        self.q = q
        self.kind = cfg.kind
        self.threshold = cfg.threshold
        self.encoder = encoder
        in_features = encoder.out_features if encoder is not None else q
        self.hidden = Dense(in_features, cfg.hidden_units, rng)
        self.drop = Dropout(cfg.dropout, dropout_rng)
        self.out = Dense(cfg.hidden_units, 1, rng)

    def head_parameters(self):
        return self.hidden.parameters() + self.out.parameters()

    def forward(self, x) -> Tensor:
        x = ad.as_tensor(x)
        batch = x.shape[0]
        h = ad.reshape(self.encoder(x), (batch, -1)) if self.encoder is not None else x
        h = self.drop(ad.relu(self.hidden(h)))
        return ad.sigmoid(self.out(h))


# ============================================================================
# AUTOENCODER TRAINING
# ============================================================================

class TrainingResult(NamedTuple):
    model: Module
    history: pd.DataFrame


def _streams(seed: int, stage: int, n: int) -> List[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence([seed, stage]).spawn(n)]


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def sparsity_penalty(rho: float, rho_hat, beta: float) -> Tensor:
    """
    beta * sum_j KL(rho || rho_hat_j) between Bernoulli distributions

    rho_hat is clamped to [1e-6, 1 - 1e-6].
    """
    if not 0.0 < rho < 1.0:
        raise DomainError(f"rho must lie in (0, 1), got {rho}")
    q = ad.clip(ad.as_tensor(rho_hat), KL_EPS, 1.0 - KL_EPS)
    kl = (rho * np.log(rho) - rho * ad.log(q)
          + (1.0 - rho) * np.log(1.0 - rho) - (1.0 - rho) * ad.log(1.0 - q))
    return ad.tsum(kl) * beta


def mean_activation(pre: Tensor) -> Tensor:
    """Per-channel mean of sigmoid(pre) over batch and positions"""
    return ad.mean(ad.sigmoid(pre), axis=(0, 2))


def train_autoencoder(cfg: VariantConfig, train: Dataset) -> TrainingResult:
    """
    Fit the autoencoder by minimizing reconstruction MSE

    CDAE feeds noise-corrupted inputs (sigma = noise_factor, clipped to
    [0, 1]) and reconstructs the clean rows; CSAE adds the sparsity
    penalty on the encoder output.

    Returns:
        TrainingResult(AutoencoderNet, per-epoch history: epoch, loss, recon_loss)
    """
    if not train.normalized:
        raise DomainError(f"dataset {train.profile.name} must be normalized before autoencoder training")

    init_rng, batch_rng, drop_rng, noise_rng = _streams(cfg.seed, 0, 4)
    net = AutoencoderNet(train.q, cfg, init_rng, drop_rng)
    opt = make_optimizer(cfg.ae_optimizer, net.parameters(), cfg.lr)
    x_all = train.features

    rows = []
    for epoch in range(1, cfg.ae_epochs + 1):
        totals, recons = [], []
        for idx in _minibatches(len(train), cfg.batch_size, batch_rng):
            clean = x_all[idx]
            noisy = clean
            if cfg.noise_factor > 0:
                noisy = np.clip(clean + cfg.noise_factor * noise_rng.standard_normal(clean.shape), 0.0, 1.0)

            net.zero_grad()
            latent, pre = net.encoder.encode(noisy)
            recon = mse(net.decoder(latent), clean)
            loss = recon
            if cfg.kind == 'csae' and cfg.beta > 0:
                loss = recon + sparsity_penalty(cfg.rho, mean_activation(pre), cfg.beta)
            ad.backward(loss)
            opt.step()
            totals.append(loss.item())
            recons.append(recon.item())

        rows.append((epoch, float(np.mean(totals)), float(np.mean(recons))))
        logger.info(f"[{cfg.kind.upper()}] AE epoch {epoch}/{cfg.ae_epochs} - loss {rows[-1][1]:.6f}")

    return TrainingResult(net, pd.DataFrame(rows, columns=['epoch', 'loss', 'recon_loss']))


def reconstruction_error(ae: AutoencoderNet, x) -> np.ndarray:
    """Per-feature |x - decode(encode(x))| with dropout off"""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x.reshape(1, -1) if single else x
    was_training = ae.training
    ae.eval()
    try:
        with ad.no_grad():
            error = np.abs(batch - ae(batch).data)
    finally:
        ae.train(was_training)
    return error[0] if single else error


# ============================================================================
# TRANSFER AND CLASSIFIER
# ============================================================================

def transfer_weights(ae: AutoencoderNet, cfg: Optional[VariantConfig] = None) -> ClassifierModel:
    """
    Copy every encoder layer into a fresh classifier

    The FCN head is initialized from cfg.seed. With recon_through_encoder
    disabled the classifier has no encoder stage at all (CDAE / CSAE
    alternative where only the FCN sees the error vector).
    """
    cfg = cfg or VariantConfig()
    head_rng, drop_rng = _streams(cfg.seed, 1, 2)
    use_encoder = cfg.kind == 'cae' or cfg.recon_through_encoder
    encoder = ae.encoder.clone(drop_rng) if use_encoder else None
    model = ClassifierModel(encoder, ae.q, cfg, head_rng, drop_rng)
    logger.info(f"Transferred {len(ae.encoder.convs) if encoder else 0} encoder layers to the "
                f"{cfg.kind.upper()} classifier")
    return model


def classifier_inputs(features: np.ndarray, variant_input: str,
                      ae: Optional[AutoencoderNet] = None) -> np.ndarray:
    if variant_input == 'raw':
        return np.asarray(features, dtype=np.float64)
    if variant_input == 'recon_error':
        if ae is None:
            raise DomainError("reconstruction-error input needs the trained autoencoder")
        return reconstruction_error(ae, features)
    raise DomainError(f"variant_input must be 'raw' or 'recon_error', got '{variant_input}'")


def train_classifier(model: ClassifierModel, cfg: VariantConfig, train: Dataset,
                     variant_input: str = 'raw', ae: Optional[AutoencoderNet] = None) -> TrainingResult:
    """
    Supervised BCE fine-tuning on an 8:2 stratified train/validation split

    Args:
        model: Classifier from transfer_weights
        cfg: Variant hyperparameters (clf_epochs, clf_optimizer, lr, ...)
        train: Labeled training set
        variant_input: 'raw' features or 'recon_error' vectors from `ae`
        ae: Trained autoencoder (required for 'recon_error')

    Returns:
        TrainingResult(model, per-epoch history: epoch, train_bce, val_bce, val_accuracy)
    """
    jammed, non_jammed = train.counts()
    if jammed == 0 or non_jammed == 0:
        raise DomainError(f"classifier training on {train.profile.name} needs both labels")

    split_rng, batch_rng = _streams(cfg.seed, 2, 2)
    fit_idx, val_idx = stratified_indices(train.labels, cfg.validation_frac, split_rng)
    inputs = classifier_inputs(train.features, variant_input, ae)
    targets = train.labels.astype(np.float64)[:, None]

    params = model.head_parameters() if (cfg.freeze_encoder or model.encoder is None) else model.parameters()
    opt = make_optimizer(cfg.clf_optimizer, params, cfg.lr)
    model.train()

    rows = []
    for epoch in range(1, cfg.clf_epochs + 1):
        losses = []
        for batch in _minibatches(fit_idx.size, cfg.batch_size, batch_rng):
            idx = fit_idx[batch]
            model.zero_grad()
            loss = bce(model(inputs[idx]), targets[idx])
            ad.backward(loss)
            opt.step()
            losses.append(loss.item())

        val_scores = predict_scores(model, inputs[val_idx])
        val_bce = float(bce(Tensor(val_scores[:, None]), targets[val_idx]).item()) if val_idx.size else float('nan')
        val_acc = float(np.mean(decide(val_scores, cfg.threshold) == train.labels[val_idx])) if val_idx.size else float('nan')
        rows.append((epoch, float(np.mean(losses)), val_bce, val_acc))
        logger.info(f"[{cfg.kind.upper()}] classifier epoch {epoch}/{cfg.clf_epochs} - "
                    f"bce {rows[-1][1]:.4f} val_bce {val_bce:.4f} val_acc {val_acc:.3f}")

    return TrainingResult(model, pd.DataFrame(rows, columns=['epoch', 'train_bce', 'val_bce', 'val_accuracy']))


def predict_scores(model: ClassifierModel, inputs: np.ndarray) -> np.ndarray:
    """Sigmoid scores in eval mode (pure function of the parameters)"""
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            return model(np.asarray(inputs, dtype=np.float64)).data.reshape(-1)
    finally:
        model.train(was_training)


def decide(scores, gamma: float = 0.5) -> np.ndarray:
    """label = 1 iff score >= gamma"""
    return (np.asarray(scores, dtype=np.float64) >= gamma).astype(np.int64)


def classify(model: ClassifierModel, x, gamma: Optional[float] = None):
    """
    Score and threshold one observation (Q,) or a batch (B, Q)

    Returns:
        (score, label) for a single row, (scores, labels) arrays for a batch
    """
    gamma = model.threshold if gamma is None else gamma
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    scores = predict_scores(model, x.reshape(1, -1) if single else x)
    labels = decide(scores, gamma)
    if single:
        return float(scores[0]), int(labels[0])
    return scores, labels


def evaluate(model: ClassifierModel, ds: Dataset, variant_input: str = 'raw',
             ae: Optional[AutoencoderNet] = None,
             gamma: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """(scores, predicted labels) over a dataset"""
    return classify(model, classifier_inputs(ds.features, variant_input, ae), gamma)


# ============================================================================
# PERSISTENCE
# ============================================================================

def save_detector(path: Union[str, Path], ae: AutoencoderNet, model: ClassifierModel,
                  cfg: VariantConfig) -> Path:
    """Write <path> (.npz parameters) and <path>.json (variant, gamma, epochs, seed, Q)"""
    path = Path(path)
    state = {f"autoencoder.{k}": v for k, v in ae.state_dict().items()}
    state.update({f"classifier.{k}": v for k, v in model.state_dict().items()})
    save_parameters(path, state)
    meta = {
        'variant': cfg.kind,
        'gamma': cfg.threshold,
        'ae_epochs': cfg.ae_epochs,
        'clf_epochs': cfg.clf_epochs,
        'seed': cfg.seed,
        'q': ae.q,
        'config': json.loads(cfg.model_dump_json()),
    }
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2), encoding='utf-8')
    return path


def load_detector(path: Union[str, Path]) -> Tuple[AutoencoderNet, ClassifierModel, VariantConfig]:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text(encoding='utf-8'))
    cfg = VariantConfig(**meta['config'])
    rng = np.random.default_rng(cfg.seed)
    ae = AutoencoderNet(meta['q'], cfg, rng, rng)
    model = transfer_weights(ae, cfg)

    state = load_parameters(path)
    ae.load_state_dict({k[len("autoencoder."):]: v for k, v in state.items() if k.startswith("autoencoder.")})
    model.load_state_dict({k[len("classifier."):]: v for k, v in state.items() if k.startswith("classifier.")})
    return ae, model, cfg
