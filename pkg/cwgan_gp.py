"""
CWGAN-GP - Conditional Wasserstein GAN Oversampler
==================================================

Balances an imbalanced jamming dataset with class-conditioned samples:
- Generator: dense projection + two upsampling conv layers (BN, leaky ReLU), tanh output
- Critic: five conv layers (leaky ReLU, dropout, no normalization) + scalar head
- Critic / generator losses and the gradient penalty (double backprop)
- Alternating training with n_critic critic steps per generator step
- Sampling, augmentation in fixed-size rounds, 1-D Wasserstein oracle
- Checkpoints (.npz + JSON config) and loss-history CSV
"""

import json
import logging
import math
from contextlib import contextmanager
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import stats
from tqdm import tqdm

import autodiff as ad
from autodiff import Tensor
from dataset import Dataset
from nn_layers import (BatchNorm1d, Conv1d, ConvTranspose1d, Dense, Dropout, Module,
                       load_parameters, save_parameters)
from optimizers import Adam
from settings import DomainError, ShapeError

logger = logging.getLogger(__name__)

N_CLASSES = 2

HISTORY_COLUMNS = ['step', 'epoch', 'critic_loss', 'gen_loss', 'wasserstein_estimate', 'gradient_penalty']


class GanConfig(BaseModel):
    """Oversampler hyperparameters (defaults: lambda 20, n_critic 7, Adam 1e-4 / 0.5 / 0.9)"""
    model_config = ConfigDict(frozen=True)

    latent_dim: int = Field(default=128, gt=0)
    seed_channels: int = Field(default=16, gt=0)
    generator_channels: Tuple[int, ...] = (128, 64)
    critic_channels: Tuple[int, ...] = (32, 64, 128, 256, 512)
    critic_strides: Tuple[int, ...] = (2, 1, 2, 1, 2)
    kernel_size: int = Field(default=3, gt=0)
    critic_dropout: float = Field(default=0.5, ge=0.0, lt=1.0)
    leaky_slope: float = Field(default=0.2, ge=0.0)
    bn_momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    lambda_gp: float = Field(default=20.0, gt=0)
    n_critic: int = Field(default=7, ge=1)
    batch_size: int = Field(default=64, ge=2)
    epochs: int = Field(default=20, gt=0)
    lr: float = Field(default=1e-4, gt=0)
    beta1: float = Field(default=0.5, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.9, ge=0.0, lt=1.0)
    round_size: int = Field(default=250, gt=0)
    per_class: int = Field(default=2500, gt=0)
    seed: int = 0

    @model_validator(mode='after')
    def _layers(self) -> 'GanConfig':
        if not self.generator_channels or any(c <= 0 for c in self.generator_channels):
            raise ValueError(f"generator_channels must be positive, got {self.generator_channels}")
        if len(self.critic_channels) != len(self.critic_strides):
            raise ValueError("critic_channels and critic_strides differ in length")
        if not self.critic_channels or any(c <= 0 for c in self.critic_channels):
            raise ValueError(f"critic_channels must be positive, got {self.critic_channels}")
        if any(s <= 0 for s in self.critic_strides):
            raise ValueError(f"critic_strides must be positive, got {self.critic_strides}")
        return self

    @classmethod
    def desk(cls, **overrides) -> 'GanConfig':
        """Small networks and a faster learning rate for desk-scale runs"""
        values = dict(latent_dim=16, seed_channels=8, generator_channels=(32, 16),
                      critic_channels=(16, 16, 32, 32, 64), lr=1e-3)
        values.update(overrides)
        return cls(**values)


class GanTrainingResult(NamedTuple):
    generator: 'Generator'
    critic: 'Critic'
    history: pd.DataFrame


def one_hot(labels: Sequence[int]) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if np.any((labels < 0) | (labels >= N_CLASSES)):
        raise DomainError(f"condition labels must lie in 0..{N_CLASSES - 1}")
    return np.eye(N_CLASSES)[labels]


def to_tanh_domain(features: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(features) - 1.0


def from_tanh_domain(values: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(values) + 1.0) / 2.0, 0.0, 1.0)


# ============================================================================
# NETWORKS
# ============================================================================

class Generator(Module):
    """G(z|y): (B, latent) noise + labels -> (B, Q) in [-1, 1]"""

    def __init__(self, q: int, config: GanConfig, rng: np.random.Generator):
        super().__init__()
        self.q = q
        self.latent_dim = config.latent_dim
        self.slope = config.leaky_slope
        self.seed_channels = config.seed_channels
        self.seed_len = math.ceil(q / 2 ** len(config.generator_channels))
        self.project = Dense(config.latent_dim + N_CLASSES, config.seed_channels * self.seed_len, rng)

        self.ups, self.norms = [], []
        in_ch = config.seed_channels
        for ch in config.generator_channels:
            self.ups.append(ConvTranspose1d(in_ch, ch, 4, rng, stride=2, padding=1))
            self.norms.append(BatchNorm1d(ch, momentum=config.bn_momentum))
            in_ch = ch
        self.out = Conv1d(in_ch, 1, 3, rng, padding=1)

    def forward(self, z, labels) -> Tensor:
        z = ad.as_tensor(z)
        batch = z.shape[0]
        h = ad.concat([z, one_hot(labels)], axis=1)
        h = ad.leaky_relu(self.project(h), self.slope)
        h = ad.reshape(h, (batch, self.seed_channels, self.seed_len))
        for up, norm in zip(self.ups, self.norms):
            h = ad.leaky_relu(norm(up(h)), self.slope)
        h = ad.slice_axis(self.out(h), 2, 0, self.q)
        return ad.tanh(ad.reshape(h, (batch, self.q)))


class Critic(Module):
    """D(x|y): (B, Q) + labels -> (B, 1), labels enter as two constant input channels"""

    def __init__(self, q: int, config: GanConfig, rng: np.random.Generator,
                 dropout_rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.q = q
        self.slope = config.leaky_slope
        dropout_rng = dropout_rng or rng

        self.convs, self.drops = [], []
        in_ch, length = 1 + N_CLASSES, q
        for ch, stride in zip(config.critic_channels, config.critic_strides):
            conv = Conv1d(in_ch, ch, config.kernel_size, rng, stride=stride,
                          padding=config.kernel_size // 2)
            length = conv.output_length(length)
            if length < 1:
                raise DomainError(f"Q={q} is too short for the critic strides {config.critic_strides}")
            self.convs.append(conv)
            self.drops.append(Dropout(config.critic_dropout, dropout_rng))
            in_ch = ch
        self.head = Dense(in_ch * length, 1, rng)

    def forward(self, x, labels) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.q:
            raise ShapeError(f"critic expects (batch, {self.q}) inputs", x.shape)
        batch = x.shape[0]
        cond = np.broadcast_to(one_hot(labels)[:, :, None], (batch, N_CLASSES, self.q))
        h = ad.concat([ad.reshape(x, (batch, 1, self.q)), cond], axis=1)
        for conv, drop in zip(self.convs, self.drops):
            h = drop(ad.leaky_relu(conv(h), self.slope))
        return self.head(ad.reshape(h, (batch, -1)))


@contextmanager
def frozen(module: Module):
    """Temporarily stop gradients from reaching a module's parameters"""
    params = module.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield module
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


# ============================================================================
# LOSSES
# ============================================================================

def interpolate(x_real, x_fake, eps) -> np.ndarray:
    """Row-wise x_hat = eps * x_real + (1 - eps) * x_fake"""
    x_real = np.asarray(x_real, dtype=np.float64)
    x_fake = np.asarray(x_fake, dtype=np.float64)
    if x_real.shape != x_fake.shape:
        raise ShapeError("real and fake batches differ", x_real.shape, x_fake.shape)
    eps = np.asarray(eps, dtype=np.float64).reshape(-1)
    if eps.size != x_real.shape[0]:
        raise ShapeError("one epsilon per row expected", eps.shape, x_real.shape)
    if np.any((eps < 0) | (eps > 1)):
        raise DomainError("interpolation weights must lie in [0, 1]")
    eps = eps.reshape((-1,) + (1,) * (x_real.ndim - 1))
    return eps * x_real + (1.0 - eps) * x_fake


def critic_loss(d_real, d_fake, gp) -> Tensor:
    """-mean(D(x|y)) + mean(D(x~|y)) + gp, gp already scaled by lambda"""
    return ad.mean(d_fake) - ad.mean(d_real) + gp


def generator_loss(d_fake) -> Tensor:
    return -ad.mean(d_fake)


def gradient_penalty(critic, x_hat, labels, lambda_gp: float) -> Tensor:
    """
    lambda * mean over rows of (||grad_x D(x_hat|y)||_2 - 1)^2

    The result stays differentiable with respect to the critic parameters.

    Args:
        critic: Callable critic(x, labels) -> (B, 1) scores
        x_hat: Interpolated batch
        labels: Condition labels of the batch
        lambda_gp: Penalty weight
    """
    result = ad.grad_of_input_norm(lambda x: critic(x, labels), x_hat)
    return result.penalty * lambda_gp


# ============================================================================
# TRAINING
# ============================================================================

def _balanced_labels(batch_size: int) -> np.ndarray:
    half = batch_size // 2
    return np.r_[np.zeros(batch_size - half, dtype=np.int64), np.ones(half, dtype=np.int64)]


def train(config: GanConfig, ds: Dataset, progress: bool = False) -> GanTrainingResult:
    """
    Train the conditional generator and critic on one normalized dataset

    An epoch is ceil(N / batch_size) generator steps, each preceded by
    n_critic critic steps. Real minibatches hold both labels in equal
    shares (drawn with replacement) so the minority class conditions
    every step.

    Args:
        config: Hyperparameters and seed
        ds: Normalized dataset with both labels present
        progress: Show a tqdm bar over epochs

    Returns:
        GanTrainingResult(generator, critic, history) where history has one
        row per generator step
    """
    if not ds.normalized:
        raise DomainError(f"dataset {ds.profile.name} must be normalized before GAN training")
    by_class = [np.flatnonzero(ds.labels == c) for c in range(N_CLASSES)]
    if any(idx.size == 0 for idx in by_class):
        raise DomainError(f"dataset {ds.profile.name} needs both labels for conditional training")

    init_ss, batch_ss, noise_ss, drop_ss = np.random.SeedSequence(config.seed).spawn(4)
    init_rng = np.random.default_rng(init_ss)
    batch_rng = np.random.default_rng(batch_ss)
    noise_rng = np.random.default_rng(noise_ss)

    gen = Generator(ds.q, config, init_rng)
    critic = Critic(ds.q, config, init_rng, dropout_rng=np.random.default_rng(drop_ss))
    opt_g = Adam(gen.parameters(), lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    opt_c = Adam(critic.parameters(), lr=config.lr, beta1=config.beta1, beta2=config.beta2)

    x_all = to_tanh_domain(ds.features)
    labels = _balanced_labels(config.batch_size)
    steps_per_epoch = math.ceil(len(ds) / config.batch_size)
    rows = []

    logger.info(f"Training CWGAN-GP on {ds.profile.name}: N={len(ds)}, Q={ds.q}, "
                f"{config.epochs} epochs x {steps_per_epoch} steps, n_critic={config.n_critic}")

    step = 0
    for epoch in tqdm(range(1, config.epochs + 1), desc="cwgan-gp", disable=not progress):
        for _ in range(steps_per_epoch):
            for _ in range(config.n_critic):
                idx = np.concatenate([batch_rng.choice(by_class[c], size=int(np.sum(labels == c)))
                                      for c in range(N_CLASSES)])
                real = x_all[idx]
                z = noise_rng.standard_normal((config.batch_size, config.latent_dim))
                with ad.no_grad():
                    fake = gen(z, labels).data
                x_hat = interpolate(real, fake, noise_rng.uniform(size=config.batch_size))

                critic.zero_grad()
                d_real = critic(real, labels)
                d_fake = critic(fake, labels)
                gp = gradient_penalty(critic, x_hat, labels, config.lambda_gp)
                loss_c = critic_loss(d_real, d_fake, gp)
                ad.backward(loss_c)
                opt_c.step()

            z = noise_rng.standard_normal((config.batch_size, config.latent_dim))
            gen.zero_grad()
            with frozen(critic):
                loss_g = generator_loss(critic(gen(z, labels), labels))
                ad.backward(loss_g)
            opt_g.step()

            step += 1
            rows.append((step, epoch, loss_c.item(), loss_g.item(),
                         float(np.mean(d_real.data) - np.mean(d_fake.data)), gp.item()))
            logger.debug(f"step {step}: critic {loss_c.item():.4f} gen {loss_g.item():.4f}")

        recent = rows[-steps_per_epoch:]
        logger.info(f"Epoch {epoch}/{config.epochs} - critic {np.mean([r[2] for r in recent]):.4f} "
                    f"gen {np.mean([r[3] for r in recent]):.4f} "
                    f"W {np.mean([r[4] for r in recent]):.4f}")

    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    return GanTrainingResult(gen, critic, history)


def epoch_means(history: pd.DataFrame) -> pd.DataFrame:
    """Per-epoch averages of the step history"""
    return history.drop(columns=['step']).groupby('epoch', as_index=False).mean()


# ============================================================================
# SAMPLING AND AUGMENTATION
# ============================================================================

def sample(gen: Generator, label: int, n: int, seed: Union[int, np.random.Generator] = 0,
           batch_size: int = 256) -> np.ndarray:
    """
    Draw n class-conditioned observations in the feature domain [0, 1]

    The generator runs in eval mode (frozen batchnorm statistics).
    """
    if n < 0:
        raise DomainError(f"sample count must be >= 0, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    was_training = gen.training
    gen.eval()
    chunks = []
    try:
        with ad.no_grad():
            for start in range(0, n, batch_size):
                count = min(batch_size, n - start)
                z = rng.standard_normal((count, gen.latent_dim))
                chunks.append(gen(z, np.full(count, label)).data)
    finally:
        gen.train(was_training)
    if not chunks:
        return np.zeros((0, gen.q))
    return from_tanh_domain(np.concatenate(chunks, axis=0))


def augment_to_balance(gen: Generator, ds: Dataset, per_class: int = 2500,
                       round_size: int = 250, seed: int = 0) -> Dataset:
    """
    Top up both labels with synthetic rows until each holds per_class rows

    Sampling runs in rounds of round_size (the last round only as large as
    needed). Real rows are kept unmodified and first; a class already at or
    above per_class gets no synthetic rows.

    Returns:
        Dataset whose `synthetic` flag marks generated rows
    """
    if not ds.normalized:
        raise DomainError(f"dataset {ds.profile.name} must be normalized before augmentation")
    if gen.q != ds.q:
        raise ShapeError("generator output does not match the dataset width", (gen.q,), (ds.q,))
    rng = np.random.default_rng(seed)

    features, labels = [ds.features], [ds.labels]
    flags = [ds.provenance]
    for label in range(N_CLASSES):
        have = int(np.sum(ds.labels == label))
        needed = max(per_class - have, 0)
        made = 0
        while made < needed:
            count = min(round_size, needed - made)
            features.append(sample(gen, label, count, rng))
            labels.append(np.full(count, label, dtype=np.int64))
            flags.append(np.ones(count, dtype=bool))
            made += count
        logger.info(f"Label {label}: {have} real + {made} synthetic")

    return ds.with_rows(np.concatenate(features), np.concatenate(labels), np.concatenate(flags))


def wasserstein_1d(a: Sequence[float], b: Sequence[float]) -> float:
    """
    Earth mover's distance between two 1-D empirical distributions

    Equal sizes use mean |sorted(a) - sorted(b)|; otherwise the quantile
    functions are aligned (scipy.stats.wasserstein_distance).
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise DomainError("wasserstein_1d needs non-empty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    return float(stats.wasserstein_distance(a, b))


# ============================================================================
# PERSISTENCE
# ============================================================================

def save_gan(path: Union[str, Path], gen: Generator, critic: Critic, config: GanConfig) -> Path:
    """Write <path> (.npz parameters) and <path>.json (config + Q)"""
    path = Path(path)
    state = {f"generator.{k}": v for k, v in gen.state_dict().items()}
    state.update({f"critic.{k}": v for k, v in critic.state_dict().items()})
    save_parameters(path, state)
    meta = {'q': gen.q, 'config': json.loads(config.model_dump_json())}
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2), encoding='utf-8')
    return path


def load_gan(path: Union[str, Path]) -> Tuple[Generator, Critic, GanConfig]:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text(encoding='utf-8'))
    config = GanConfig(**meta['config'])
    rng = np.random.default_rng(config.seed)
    gen = Generator(meta['q'], config, rng)
    critic = Critic(meta['q'], config, rng)

    state = load_parameters(path)
    gen.load_state_dict({k[len("generator."):]: v for k, v in state.items() if k.startswith("generator.")})
    critic.load_state_dict({k[len("critic."):]: v for k, v in state.items() if k.startswith("critic.")})
    return gen, critic, config


def save_history(path: Union[str, Path], history: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history.to_csv(path, index=False, float_format='%.17g', lineterminator='\n')
    return path
