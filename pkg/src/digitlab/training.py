"""Recognizer training (RMSprop), SGAN training (Adam), and evaluation.

Every source of randomness inside a step is drawn from a stream keyed by
``(seed, purpose, step)``. The batch for step ``k`` comes from
:func:`digitlab.data.batch_for_step`. A run can therefore be resumed from
parameters, optimizer state, batchnorm buffers and the step counter alone.
"""

import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import persistence
from .data import NUM_CLASSES, batch_for_step, one_hot_batch
from .errors import ContractError, NonFiniteError
from .layers import (
    categorical_cross_entropy,
    sigmoid_binary_cross_entropy,
    softmax_cross_entropy,
)
from .models import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    build_recognizer,
)
from .optim import Adam, RMSprop
from .tensor import Rng, Tensor, no_grad

# Rng.child purposes (SHUFFLE_STREAM = 2 lives in data)
INIT_STREAM = 1
STEP_STREAM = 3
LABEL_STREAM = 4
SAMPLE_STREAM = 5

FAKE_CLASS = NUM_CLASSES


@dataclass
class TrainConfig:
    steps: int = 19550
    batch_size: int = 64
    lr: float = 0.001
    seed: int = 0
    labeled_fraction: float = 1.0
    eval_interval: int = 500
    out_dir: str = None
    checkpoint_every: int = 0
    # SGAN only
    latent_dim: int = 100
    sample_every: int = 100000
    sample_count: int = 16
    sample_columns: int = 4

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.labeled_fraction <= 1:
            raise ContractError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        if self.lr <= 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")

    def to_dict(self):
        return asdict(self)


class Metrics:
    """Logged rows for one run. ``kind`` is ``"recognizer"`` or ``"sgan"``."""

    def __init__(self, kind):
        if kind not in ("recognizer", "sgan"):
            raise ValueError(f"unknown metrics kind {kind!r}")
        self.kind = kind
        self.columns = persistence.RECOGNIZER_COLUMNS if kind == "recognizer" else persistence.SGAN_COLUMNS
        self.rows = []
        self._last = {}

    def log(self, step, **values):
        for k, v in values.items():
            if not isinstance(v, str) and not math.isfinite(v):
                raise NonFiniteError(f"non-finite {k} at step {step}")
        split = values.get("split", "")
        if step <= self._last.get(split, -1):
            raise ContractError(f"step {step} does not increase past {self._last[split]} ({split or 'sgan'})")
        self._last[split] = step
        self.rows.append({"step": int(step), **values})

    def select(self, split):
        return [r for r in self.rows if r.get("split") == split]

    def __len__(self):
        return len(self.rows)


def _accuracy(scores, labels):
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def evaluate(model, dataset, batch_size=500):
    """Mean categorical cross-entropy and argmax accuracy, in eval mode."""
    n = len(dataset)
    if n == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    loss_sum, hits = 0.0, 0
    try:
        with no_grad():
            for i in range(0, n, batch_size):
                x = dataset.images[i:i + batch_size]
                y = dataset.labels[i:i + batch_size]
                probs = model(Tensor(x))
                loss_sum += float(categorical_cross_entropy(probs, one_hot_batch(y, NUM_CLASSES)).item()) * len(y)
                hits += int(np.sum(np.argmax(probs.data, axis=1) == y))
    finally:
        model.training = was_training
    return loss_sum / n, hits / n


def _checkpoint_path(out_dir, step):
    return os.path.join(out_dir, f"step_{step:07d}.ckpt")


def recognizer_step(model, optimizer, x, y, rng):
    """One RMSprop update on a batch; returns (loss, accuracy) before the update."""
    model.train()
    optimizer.zero_grad()
    logits = model(Tensor(x), rng=rng, logits=True)
    loss = softmax_cross_entropy(logits, one_hot_batch(y, NUM_CLASSES))
    value = float(loss.item())
    if not math.isfinite(value):
        raise NonFiniteError("non-finite recognizer loss")
    loss.backward()
    optimizer.step()
    return value, _accuracy(logits.data, y)


def train_recognizer(config, train, validation=None, model=None, optimizer=None, start_step=0, log=None):
    """Run ``config.steps`` RMSprop updates (from ``start_step``).

    Train rows are logged every step as ``step = k + 1`` (updates applied).
    Validation rows are logged at step 0, every ``eval_interval`` steps and
    at the final step. With ``out_dir`` set, ``best.ckpt`` tracks the best
    validation accuracy, ``final.ckpt`` holds the last step, and
    ``checkpoint_every`` adds periodic ``step_NNNNNNN.ckpt`` files.

    Returns ``(model, metrics)``; ``metrics.best`` describes the best
    validation checkpoint.
    """
    if model is None:
        model = build_recognizer(Rng(config.seed).child(INIT_STREAM))
    if optimizer is None:
        optimizer = RMSprop(model.parameters(), lr=config.lr)
    metrics = Metrics("recognizer")
    metrics.best = {"step": None, "accuracy": -1.0, "checkpoint": None, "state": None}
    out = config.out_dir
    base = Rng(config.seed)

    def save(path, step):
        persistence.save_checkpoint(path, model, optimizer, {"step": step})

    def validate(step):
        loss, acc = evaluate(model, validation)
        metrics.log(step, split="validation", loss=loss, accuracy=acc)
        if acc > metrics.best["accuracy"]:
            metrics.best.update(step=step, accuracy=acc,
                                state=OrderedDict((k, v.copy()) for k, v in model.state_dict().items()))
            if out:
                metrics.best["checkpoint"] = os.path.join(out, "best.ckpt")
                save(metrics.best["checkpoint"], step)
        if log:
            log(f"step {step} validation loss {loss:.4f} accuracy {acc:.4f}")

    if validation is not None and start_step == 0:
        validate(0)
    for k in range(start_step, config.steps):
        idx = batch_for_step(len(train), config.batch_size, config.seed, k)
        try:
            loss, acc = recognizer_step(model, optimizer, train.images[idx], train.labels[idx],
                                        base.child(STEP_STREAM, k))
        except NonFiniteError as err:
            raise NonFiniteError(f"training aborted at step {k + 1}: {err}") from None
        step = k + 1
        metrics.log(step, split="train", loss=loss, accuracy=acc)
        if log and step % 100 == 0:
            log(f"step {step} train loss {loss:.4f} accuracy {acc:.4f}")
        if validation is not None and (step % config.eval_interval == 0 or step == config.steps):
            validate(step)
        if out and config.checkpoint_every and step % config.checkpoint_every == 0:
            save(_checkpoint_path(out, step), step)
    if out:
        save(os.path.join(out, "final.ckpt"), config.steps)
    return model, metrics


# ---------------------------------------------------------------------------
# SGAN
# ---------------------------------------------------------------------------

def _finite(value, phase, step=None):
    if not math.isfinite(value):
        where = f" at step {step}" if step is not None else ""
        raise NonFiniteError(f"non-finite {phase} loss{where}")
    return value


def sgan_train_step(generator, discriminator, x, y, rng, opt_d, opt_g, labeled=None, latent_dim=None):
    """One alternating SGAN update; returns ``(d_loss, d_acc, g_loss, fake)``.

    The discriminator sees the real batch (validity 1, class ``y``) and the
    detached fake batch (validity 0, class 10), each composite loss being
    binary CE plus categorical CE, averaged over the two halves. Unlabeled
    real samples (``labeled`` false) contribute only the validity term. The
    generator then trains against validity 1 through the discriminator,
    which runs in train mode with its batchnorm statistics frozen and
    receives no update.
    """
    b = len(x)
    if latent_dim is None:
        latent_dim = generator.layers["project"].params["weight"].shape[0]
    labeled = np.ones(b, dtype=bool) if labeled is None else np.asarray(labeled, dtype=bool)
    generator.train()
    discriminator.train()

    z = Tensor(rng.normal((b, latent_dim)))
    fake = generator(z, rng=rng)

    # discriminator phase
    opt_d.zero_grad()
    v_real, c_real = discriminator(Tensor(x), rng=rng, logits=True)
    loss_real = sigmoid_binary_cross_entropy(v_real, np.ones((b, 1), dtype=np.float32))
    if labeled.any():
        loss_real = loss_real + softmax_cross_entropy(c_real[labeled], one_hot_batch(y[labeled], NUM_CLASSES + 1))
    v_fake, c_fake = discriminator(fake.detach(), rng=rng, logits=True)
    loss_fake = (sigmoid_binary_cross_entropy(v_fake, np.zeros((b, 1), dtype=np.float32))
                 + softmax_cross_entropy(c_fake, one_hot_batch(np.full(b, FAKE_CLASS), NUM_CLASSES + 1)))
    d_loss = (loss_real + loss_fake) * 0.5
    _finite(float(d_loss.item()), "discriminator")
    d_loss.backward()
    opt_d.step()
    hits = int(np.sum(np.argmax(c_real.data[labeled], axis=1) == y[labeled]))
    hits += int(np.sum(np.argmax(c_fake.data, axis=1) == FAKE_CLASS))
    d_acc = hits / (int(labeled.sum()) + b)

    # generator phase
    opt_g.zero_grad()
    v_gen, _ = discriminator(fake, rng=rng, update_stats=False, logits=True)
    g_loss = sigmoid_binary_cross_entropy(v_gen, np.ones((b, 1), dtype=np.float32))
    _finite(float(g_loss.item()), "generator")
    g_loss.backward()
    opt_g.step()
    discriminator.zero_grad()
    return float(d_loss.item()), d_acc, float(g_loss.item()), fake.data


def labeled_mask(count, fraction, seed):
    """Fixed per-sample labeled flags: a seeded ``ceil(fraction * count)`` subset."""
    mask = np.zeros(count, dtype=bool)
    keep = math.ceil(fraction * count)
    mask[Rng(seed).child(LABEL_STREAM).permutation(count)[:keep]] = True
    return mask


def sample_latents(count, latent_dim, seed):
    return Rng(seed).child(SAMPLE_STREAM).normal((count, latent_dim))


def generate(generator, z):
    generator.eval()
    with no_grad():
        return generator(Tensor(z)).data


def sample_steps(steps, every):
    """Grid cadence: step 0, every ``every`` steps, and the final step."""
    marks = {0, steps}
    if every:
        marks.update(range(every, steps + 1, every))
    return sorted(marks)


def build_sgan(seed, latent_dim=100, lr=0.002):
    init = Rng(seed).child(INIT_STREAM)
    generator = build_generator(init, GeneratorSpec(latent_dim=latent_dim))
    discriminator = build_discriminator(init, DiscriminatorSpec())
    opt_g = Adam(generator.parameters(), lr=lr)
    opt_d = Adam(discriminator.parameters(), lr=lr)
    return generator, discriminator, opt_g, opt_d


def train_sgan(config, dataset, models=None, start_step=0, log=None):
    """Alternate discriminator and generator updates for ``config.steps`` steps.

    Rows are logged every step as ``step = k`` (the state *before* update
    ``k``), so the first row shows the untrained indifference point.
    Sample grids from a fixed latent batch are written at ``sample_steps``.
    ``metrics.fake_stats`` keeps ``(step, min, max, std, class_row_error)``
    for every step.
    """
    if models is None:
        models = build_sgan(config.seed, config.latent_dim, config.lr)
    generator, discriminator, opt_g, opt_d = models
    metrics = Metrics("sgan")
    metrics.fake_stats = []
    metrics.grids = []
    mask = labeled_mask(len(dataset), config.labeled_fraction, config.seed)
    z_fixed = sample_latents(config.sample_count, config.latent_dim, config.seed)
    grid_steps = set(sample_steps(config.steps, config.sample_every))
    base = Rng(config.seed)
    out = config.out_dir

    def emit_grid(step):
        images = generate(generator, z_fixed)
        if out:
            path = os.path.join(out, f"samples_step{step:07d}.pgm")
            persistence.write_image_grid(images, config.sample_columns, path)
            metrics.grids.append((step, path))
        else:
            metrics.grids.append((step, images))

    def save(path, step):
        persistence.save_checkpoint(path, {"generator": generator, "discriminator": discriminator},
                                    {"generator": opt_g, "discriminator": opt_d}, {"step": step})

    for k in range(start_step, config.steps):
        if k in grid_steps:
            emit_grid(k)
        idx = batch_for_step(len(dataset), config.batch_size, config.seed, k, drop_last=True)
        try:
            d_loss, d_acc, g_loss, fake = sgan_train_step(
                generator, discriminator, dataset.images[idx], dataset.labels[idx],
                base.child(STEP_STREAM, k), opt_d, opt_g, mask[idx], config.latent_dim)
        except NonFiniteError as err:
            raise NonFiniteError(f"SGAN training aborted at step {k}: {err}") from None
        metrics.log(k, d_loss=d_loss, d_accuracy=d_acc, g_loss=g_loss)
        metrics.fake_stats.append((k, float(fake.min()), float(fake.max()), float(fake.std()),
                                   _class_row_error(discriminator, fake)))
        if log and (k + 1) % 100 == 0:
            log(f"step {k} d_loss {d_loss:.4f} d_acc {d_acc:.4f} g_loss {g_loss:.4f}")
        if out and config.checkpoint_every and (k + 1) % config.checkpoint_every == 0:
            save(_checkpoint_path(out, k + 1), k + 1)
    if config.steps in grid_steps:
        emit_grid(config.steps)
    if out:
        save(os.path.join(out, "final.ckpt"), config.steps)
    return generator, discriminator, metrics


def _class_row_error(discriminator, fake):
    # worst |row sum - 1| of the class head on the latest fake batch
    was = discriminator.training
    discriminator.eval()
    with no_grad():
        _, probs = discriminator(Tensor(fake[:8]))
    discriminator.training = was
    return float(np.abs(probs.data.astype(np.float64).sum(axis=1) - 1).max())
