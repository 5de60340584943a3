"""Training loop: mini-batching, SGD with momentum and weight decay, cosine schedule, metrics."""
from dataclasses import dataclass, field
import csv
import logging
import math
import os
import time

import numpy as np

from . import checkpoint, data, model
from .config import RunConfig
from .estimators import EstimatorKind, apply_dropout, estimate, leak_pairs
from .model import Head, Nudge, Scheme, init_params
from .oracle import alignment_angles
from .phases import DivergenceError, free_phase

log = logging.getLogger("eqprop")

METRICS_SCHEMA = "# eqprop-metrics v1"


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch, cause, checkpoint_path=None):
        super().__init__(f"diverged at epoch {epoch}, batch {batch}: {cause}")
        self.epoch, self.batch, self.cause = epoch, batch, cause
        self.checkpoint_path = checkpoint_path


def cosine_lr(initial, final, epoch, horizon):
    """Cosine annealing from ``initial`` at epoch 0 to ``final`` at ``horizon`` (held after)."""
    e = min(epoch, horizon)
    return final + (initial - final) * 0.5 * (1.0 + math.cos(math.pi * e / horizon))


def layer_lrs(config, params, epoch):
    """Learning rate per tensor; tensor ``name`` uses the rate of its layer."""
    top = params.topology
    return {name: cosine_lr(config.lrs[top.layer_of(name) - 1], config.final_lr, epoch,
                            config.cosine_horizon)
            for name in params.names()}


class SGD:
    """Heavy-ball SGD on the loss gradient ``g = -estimate + decay * theta``.

    ``v <- momentum * v + g``; ``theta <- theta - lr * v``. Tensors in
    ``leaky`` use ``leak`` (the Kolen-Pollack lambda) instead of ``decay``.
    """

    def __init__(self, momentum, decay, leak=0.0, leaky=()):
        self.momentum = momentum
        self.decay = decay
        self.leak = leak
        self.leaky = set(leaky)
        self.velocity = {}

    def step(self, params, grads, lrs):
        for name, theta in params.tensors.items():
            wd = self.leak if name in self.leaky else self.decay
            g = -grads[name] + wd * theta
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            theta -= lrs[name] * v


@dataclass
class Metrics:
    epoch: int
    train_error: float
    test_error: float
    mean_residual: float
    angles: dict = field(default_factory=dict)
    wall_time: float = 0.0
    lr: float = 0.0

    def row(self):
        # wall time stays in the log so identical runs write identical files
        return [self.epoch, f"{self.train_error:.4f}", f"{self.test_error:.4f}",
                f"{self.mean_residual:.6e}", f"{self.lr:.6e}"] + [
            f"{self.angles[k]:.4f}" for k in sorted(self.angles)]


def metrics_header(angle_layers=()):
    return (["epoch", "train_error", "test_error", "mean_residual", "lr_layer1"]
            + [f"angle_{n}" for n in sorted(angle_layers)])


def append_metrics(path, metrics):
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        if new:
            fh.write(METRICS_SCHEMA + "\n")
            csv.writer(fh).writerow(metrics_header(metrics.angles))
        csv.writer(fh).writerow(metrics.row())


def read_metrics(path):
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        if first != METRICS_SCHEMA:
            raise ValueError(f"{path}: unknown metrics schema {first!r}")
        return list(csv.DictReader(fh))


def predict(params, x, T):
    run = free_phase(x, params, T)
    return np.argmax(run.y_hat, axis=1), run.residual


def evaluate(params, dataset, T, batch_size=500):
    """Test error in percent: free phase, argmax of the prediction, no dropout or augmentation."""
    if len(dataset) == 0:
        return float("nan")
    wrong = 0
    for idx in data.minibatches(len(dataset), batch_size):
        pred, _ = predict(params, dataset.images[idx], T)
        wrong += int(np.sum(pred != dataset.labels[idx]))
    return 100.0 * wrong / len(dataset)


def _rng(config, *stream):
    return np.random.default_rng([config.seed, *stream])


def rng_state(config, next_epoch):
    """Every random stream is derived from ``(seed, stream, epoch, batch)``; this pins it."""
    return {"derivation": "SeedSequence([seed, stream, epoch, batch])", "seed": config.seed,
            "next_epoch": next_epoch}


def train_epoch(params, dataset, config, optimizer, epoch, on_batch=None):
    """One pass over ``dataset``; returns ``(params, train_error %, mean residual)``.

    The RNG streams for shuffling, augmentation, signs and dropout are derived
    from ``(seed, epoch, batch)`` so any batch can be replayed independently.
    ``on_batch(b, error %, residual)`` sees each batch's free-phase result.
    """
    kind = EstimatorKind(config.estimator)
    T, K, beta = config.T, config.K_eff, config.beta_eff
    lrs = layer_lrs(config, params, epoch)
    wrong, residuals = 0, []
    for b, idx in enumerate(data.minibatches(len(dataset), config.batch_size, _rng(config, 1, epoch))):
        x = dataset.images[idx]
        if config.augment:
            x = data.augment(x, _rng(config, 2, epoch, b))
        y = dataset.one_hot(idx)
        masks = apply_dropout(params.topology, config.dropout, len(idx), _rng(config, 3, epoch, b),
                              config.dropout_layer)
        good = params.copy()
        try:
            est = estimate(kind, x, y, params, T, K, beta, rng=_rng(config, 4, epoch, b),
                           masks=masks, nudge=Nudge(config.nudge))
            with np.errstate(over="ignore", invalid="ignore"):
                optimizer.step(params, est.grads, lrs)
            if not all(np.all(np.isfinite(t)) for t in params.tensors.values()):
                raise FloatingPointError("non-finite parameters after update")
        except (DivergenceError, FloatingPointError) as exc:
            params.tensors = good.tensors
            raise TrainingDiverged(epoch, b, exc) from exc
        miss = int(np.sum(np.argmax(est.free.y_hat, axis=1) != dataset.labels[idx]))
        wrong += miss
        residuals.append(est.free.residual)
        if on_batch:
            on_batch(b, 100.0 * miss / len(idx), est.free.residual)
    return params, 100.0 * wrong / max(1, len(dataset)), float(np.mean(residuals)) if residuals else 0.0


def make_optimizer(config, params):
    kp = EstimatorKind(config.estimator) is EstimatorKind.KPVF_SYM
    leaky = [n for pair in leak_pairs(params) for n in pair] if kp else ()
    return SGD(config.momentum, config.weight_decay, config.lam_eff, leaky)


def load_splits(config, root=None):
    """Train and test sets for ``config``, normalized with training-set channel statistics."""
    root = root or config.data_root or os.environ.get("EQPROP_DATA", "")
    if not root:
        raise data.MissingDataset("no dataset root: set data.data_root or EQPROP_DATA")
    if config.dataset == "csv":
        full = data.load_dataset(root, "csv", shape=tuple(config.input_shape))
        order = _rng(config, 0, 1).permutation(len(full))
        hold = config.holdout or len(full) // 6
        test, train = full.subset(order[:hold]), full.subset(order[hold:])
    else:
        train = data.load_dataset(root, config.dataset, "train")
        test = data.load_dataset(root, config.dataset, "test")
    if config.train_subset:
        train = train.subset(_rng(config, 0, 2).permutation(len(train))[:config.train_subset])
    if config.test_subset:
        test = test.subset(_rng(config, 0, 3).permutation(len(test))[:config.test_subset])
    mean, std = data.channel_stats(train.images)
    train.images = data.normalize(train.images, mean, std)
    test.images = data.normalize(test.images, mean, std)
    return train, test


def _check_input(config, dataset):
    if tuple(dataset.images.shape[1:]) != tuple(config.input_shape):
        raise ValueError(f"dataset images have shape {dataset.images.shape[1:]}, "
                         f"model expects {tuple(config.input_shape)}")


def train(config, train_set, test_set, out_dir=None, params=None, start_epoch=0, velocity=None,
          progress=None):
    """Run ``config.epochs`` epochs; returns ``(params, [Metrics])``.

    With ``out_dir`` the loop writes ``metrics.csv``, ``last.ckpt`` after each
    epoch and ``diverged.ckpt`` (last good state) on divergence.
    """
    config.validate()
    if start_epoch < config.epochs:
        _check_input(config, train_set)
    if params is None:
        params = init_params(config.topology(), _rng(config, 0, 0), config.init_scale)
    opt = make_optimizer(config, params)
    opt.velocity = dict(velocity or {})
    history = []
    asym = params.topology.scheme is Scheme.ASYMMETRIC
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        if start_epoch == 0:
            checkpoint.save(os.path.join(out_dir, "init.ckpt"), params, 0,
                            rng_state=rng_state(config, 0), config=config.to_dict())
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        try:
            params, train_err, res = train_epoch(params, train_set, config, opt, epoch)
        except TrainingDiverged as exc:
            if out_dir:
                exc.checkpoint_path = os.path.join(out_dir, "diverged.ckpt")
                checkpoint.save(exc.checkpoint_path, params, epoch,
                                rng_state=rng_state(config, epoch), velocity=opt.velocity,
                                config=config.to_dict(), extra={"error": str(exc)})
            raise
        test_err = evaluate(params, test_set, config.T, config.eval_batch_size)
        m = Metrics(epoch + 1, train_err, test_err, res,
                    alignment_angles(params) if asym else {},
                    time.perf_counter() - t0,
                    cosine_lr(config.lrs[0], config.final_lr, epoch, config.cosine_horizon))
        history.append(m)
        log.info("epoch %d train %.2f%% test %.2f%% residual %.2e (%.1fs)", m.epoch,
                 m.train_error, m.test_error, m.mean_residual, m.wall_time)
        if progress:
            progress(m)
        if out_dir:
            append_metrics(os.path.join(out_dir, "metrics.csv"), m)
            checkpoint.save(os.path.join(out_dir, "last.ckpt"), params, epoch + 1,
                            rng_state=rng_state(config, epoch + 1), velocity=opt.velocity,
                            config=config.to_dict())
    return params, history

