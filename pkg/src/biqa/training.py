"""Training recipe: Adam, reduce-on-plateau learning rate, early stopping,
a seeded deterministic epoch loop, and correlation-metric evaluation.

Determinism contract: a fixed config seed fixes the model initialization,
the per-epoch shuffles, and the dropout masks, so two runs produce
bit-identical parameter trajectories, histories, and checkpoints.

"Improvement" everywhere means a strict decrease of the validation loss.
The last incomplete training batch is dropped (the correlation term of the
loss degrades for very small n); evaluation keeps every sample.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from biqa import data as dat
from biqa import metrics as mx
from biqa.errors import DegenerateInput, EmptySplit, MissingGradient, ParseError
from biqa.autodiff import Tape

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    initial_lr: float = 1e-4
    min_lr: float = 1e-8
    plateau_patience: int = 2
    plateau_factor: float = 0.5
    early_stop_patience: int = 10
    max_epochs: int = 100
    batch_size: int = 10
    seed: int = 0
    loss: mx.LossConfig = field(default_factory=mx.LossConfig)

    def validate(self):
        if not 0 < self.min_lr <= self.initial_lr:
            raise ValueError(f"need 0 < min_lr <= initial_lr, got {self.min_lr}/{self.initial_lr}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patiences must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau_factor must be in (0,1), got {self.plateau_factor}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (the correlation loss needs n >= 2)")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        return self


# Keys accepted by the plain-text `key=value` config format.
_INT_KEYS = {"plateau_patience", "early_stop_patience", "max_epochs", "batch_size", "seed"}
_FLOAT_KEYS = {"initial_lr", "min_lr", "plateau_factor", "lambda1", "lambda2"}


def parse_train_config(path):
    """Read a TrainConfig from `key=value` lines ('#' starts a comment)."""
    kwargs = {}
    loss_kwargs = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        try:
            if key in _INT_KEYS:
                kwargs[key] = int(value)
            elif key in ("lambda1", "lambda2"):
                loss_kwargs[key] = float(value)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(value)
            else:
                raise ParseError(f"{path}:{lineno}: unknown key {key!r}")
        except ValueError as e:
            raise ParseError(f"{path}:{lineno}: bad value for {key}: {value!r}") from e
    try:
        cfg = TrainConfig(loss=mx.LossConfig(**loss_kwargs), **kwargs)
        return cfg.validate()
    except ValueError as e:
        raise ParseError(f"{path}: {e}") from e


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_plcc: float
    val_srocc: float
    lr: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = -1

    def to_csv(self):
        lines = ["epoch,train_loss,val_loss,val_plcc,val_srocc,lr"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},"
                         f"{r.val_plcc!r},{r.val_srocc!r},{r.lr!r}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_csv())


def adam_step(store, lr, t, betas=ADAM_BETAS, eps=ADAM_EPS):
    """Bias-corrected Adam update over every trainable entry, in store order."""
    b1, b2 = betas
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, entry in store.entries():
        if not entry.trainable:
            continue
        g = entry.tensor.grad
        if g is None:
            raise MissingGradient(f"no gradient for {name!r}; run backward first")
        if entry.m is None:
            entry.m = np.zeros_like(entry.tensor.data)
            entry.v = np.zeros_like(entry.tensor.data)
        entry.m += (1.0 - b1) * (g - entry.m)
        entry.v += (1.0 - b2) * (g * g - entry.v)
        mhat = entry.m / c1
        vhat = entry.v / c2
        entry.tensor.data -= lr * mhat / (np.sqrt(vhat) + eps)


class PlateauScheduler:
    """Multiply the lr by `factor` after `patience` consecutive epochs without
    a strict improvement of the monitored loss; never below `min_lr`."""

    def __init__(self, initial_lr, factor=0.5, patience=2, min_lr=1e-8):
        self.lr = initial_lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self._best = np.inf
        self._stall = 0

    def step(self, val_loss):
        if val_loss < self._best:
            self._best = val_loss
            self._stall = 0
        else:
            self._stall += 1
            if self._stall >= self.patience:
                self.lr = max(self.min_lr, self.lr * self.factor)
                self._stall = 0
        return self.lr


class EarlyStopper:
    """Signal stop after `patience` consecutive epochs without improvement."""

    def __init__(self, patience=10):
        self.patience = patience
        self._best = np.inf
        self._stall = 0

    def step(self, val_loss):
        if val_loss < self._best:
            self._best = val_loss
            self._stall = 0
            return False
        self._stall += 1
        return self._stall >= self.patience


def _load_split(manifest, input_size, what):
    if len(manifest) == 0:
        raise EmptySplit(f"{what} split is empty")
    n = len(manifest)
    h, w = input_size
    images = np.empty((n, h, w, 3), dtype=np.float32)
    for i, s in enumerate(manifest.samples):
        images[i] = dat.load_image_for_model(manifest.resolve(s), input_size)
    return images, manifest.scores(), manifest.paths()


def _predict_all(model, images, paths, batch_size=32):
    preds = []
    for lo in range(0, len(images), batch_size):
        chunk = slice(lo, lo + batch_size)
        preds.append(model.forward(images[chunk], "eval", paths=paths[chunk]).data[:, 0])
    return np.concatenate(preds).astype(np.float64)


def train(model, train_manifest, val_manifest, cfg, dropout_rng=None):
    """Run the full recipe; the model ends at its best-validation parameters.

    Scores are normalized to [0,1] before use (a no-op for manifests already
    declared on that range). Returns (history, meta) where meta is checkpoint
    metadata for the restored best epoch.
    """
    cfg.validate()
    if model.config.num_outputs != 1:
        raise ValueError("training targets a single quality score per image")
    train_manifest = dat.normalize_scores(train_manifest)
    val_manifest = dat.normalize_scores(val_manifest)
    tr_images, tr_scores, tr_paths = _load_split(train_manifest, model.config.input_size, "train")
    va_images, va_scores, va_paths = _load_split(val_manifest, model.config.input_size, "validation")
    overlap = set(train_manifest.paths()) & set(val_manifest.paths())
    if overlap:
        raise ValueError(f"train/validation overlap: {sorted(overlap)[:3]}")
    if len(tr_images) < cfg.batch_size:
        raise ValueError(f"train split ({len(tr_images)}) smaller than one batch")

    shuffle_seed, dropout_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    if dropout_rng is None:
        dropout_rng = np.random.default_rng(dropout_seed)

    scheduler = PlateauScheduler(cfg.initial_lr, cfg.plateau_factor,
                                 cfg.plateau_patience, cfg.min_lr)
    stopper = EarlyStopper(cfg.early_stop_patience)
    history = TrainHistory()
    best_loss = np.inf
    best_values = model.params.snapshot()
    n_train = len(tr_images)
    step = 0

    for epoch in range(1, cfg.max_epochs + 1):
        lr = scheduler.lr
        order = shuffle_rng.permutation(n_train)
        batch_losses = []
        for lo in range(0, n_train - cfg.batch_size + 1, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            with Tape() as tape:
                preds = model.forward(tr_images[idx], "train", rng=dropout_rng,
                                      paths=[tr_paths[i] for i in idx])
                loss, grad = mx.combined_loss(tr_scores[idx], preds.data[:, 0], cfg.loss)
                tape.backward(preds, seed_grad=grad[:, None].astype(preds.dtype))
            step += 1
            adam_step(model.params, lr, step)
            model.params.zero_grads()
            batch_losses.append(loss)

        val_preds = _predict_all(model, va_images, va_paths)
        val_loss, _ = mx.combined_loss(va_scores, val_preds, cfg.loss)
        try:
            val_plcc = mx.plcc(va_scores, val_preds)
            val_srocc = mx.srocc(va_scores, val_preds)
        except DegenerateInput:
            val_plcc = val_srocc = float("nan")

        history.records.append(EpochRecord(
            epoch, float(np.mean(batch_losses)), val_loss, val_plcc, val_srocc, lr))
        if val_loss < best_loss:
            best_loss = val_loss
            best_values = model.params.snapshot()
            history.best_epoch = epoch

        stop = stopper.step(val_loss)
        scheduler.step(val_loss)
        if stop:
            break

    model.params.restore(best_values)
    meta = {"epoch": history.best_epoch, "best_val_loss": best_loss, "seed": cfg.seed}
    return history, meta


def evaluate(model, manifest, batch_size=32):
    """Metrics plus per-sample (path, truth, prediction) rows, eval mode.

    Scores are normalized to [0,1] first so error metrics are comparable with
    the training objective; correlations are unaffected by the rescaling.
    """
    manifest = dat.normalize_scores(manifest)
    images, scores, paths = _load_split(manifest, model.config.input_size, "evaluation")
    preds = _predict_all(model, images, paths, batch_size)
    report = mx.compute_report(scores, preds)
    rows = list(zip(paths, scores.tolist(), preds.tolist()))
    return report, rows
