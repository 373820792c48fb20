"""SGD with momentum, warmup + cosine learning rate, and the self-paced epoch loop."""
import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import nets
from .autodiff import ops
from .autodiff.tensor import Tensor
from .datagen import decompose_label
from .objectives import (
    LossWeights,
    SoftShareWeights,
    SplError,
    SplState,
    overall_loss,
    per_sample_objective,
    smooth_targets,
    soft_share_penalty,
    spl_advance,
    task_losses,
)


# unit weights diverge at lr 1e-3: block-1 maps alone hold thousands of values per sample
DEFAULT_SOFT_WEIGHTS = SoftShareWeights((1e-4,) * 4)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.001
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 32
    warmup_epochs: int = 5
    spl_enabled: bool = True
    spl_start_percentile: float = 60.0
    spl_mu: float = 1.3
    spl_include_pi: bool = True
    loss_weights: LossWeights = LossWeights()
    soft_share_weights: SoftShareWeights = DEFAULT_SOFT_WEIGHTS
    label_smoothing: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        if isinstance(self.soft_share_weights, dict):
            object.__setattr__(self, "soft_share_weights", SoftShareWeights(**self.soft_share_weights))
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.warmup_epochs < 0 or (self.epochs > 0 and self.warmup_epochs >= self.epochs):
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.base_lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need base_lr > 0 and momentum in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["soft_share_weights"]["lambdas"] = list(self.soft_share_weights.lambdas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["soft_share_weights"] = SoftShareWeights(**d["soft_share_weights"])
        d["loss_weights"] = LossWeights(**d["loss_weights"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_selected_loss: float
    selected_fraction: float
    pace_lambda: float
    loss_blastic: float
    loss_lytic: float
    loss_bq: float
    loss_pi: float
    soft_penalty: float
    train_accuracy: float
    val_accuracy: float = float("nan")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, record):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def losses(self):
        return [r.mean_selected_loss for r in self.records]

    def to_csv(self):
        buf = io.StringIO()
        names = [f.name for f in fields(EpochRecord)]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(names)
        for r in self.records:
            writer.writerow([repr(getattr(r, n)) if isinstance(getattr(r, n), float) else getattr(r, n)
                             for n in names])
        return buf.getvalue()

    def to_dicts(self):
        return [asdict(r) for r in self.records]

    @classmethod
    def from_dicts(cls, rows):
        return cls([EpochRecord(**r) for r in rows])


def lr_at(epoch, config):
    """Linear warmup over ``warmup_epochs`` then half-cosine decay to zero."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    w = config.warmup_epochs
    if epoch < w:
        return config.base_lr * (epoch + 1) / w
    phase = (epoch - w) / (config.epochs - w)
    return 0.5 * config.base_lr * (1.0 + math.cos(math.pi * phase))


def sgd_step(params, lr, momentum, velocity):
    """Heavy-ball SGD: ``v = momentum * v + g``; ``w -= lr * v``.

    ``params`` maps names to parameter tensors, ``velocity`` names to arrays
    (missing entries start at zero). Every gradient is checked before any
    parameter moves.
    """
    for name, p in params.items():
        if p.grad is None or not np.isfinite(p.grad).all():
            raise FloatingPointError(f"non-finite gradient for {name}; step aborted")
    for name, p in params.items():
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + p.grad
        velocity[name] = v
        p.data = p.data - lr * v
    return params


@dataclass
class TrainState:
    """Everything needed to resume between epochs."""

    epoch: int = 0
    velocity: dict = field(default_factory=dict)
    spl: SplState = None
    log: TrainLog = field(default_factory=TrainLog)


def build_targets(bq_labels, pi_labels, epsilon):
    bq_labels = np.asarray(bq_labels, dtype=np.int64)
    dec = [decompose_label(c) for c in bq_labels]
    blastic = np.array([d.blastic for d in dec], dtype=np.int64)
    lytic = np.array([d.lytic for d in dec], dtype=np.int64)
    return {
        "blastic": smooth_targets(blastic, 2, epsilon),
        "lytic": smooth_targets(lytic, 2, epsilon),
        "bq": smooth_targets(bq_labels, 4, epsilon),
        "pi": smooth_targets(pi_labels, 3, epsilon),
    }


def _slice_targets(targets, idx):
    return {k: v[idx] for k, v in targets.items()}


def _soft_penalty(net, out, config):
    if net.config.sharing_mode is not nets.SharingMode.SOFT:
        return None
    n = out.bq_logits.shape[0]
    pen = soft_share_penalty(out.block_features["blastic"], out.block_features["lytic"],
                             config.soft_share_weights)
    # per-sample scale so the penalty does not grow with the batch size
    return ops.mul(pen, 1.0 / n)


def predict(net, inputs, batch_size=128):
    """Eval-mode forward in chunks; returns numpy logits per head."""
    chunks = {"blastic": [], "lytic": [], "pi": [], "bq": []}
    for start in range(0, len(inputs), batch_size):
        out = nets.forward(net, inputs[start:start + batch_size], "eval")
        chunks["blastic"].append(out.blastic_logits.data)
        chunks["lytic"].append(out.lytic_logits.data)
        chunks["pi"].append(out.pi_logits.data)
        chunks["bq"].append(out.bq_logits.data)
    if not len(inputs):
        return {"blastic": np.zeros((0, 2)), "lytic": np.zeros((0, 2)),
                "pi": np.zeros((0, 3)), "bq": np.zeros((0, 4))}
    return {k: np.concatenate(v) for k, v in chunks.items()}


def per_sample_losses(net, inputs, targets, config, batch_size=128):
    """Composite per-sample loss under eval mode (frozen batchnorm statistics)."""
    logits = predict(net, inputs, batch_size)
    losses = {k: ops.softmax_cross_entropy(Tensor(logits[k]), targets[k]).data for k in logits}
    score = per_sample_objective(losses, config.loss_weights, config.spl_include_pi)
    return score, logits


def train(inputs, bq_labels, pi_labels, config, model_config=None, net=None, state=None,
          stop_after=None, val=None, on_epoch_end=None):
    """Alternate SPL selection and minibatch SGD for ``config.epochs`` epochs.

    ``inputs`` is the prepared ``[N, 1, h, w]`` batch. Passing ``net`` and
    ``state`` resumes a run; ``stop_after`` ends early after that many total
    epochs (for checkpointing). ``val`` is an optional ``(inputs, bq_labels)``
    pair scored after every epoch. ``on_epoch_end(net, state)`` is called
    after each record is appended.

    Returns ``(net, log, state)``.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    n = len(inputs)
    if n == 0:
        raise ValueError("training set is empty")
    if net is None:
        model_config = model_config or nets.ModelConfig(input_size=(1,) + inputs.shape[2:])
        net = nets.build(model_config, config.seed)
    if state is None:
        state = TrainState(spl=SplState(config.spl_start_percentile, config.spl_mu))
    targets = build_targets(bq_labels, pi_labels, config.label_smoothing)
    bq_labels = np.asarray(bq_labels)
    end = config.epochs if stop_after is None else min(stop_after, config.epochs)

    for epoch in range(state.epoch, end):
        lr = lr_at(epoch, config)
        if config.spl_enabled:
            scores, _ = per_sample_losses(net, inputs, targets, config)
            state.spl = spl_advance(state.spl, scores)
            v = state.spl.v
            if not v.any():
                raise SplError(
                    f"self-paced selection excluded every sample at epoch {epoch + 1}; "
                    "raise spl_start_percentile"
                )
        else:
            v = np.ones(n, dtype=np.int8)
        selected = np.flatnonzero(v)
        rng = np.random.default_rng([config.seed, epoch])
        order = selected[rng.permutation(len(selected))]
        batches = [order[i:i + config.batch_size] for i in range(0, len(order), config.batch_size)]
        # batchnorm needs two samples; fold a trailing singleton into its neighbour
        if len(batches) > 1 and len(batches[-1]) == 1:
            tail = batches.pop()
            batches[-1] = np.concatenate([batches[-1], tail])

        sums = dict.fromkeys(("total", "blastic", "lytic", "bq", "pi", "penalty"), 0.0)
        correct = 0
        for idx in batches:
            net.zero_grad()
            out = nets.forward(net, inputs[idx], "train")
            losses = task_losses(out, _slice_targets(targets, idx))
            loss = overall_loss(losses, config.loss_weights)
            pen = _soft_penalty(net, out, config)
            if pen is not None:
                loss = ops.add(loss, pen)
                sums["penalty"] += pen.item() * len(idx)
            loss.backward()
            sgd_step(net.params, lr, config.momentum, state.velocity)
            m = len(idx)
            sums["total"] += loss.item() * m
            for k in ("blastic", "lytic", "bq", "pi"):
                sums[k] += float(losses[k].data.sum())
            correct += int((out.bq_logits.data.argmax(axis=1) == bq_labels[idx]).sum())

        m = max(len(selected), 1)
        val_acc = float("nan")
        if val is not None:
            logits = predict(net, val[0])
            val_acc = float(np.mean(logits["bq"].argmax(axis=1) == np.asarray(val[1])))
        state.log.append(EpochRecord(
            epoch=epoch + 1,
            lr=lr,
            mean_selected_loss=sums["total"] / m,
            selected_fraction=len(selected) / n,
            pace_lambda=state.spl.pace_lambda if config.spl_enabled else float("nan"),
            loss_blastic=sums["blastic"] / m,
            loss_lytic=sums["lytic"] / m,
            loss_bq=sums["bq"] / m,
            loss_pi=sums["pi"] / m,
            soft_penalty=sums["penalty"] / m,
            train_accuracy=correct / m,
            val_accuracy=val_acc,
        ))
        state.epoch = epoch + 1
        if on_epoch_end is not None:
            on_epoch_end(net, state)
    return net, state.log, state
