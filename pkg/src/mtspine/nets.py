"""Dense-block backbone, feature-sharing regimes, task heads and logit combiner.

Network layout (per backbone)::

    stem conv3x3/2 -> [dense block -> transition] x3 -> dense block -> BN -> ReLU

A dense layer is BN -> ReLU -> conv3x3 producing ``growth_rate`` channels that
are concatenated onto its input. A transition is BN -> ReLU -> conv1x1
halving the channels -> 2x2 average pool. Each task head is global average
pooling followed by a linear layer. Bone quality logits come only from the
combiner MLP applied to ``[blastic_logits, lytic_logits]``.
"""
import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor

BQ_CLASSES = ("normal", "blastic", "mixed", "lytic")
PI_CLASSES = ("none", "unilateral", "bilateral")
TASKS = ("blastic", "lytic", "pi")


class SharingMode(str, enum.Enum):
    HARD_ALL = "hard_all"          # all four blocks shared by every task
    HARD_PARTIAL = "hard_partial"  # first three blocks shared, 4th per task
    SOFT = "soft"                  # separate blastic/lytic backbones, PI on blastic


@dataclass(frozen=True)
class ModelConfig:
    block_layers: tuple = (2, 2, 2, 2)
    growth_rate: int = 8
    input_size: tuple = (1, 32, 32)
    sharing_mode: SharingMode = SharingMode.HARD_ALL
    mlp_hidden: int = 10
    num_pi_classes: int = 3
    num_bq_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "block_layers", tuple(int(b) for b in self.block_layers))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        object.__setattr__(self, "sharing_mode", SharingMode(self.sharing_mode))
        if len(self.block_layers) != 4 or min(self.block_layers) < 1:
            raise ValueError("block_layers must be four positive ints")
        if self.growth_rate < 1 or self.mlp_hidden < 1:
            raise ValueError("growth_rate and mlp_hidden must be positive")
        if len(self.input_size) != 3:
            raise ValueError("input_size is (channels, height, width)")
        if self.num_pi_classes != 3 or self.num_bq_classes != 4:
            raise ValueError("the task layout fixes 3 PI classes and 4 bone-quality classes")
        # stem conv halves (ceil), then three transitions halve (floor)
        h, w = ((d + 1) // 2 for d in self.input_size[1:])
        for _ in range(3):
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ValueError(
                f"input {self.input_size[1]}x{self.input_size[2]} is too small for "
                "4 downsamplings"
            )

    def to_dict(self):
        d = asdict(self)
        d["block_layers"] = list(self.block_layers)
        d["input_size"] = list(self.input_size)
        d["sharing_mode"] = self.sharing_mode.value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


FULL_SCALE_CONFIG = ModelConfig(block_layers=(6, 12, 24, 16), growth_rate=32, input_size=(1, 224, 224))


@dataclass
class ForwardOutput:
    blastic_logits: Tensor
    lytic_logits: Tensor
    pi_logits: Tensor
    bq_logits: Tensor
    # "shared" under hard modes, one entry per backbone under soft mode
    block_features: dict = field(default_factory=dict)


class Network:
    """Parameters (name -> Tensor) plus batchnorm buffers (name -> ndarray).

    Parameter names are stable and unique; they are the checkpoint keys.
    """

    def __init__(self, config):
        self.config = config
        self.params = {}
        self.buffers = {}

    def named_tensors(self):
        """Parameters then buffers, in creation order."""
        for name, p in self.params.items():
            yield name, p.data
        for name, b in self.buffers.items():
            yield name, b

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def __call__(self, batch, mode="eval"):
        return forward(self, batch, mode)


# construction

def block_channels(config):
    """Channel counts at the end of each dense block (before its transition)."""
    ch = 2 * config.growth_rate
    out = []
    for i, layers in enumerate(config.block_layers):
        ch = ch + layers * config.growth_rate
        out.append(ch)
        if i < 3:
            ch = ch // 2
    return out


class _Builder:
    def __init__(self, net, rng):
        self.net = net
        self.rng = rng

    def conv(self, name, k_out, k_in, size):
        fan_in = k_in * size * size
        w = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(k_out, k_in, size, size))
        self.net.params[name] = Tensor(w, requires_grad=True, name=name)

    def bn(self, name, channels):
        self.net.params[f"{name}.gamma"] = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.net.params[f"{name}.beta"] = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.net.buffers[f"{name}.running_mean"] = np.zeros(channels)
        self.net.buffers[f"{name}.running_var"] = np.ones(channels)

    def linear(self, name, n_out, n_in):
        w = self.rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
        self.net.params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.net.params[f"{name}.bias"] = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.bias")

    def stem(self, prefix):
        c_in = self.net.config.input_size[0]
        self.conv(f"{prefix}.stem.conv", 2 * self.net.config.growth_rate, c_in, 3)

    def block(self, prefix, index, ch):
        """Dense block ``index`` (1-based) plus the trailing transition or final norm."""
        cfg = self.net.config
        for j in range(cfg.block_layers[index - 1]):
            name = f"{prefix}.block{index}.layer{j}"
            self.bn(f"{name}.bn", ch)
            self.conv(f"{name}.conv", cfg.growth_rate, ch, 3)
            ch += cfg.growth_rate
        if index < 4:
            self.bn(f"{prefix}.trans{index}.bn", ch)
            self.conv(f"{prefix}.trans{index}.conv", ch // 2, ch, 1)
            ch //= 2
        else:
            self.bn(f"{prefix}.final.bn", ch)
        return ch


def _trunk_layout(config):
    """Which backbone prefix runs blocks 1..4 for each task."""
    mode = config.sharing_mode
    if mode is SharingMode.HARD_ALL:
        return {t: ["trunk"] * 4 for t in TASKS}
    if mode is SharingMode.HARD_PARTIAL:
        return {t: ["trunk"] * 3 + [t] for t in TASKS}
    return {"blastic": ["blastic"] * 4, "lytic": ["lytic"] * 4, "pi": ["blastic"] * 4}


def build(config, seed=0):
    """Create a network with Kaiming fan-in initialisation from ``seed``."""
    net = Network(config)
    b = _Builder(net, np.random.default_rng(seed))
    ch0 = 2 * config.growth_rate
    mode = config.sharing_mode
    if mode is SharingMode.SOFT:
        for prefix in ("blastic", "lytic"):
            b.stem(prefix)
            ch = ch0
            for i in range(1, 5):
                ch = b.block(prefix, i, ch)
    else:
        b.stem("trunk")
        ch = ch0
        for i in range(1, 4):
            ch = b.block("trunk", i, ch)
        if mode is SharingMode.HARD_ALL:
            ch = b.block("trunk", 4, ch)
        else:
            ch3 = ch
            for t in TASKS:
                ch = b.block(t, 4, ch3)
    final_ch = ch
    b.linear("head.blastic", 2, final_ch)
    b.linear("head.lytic", 2, final_ch)
    b.linear("head.pi", config.num_pi_classes, final_ch)
    b.linear("combiner.fc1", config.mlp_hidden, 4)
    b.linear("combiner.fc2", config.num_bq_classes, config.mlp_hidden)
    return net


# forward

def _bn(net, name, x, training):
    p = net.params
    return ops.batchnorm2d(
        x, p[f"{name}.gamma"], p[f"{name}.beta"],
        net.buffers[f"{name}.running_mean"], net.buffers[f"{name}.running_var"],
        training,
    )


def _run_block(net, prefix, index, x, training):
    """Returns (dense block output feature map, input to the next stage)."""
    cfg = net.config
    for j in range(cfg.block_layers[index - 1]):
        name = f"{prefix}.block{index}.layer{j}"
        h = ops.relu(_bn(net, f"{name}.bn", x, training))
        h = ops.conv2d(h, net.params[f"{name}.conv"], stride=1, pad=1)
        x = ops.concat_channels([x, h])
    feat = x
    if index < 4:
        h = ops.relu(_bn(net, f"{prefix}.trans{index}.bn", x, training))
        h = ops.conv2d(h, net.params[f"{prefix}.trans{index}.conv"], stride=1, pad=0)
        nxt = ops.avg_pool2x2(h)
    else:
        nxt = ops.relu(_bn(net, f"{prefix}.final.bn", x, training))
    return feat, nxt


def _head(net, name, x):
    p = net.params
    return ops.linear(ops.global_avg_pool(x), p[f"{name}.weight"], p[f"{name}.bias"])


def combine_logits(blastic_logits, lytic_logits, params):
    """Combiner MLP: concat (blastic, lytic) -> linear -> tanh -> linear.

    ``params`` maps ``fc1.weight``, ``fc1.bias``, ``fc2.weight``, ``fc2.bias``
    (a network's ``combiner.*`` entries are also accepted). Output classes are
    ordered (normal, blastic, mixed, lytic).
    """
    if blastic_logits.shape[0] != lytic_logits.shape[0]:
        raise ValueError("combine_logits: batch sizes differ")

    def get(key):
        return params[key] if key in params else params[f"combiner.{key}"]

    z = ops.concat([blastic_logits, lytic_logits], axis=1)
    h = ops.tanh(ops.linear(z, get("fc1.weight"), get("fc1.bias")))
    return ops.linear(h, get("fc2.weight"), get("fc2.bias"))


def forward(net, batch, mode="eval"):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    cfg = net.config
    if x.ndim != 4 or tuple(x.shape[1:]) != cfg.input_size:
        raise ValueError(f"batch shape {x.shape} does not match input size {cfg.input_size}")

    layout = _trunk_layout(cfg)
    # stages are cached by the backbone path that produced them, so shared
    # blocks run once and every task sees the same tensors
    stages = {}
    features = {}
    finals = {}
    for task in TASKS:
        path = layout[task]
        key = (path[0],)
        if key not in stages:
            stages[key] = ops.conv2d(x, net.params[f"{path[0]}.stem.conv"], stride=2, pad=1)
        prev = stages[key]
        for i in range(1, 5):
            key = ("stem",) + tuple(path[:i])
            if key not in stages:
                feat, stages[key] = _run_block(net, path[i - 1], i, prev, training)
                features.setdefault(path[i - 1], []).append(feat)
            prev = stages[key]
        finals[task] = prev

    blastic = _head(net, "head.blastic", finals["blastic"])
    lytic = _head(net, "head.lytic", finals["lytic"])
    pi = _head(net, "head.pi", finals["pi"])
    bq = combine_logits(blastic, lytic, net.params)

    if "trunk" in features:
        features["shared"] = features.pop("trunk")
    return ForwardOutput(blastic, lytic, pi, bq, features)
