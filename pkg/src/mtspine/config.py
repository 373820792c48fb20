"""Flat ``key = value`` run configuration.

One pair per line, ``#`` starts a comment, blank lines are ignored. Every
key has a default (see ``KEYS``); unknown keys are rejected with the line
number so typos do not silently fall back to defaults.
"""
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import PhantomSpec
from .nets import ModelConfig
from .objectives import LossWeights, SoftShareWeights
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ints(text):
    return tuple(int(t) for t in text.split(","))


def _floats(text):
    return tuple(float(t) for t in text.split(","))


# key -> (parser, default text, description)
KEYS = {
    "model.block_layers": (_ints, "2,2,2,2", "dense layers per block (four values)"),
    "model.growth_rate": (int, "8", "channels added per dense layer"),
    "model.sharing_mode": (str, "hard_all", "hard_all | hard_partial | soft"),
    "model.mlp_hidden": (int, "10", "hidden width of the bone-quality combiner"),
    "train.base_lr": (float, "0.001", "peak learning rate"),
    "train.momentum": (float, "0.9", "SGD momentum"),
    "train.epochs": (int, "50", "training epochs"),
    "train.batch_size": (int, "32", "minibatch size"),
    "train.warmup_epochs": (int, "5", "linear warmup length"),
    "train.label_smoothing": (float, "0.1", "label smoothing epsilon"),
    "loss.lambda1": (float, "2", "weight of the blastic loss"),
    "loss.lambda2": (float, "2", "weight of the lytic loss"),
    "loss.lambda3": (float, "2", "weight of the combined bone-quality loss"),
    "soft.lambdas": (_floats, "1e-4,1e-4,1e-4,1e-4", "per-block feature distance weights (soft sharing)"),
    "spl.enabled": (_bool, "true", "self-paced sample selection"),
    "spl.start_percentile": (float, "60", "initial pace as a percentile of epoch-1 losses"),
    "spl.mu": (float, "1.3", "per-epoch pace growth factor"),
    "spl.include_pi": (_bool, "true", "count the PI loss in the difficulty score"),
    "data.image_size": (_ints, "64,64", "phantom height,width"),
    "data.noise_std": (float, "20", "Gaussian noise in HU"),
    "data.label_noise_rate": (float, "0", "fraction of bone-quality labels flipped"),
    "data.slices_per_vertebra": (int, "5", "slices rendered per vertebra"),
    "data.vertebrae_per_patient": (int, "4", "vertebrae grouped under one patient id"),
    "data.counts.normal": (_ints, "200,0,0", "normal slices per PI class (none,unilateral,bilateral)"),
    "data.counts.blastic": (_ints, "70,65,65", "blastic slices per PI class"),
    "data.counts.mixed": (_ints, "70,65,65", "mixed slices per PI class"),
    "data.counts.lytic": (_ints, "70,65,65", "lytic slices per PI class"),
    "data.balance_cap": (int, "0", "keep at most this many slices per bone-quality class (0: all)"),
    "data.hu_threshold": (float, "150", "bone threshold for the crop"),
    "data.crop_size": (_ints, "32,32", "network input height,width"),
    "eval.vote_threshold": (int, "1", "lesion slices needed (exclusive) to flag a vertebra"),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: KEYS[k][0](KEYS[k][1]) for k in KEYS}
        for k, v in self.values.items():
            if k not in KEYS:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = v
        self.values = merged

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **kv):
        """Copy with dotted keys given as ``model__growth_rate=4`` style kwargs."""
        vals = dict(self.values)
        vals.update({k.replace("__", "."): v for k, v in kv.items()})
        return RunConfig(vals)

    def model_config(self):
        v = self.values
        return ModelConfig(
            block_layers=v["model.block_layers"],
            growth_rate=v["model.growth_rate"],
            input_size=(1,) + tuple(v["data.crop_size"]),
            sharing_mode=v["model.sharing_mode"],
            mlp_hidden=v["model.mlp_hidden"],
        )

    def train_config(self, seed=0):
        v = self.values
        return TrainConfig(
            base_lr=v["train.base_lr"],
            momentum=v["train.momentum"],
            epochs=v["train.epochs"],
            batch_size=v["train.batch_size"],
            warmup_epochs=v["train.warmup_epochs"],
            spl_enabled=v["spl.enabled"],
            spl_start_percentile=v["spl.start_percentile"],
            spl_mu=v["spl.mu"],
            spl_include_pi=v["spl.include_pi"],
            loss_weights=LossWeights(v["loss.lambda1"], v["loss.lambda2"], v["loss.lambda3"]),
            soft_share_weights=SoftShareWeights(v["soft.lambdas"]),
            label_smoothing=v["train.label_smoothing"],
            seed=seed,
        )

    def phantom_spec(self, seed=0):
        v = self.values
        counts = tuple(v[f"data.counts.{c}"] for c in ("normal", "blastic", "mixed", "lytic"))
        return PhantomSpec(
            seed=seed,
            image_size=v["data.image_size"],
            counts=counts,
            noise_std=v["data.noise_std"],
            label_noise_rate=v["data.label_noise_rate"],
            slices_per_vertebra=v["data.slices_per_vertebra"],
            vertebrae_per_patient=v["data.vertebrae_per_patient"],
        )

    def data_dict(self):
        """Preprocessing settings stored alongside a checkpoint."""
        return {"hu_threshold": self.values["data.hu_threshold"],
                "crop_size": list(self.values["data.crop_size"])}

    def to_text(self):
        lines = []
        for k, (_, _, doc) in KEYS.items():
            val = self.values[k]
            if isinstance(val, tuple):
                val = ",".join(str(x) for x in val)
            elif isinstance(val, bool):
                val = str(val).lower()
            lines.append(f"# {doc}\n{k} = {val}")
        return "\n".join(lines) + "\n"


def parse(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = KEYS[key][0](val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return RunConfig(values)


def load(path):
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse(text, str(path))
