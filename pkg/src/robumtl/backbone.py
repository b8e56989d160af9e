"""Toy hierarchical multi-task model: shared 4-stage transformer encoder,
one linear head per task on an upsampled feature pyramid.

Parameters live in an ordered ``dict[str, Tensor]``. Every forward accepts
``overrides`` (name -> Tensor replacing a stored parameter) and ``lora``
(site -> (A, B, alpha), added to the site weight inside the graph), which is
all the adapter machinery needs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .tensor import Tensor

SITE_KINDS = ("qkv", "proj", "ffn1", "ffn2")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str  # multiclass_seg | binary_seg | dense_regression
    channels: int

    def __post_init__(self):
        expected = {"multiclass_seg": None, "binary_seg": 1, "dense_regression": None}
        if self.kind not in expected:
            raise ValidationError(f"unknown task kind {self.kind!r}")
        if self.kind == "binary_seg" and self.channels != 1:
            raise ValidationError("binary_seg tasks have exactly one output channel")

    @property
    def loss_name(self) -> str:
        return {"multiclass_seg": "cross_entropy", "binary_seg": "bce", "dense_regression": "l2"}[self.kind]


DEFAULT_TASKS = (
    TaskSpec("semseg", "multiclass_seg", 5),
    TaskSpec("saliency", "binary_seg", 1),
    TaskSpec("normals", "dense_regression", 2),
)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    in_channels: int = 3
    patch: int = 4
    channels: tuple = (16, 32, 64, 128)
    heads: tuple = (1, 2, 4, 8)
    mlp_ratio: int = 4
    tasks: tuple = DEFAULT_TASKS
    task_weights: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.channels) != len(self.heads):
            raise ValidationError("channels and heads must have one entry per stage")
        if len(self.task_weights) != len(self.tasks):
            raise ValidationError("one task weight per task")
        if any(w <= 0 for w in self.task_weights):
            raise ValidationError("task weights must be positive")
        if self.image_size % (self.patch * 2 ** (len(self.channels) - 1)):
            raise ValidationError("image size must be divisible by patch * 2^(stages-1)")

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    def stage_resolution(self, s: int) -> int:
        return self.image_size // self.patch // 2**s


class MtlModel:
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        cfg = config

        def lin(name, d_out, d_in, bias=True, std=0.02):
            self.params[f"{name}.weight"] = Tensor(rng.normal(0.0, std, (d_out, d_in)).astype(np.float32))
            if bias:
                self.params[f"{name}.bias"] = Tensor(np.zeros(d_out, dtype=np.float32))

        def norm(name, d):
            self.params[f"{name}.gamma"] = Tensor(np.ones(d, dtype=np.float32))
            self.params[f"{name}.beta"] = Tensor(np.zeros(d, dtype=np.float32))

        prev = cfg.in_channels * cfg.patch * cfg.patch
        for s, d in enumerate(cfg.channels):
            p = f"stage{s}"
            if s == 0:
                lin(f"{p}.embed", d, prev)
                norm(f"{p}.embed_norm", d)
            else:
                norm(f"{p}.merge_norm", 4 * prev)
                lin(f"{p}.merge", d, 4 * prev, bias=False)
            norm(f"{p}.norm1", d)
            lin(f"{p}.qkv", 3 * d, d)
            lin(f"{p}.proj", d, d)
            norm(f"{p}.norm2", d)
            lin(f"{p}.ffn1", cfg.mlp_ratio * d, d)
            lin(f"{p}.ffn2", d, cfg.mlp_ratio * d)
            norm(f"{p}.out_norm", d)
            prev = d
        pyramid = sum(cfg.channels)
        for t in cfg.tasks:
            lin(f"decoder.{t.name}", t.channels, pyramid)

    # -- bookkeeping --------------------------------------------------------

    @property
    def tasks(self) -> tuple:
        return self.config.tasks

    def task(self, name: str) -> TaskSpec:
        for t in self.config.tasks:
            if t.name == name:
                return t
        raise KeyError(f"unknown task {name!r}")

    def sites(self) -> list[str]:
        """LoRA injection sites, e.g. ``stage2.ffn1``; weight key is ``<site>.weight``."""
        return [f"stage{s}.{k}" for s in range(self.config.num_stages) for k in SITE_KINDS]

    def site_stage(self, site: str) -> int:
        return int(site.split(".")[0][len("stage"):])

    def site_shape(self, site: str) -> tuple:
        return self.params[f"{site}.weight"].shape

    def norm_names(self) -> list[str]:
        return [n for n in self.params if ".gamma" in n or ".beta" in n]

    def decoder_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("decoder.")]

    def encoder_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("decoder.")]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValidationError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise DimensionError(f"{k}: stored shape {v.shape} vs model {self.params[k].shape}")
            self.params[k] = Tensor(np.array(v, dtype=np.float32))

    def copy(self) -> "MtlModel":
        m = MtlModel.__new__(MtlModel)
        m.config = self.config
        m.params = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        return m

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # -- forward ------------------------------------------------------------

    def encode(self, x, overrides: Optional[Mapping[str, Tensor]] = None, lora=None) -> list[Tensor]:
        """Per-stage feature maps (N, C_s, h_s, w_s); the last one is the shared representation."""
        return encode(self, x, overrides, lora)

    def decode_task(self, feats: Sequence[Tensor], task: str, overrides=None) -> Tensor:
        return decode_task(self, feats, task, overrides)

    def forward(self, x, overrides=None, lora=None) -> dict[str, Tensor]:
        feats = encode(self, x, overrides, lora)
        shared = _pyramid(self, feats)
        return {t.name: _head(self, shared, t.name, overrides) for t in self.config.tasks}

    def predict(self, x, overrides=None) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.forward(x, overrides).items()}


def _param(model: MtlModel, name: str, overrides) -> Tensor:
    if overrides is not None and name in overrides:
        return overrides[name]
    return model.params[name]


def _site_weight(model, site, overrides, lora) -> Tensor:
    w = _param(model, f"{site}.weight", overrides)
    if lora is not None and site in lora:
        a, b, alpha = lora[site]
        w = w + T.matmul(a, b) * alpha
    return w


def _linear(model, name, x, overrides, lora=None):
    bias_name = f"{name}.bias"
    bias = _param(model, bias_name, overrides) if bias_name in model.params else None
    return T.linear(x, _site_weight(model, name, overrides, lora), bias)


def _norm(model, name, x, overrides):
    return T.layer_norm(x, _param(model, f"{name}.gamma", overrides), _param(model, f"{name}.beta", overrides))


def _attention(model, s, t, overrides, lora):
    cfg = model.config
    n, length, d = t.shape
    heads = cfg.heads[s]
    dh = d // heads
    p = f"stage{s}"
    qkv = _linear(model, f"{p}.qkv", t, overrides, lora)
    qkv = T.transpose(T.reshape(qkv, (n, length, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    o = T.matmul(T.softmax(scores, axis=-1), v)
    o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (n, length, d))
    return _linear(model, f"{p}.proj", o, overrides, lora)


def encode(model: MtlModel, x, overrides=None, lora=None) -> list[Tensor]:
    cfg = model.config
    x = T.as_tensor(x)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    expect = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise DimensionError(f"encode: expected input N×{expect}, got {x.shape}")
    n = x.shape[0]
    g = cfg.image_size // cfg.patch
    pch = cfg.patch
    tok = T.reshape(x, (n, cfg.in_channels, g, pch, g, pch))
    tok = T.reshape(T.transpose(tok, (0, 2, 4, 1, 3, 5)), (n, g, g, cfg.in_channels * pch * pch))
    feats = []
    for s, d in enumerate(cfg.channels):
        p = f"stage{s}"
        if s == 0:
            tok = _norm(model, f"{p}.embed_norm", _linear(model, f"{p}.embed", tok, overrides), overrides)
        else:
            h = tok.shape[1]
            c = tok.shape[3]
            tok = T.reshape(tok, (n, h // 2, 2, h // 2, 2, c))
            tok = T.reshape(T.transpose(tok, (0, 1, 3, 2, 4, 5)), (n, h // 2, h // 2, 4 * c))
            tok = _linear(model, f"{p}.merge", _norm(model, f"{p}.merge_norm", tok, overrides), overrides)
        h = tok.shape[1]
        t = T.reshape(tok, (n, h * h, d))
        t = t + _attention(model, s, _norm(model, f"{p}.norm1", t, overrides), overrides, lora)
        y = _norm(model, f"{p}.norm2", t, overrides)
        y = _linear(model, f"{p}.ffn2", T.gelu(_linear(model, f"{p}.ffn1", y, overrides, lora)), overrides, lora)
        t = t + y
        tok = T.reshape(t, (n, h, h, d))
        out = _norm(model, f"{p}.out_norm", tok, overrides)
        feats.append(T.transpose(out, (0, 3, 1, 2)))
    return feats


def _pyramid(model: MtlModel, feats: Sequence[Tensor]) -> Tensor:
    """Upsample every stage to the first stage's grid and stack channels-last."""
    r = feats[0].shape[-1]
    ups = [f if f.shape[-1] == r else T.upsample_bilinear(f, (r, r)) for f in feats]
    return T.transpose(T.concat(ups, axis=1), (0, 2, 3, 1))


def _head(model: MtlModel, shared: Tensor, task: str, overrides) -> Tensor:
    spec = model.task(task)
    y = _linear(model, f"decoder.{spec.name}", shared, overrides)
    y = T.transpose(y, (0, 3, 1, 2))
    size = model.config.image_size
    return T.upsample_bilinear(y, (size, size))


def decode_task(model: MtlModel, feats: Sequence[Tensor], task: str, overrides=None) -> Tensor:
    """Prediction for ``task`` at full input resolution, (N, channels, H, W)."""
    model.task(task)
    return _head(model, _pyramid(model, feats), task, overrides)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def task_loss(spec: TaskSpec, pred: Tensor, labels: Mapping[str, np.ndarray]) -> Tensor:
    if spec.kind == "multiclass_seg":
        return T.cross_entropy(pred, labels[spec.name])
    if spec.kind == "binary_seg":
        return T.bce_with_logits(T.reshape(pred, (pred.shape[0],) + pred.shape[2:]), labels[spec.name])
    target = labels[spec.name]
    mask = (np.abs(target).sum(axis=1, keepdims=True) > 0).astype(np.float32)
    return T.l2_loss(pred, target, mask)


def mtl_loss(model_or_tasks, predictions: Mapping[str, Tensor], labels: Mapping[str, np.ndarray],
             weights: Optional[Sequence[float]] = None) -> Tensor:
    """Weighted sum of per-task losses."""
    if isinstance(model_or_tasks, MtlModel):
        tasks = model_or_tasks.config.tasks
        weights = model_or_tasks.config.task_weights if weights is None else weights
    else:
        tasks = tuple(model_or_tasks)
        weights = weights if weights is not None else [1.0] * len(tasks)
    total = None
    for spec, lam in zip(tasks, weights):
        if spec.name not in predictions:
            raise ValidationError(f"missing prediction for task {spec.name!r}")
        if spec.name not in labels:
            raise ValidationError(f"missing labels for task {spec.name!r}")
        term = task_loss(spec, predictions[spec.name], labels) * float(lam)
        total = term if total is None else total + term
    return total


def labels_of(split, idx=None) -> dict[str, np.ndarray]:
    """Label dict for a corpus :class:`~robumtl.perturb.Split` (optionally a batch)."""
    if idx is None:
        idx = slice(None)
    return {"semseg": split.seg[idx], "saliency": split.saliency[idx], "normals": split.normals[idx]}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 2e-3
    weight_decay: float = 0.0
    seed: int = 0


def evaluate_loss(model: MtlModel, split, batch_size: int = 64, overrides=None) -> float:
    """Sample-weighted mean of mtl_loss over a split, no gradients."""
    total = 0.0
    for i in range(0, len(split), batch_size):
        idx = np.arange(i, min(i + batch_size, len(split)))
        preds = model.forward(split.images[idx], overrides)
        total += mtl_loss(model, preds, labels_of(split, idx)).item() * len(idx)
    return total / len(split)


def train_base(model: MtlModel, train_split, hp: TrainConfig = TrainConfig()) -> list[float]:
    """Jointly fit encoder and decoders on clean data. Returns per-epoch losses."""
    from .train import fit, minibatches

    if len(train_split) == 0:
        raise ValidationError("empty training set")

    def loss_fn(idx):
        return mtl_loss(model, model.forward(train_split.images[idx]), labels_of(train_split, idx))

    def batches(epoch):
        return minibatches(len(train_split), hp.batch_size, np.random.default_rng([hp.seed, epoch]))

    return fit(model.params, loss_fn, batches, hp.epochs, hp.lr, weight_decay=hp.weight_decay, label="base")
