"""End-to-end lifecycle: corpus, base model, per-kind experts, router,
shared fine-tuning, routed evaluation and ablations.

Every stage reads and writes artifacts under one output directory::

    <out>/corpus/        images, labels, manifest.json
    <out>/checkpoints/   base.rmtl, base_ft.rmtl, monolithic.rmtl, dmls.rmtl
    <out>/experts/       <mode>/<kind>.rmtl
    <out>/reports/       CSV + text summaries (deterministic)
    <out>/timing/        wall-clock measurements (not deterministic)
    <out>/ledger.jsonl   one record per completed stage
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import serialize
from .backbone import ModelConfig, MtlModel, TrainConfig, labels_of, mtl_loss, train_base
from .errors import ModeError, TrainingError, ValidationError
from .fusion import FusionConfig, activation_matrix, fusion_log_csv, route_and_adapt
from .lora import (ExpertSquad, RankSchedule, expected_parameter_count, load_expert, new_expert, new_squad,
                   save_expert)
from .metrics import (EvalReport, IoUAccumulator, SquaredErrorAccumulator, TASK_METRICS, confusion_matrix,
                      delta_m, reports_csv, summary_block, task_results)
from .perturb import (ALL_KINDS, PerturbationKind, Split, build_corpus, derive_seed, load_manifest, load_split,
                      mixed_split)
from .router import DmlsNet, RouterTrainConfig, confusion_csv, roc_csv, train_dmls
from .train import fit, minibatches

log = logging.getLogger(__name__)

PERTURBED = tuple(k for k in ALL_KINDS if k is not PerturbationKind.CLEAN)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    out: str = "run"
    seed: int = 0
    count: int = 600
    schedule: str = "16,32,64,128"
    alpha: float = 1.0
    final_stage_only: bool = False
    task_weights: str = "1,1,1"
    batch_size: int = 16
    base_epochs: int = 65
    base_lr: float = 2e-3
    base_restart: int = 5
    expert_epochs: int = 10
    expert_lr: float = 3e-3
    warmup: int = 2
    mix_ratio: float = 0.5
    router_epochs: int = 20
    router_lr: float = 3e-3
    finetune_epochs: int = 4
    finetune_lr: float = 1e-3
    mono_epochs: int = 6
    mono_lr: float = 2e-3
    k: int = 1
    mode: str = "robumtl"
    eval_batch: int = 16
    rank_schedules: str = "8,16,32,64;16,32,64,128;128,128,128,128"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 <= self.mix_ratio <= 0.5:
            raise ValidationError(f"mix_ratio must lie in [0, 0.5], got {self.mix_ratio}")
        if self.warmup < 0:
            raise ValidationError(f"warmup must be >= 0, got {self.warmup}")
        if self.count <= 0:
            raise ValidationError("count must be positive")
        if self.mode not in ("robumtl", "robumtl_plus"):
            raise ValidationError(f"mode must be robumtl or robumtl_plus, got {self.mode!r}")
        for name in ("batch_size", "eval_batch"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for name in ("base_epochs", "base_restart", "expert_epochs", "router_epochs", "finetune_epochs", "mono_epochs"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        FusionConfig(self.k, self.fusion_mode)
        RankSchedule.parse(self.schedule)
        self.weights()

    @property
    def fusion_mode(self) -> str:
        return "squad" if self.mode == "robumtl_plus" else "lora"

    def weights(self) -> tuple:
        w = tuple(float(v) for v in str(self.task_weights).split(","))
        if len(w) != 3 or any(v <= 0 for v in w):
            raise ValidationError(f"task_weights needs three positive values, got {self.task_weights!r}")
        return w

    def model_config(self) -> ModelConfig:
        return ModelConfig(task_weights=self.weights())

    def sub_seed(self, *names) -> int:
        return derive_seed(self.seed, *names)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    def config_hash(self) -> str:
        """Hash of every setting except the output location."""
        text = "".join(line for line in self.to_text().splitlines(True) if not line.startswith("out="))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_items(cls, items: Mapping[str, str], base: Optional["PipelineConfig"] = None) -> "PipelineConfig":
        base = base or cls()
        fields = {f.name: f for f in dataclasses.fields(cls)}
        changes = {}
        for key, raw in items.items():
            key = key.replace("-", "_")
            if key not in fields:
                raise ValidationError(f"unknown config key {key!r}")
            changes[key] = _coerce(fields[key].type, key, raw)
        return dataclasses.replace(base, **changes)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls.from_items(parse_config_text(Path(path).read_text()))


def _coerce(type_name, key: str, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if type_name in ("int", int):
            return int(raw)
        if type_name in ("float", float):
            return float(raw)
        if type_name in ("bool", bool):
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
    except ValueError:
        raise ValidationError(f"config key {key!r}: cannot parse {raw!r}") from None
    return raw.strip()


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# ledger and layout
# ---------------------------------------------------------------------------


class ExperimentLedger:
    """Append-only JSONL of completed stages."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, stage: str, config: PipelineConfig, artifacts: Iterable = (), metrics: Optional[dict] = None):
        record = {
            "stage": stage,
            "config_hash": config.config_hash(),
            "seed": config.seed,
            "artifacts": sorted(str(a) for a in artifacts),
            "metrics": _jsonable(metrics or {}),
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        return record

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return round(float(obj), 10)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


class Layout:
    def __init__(self, out):
        self.root = Path(out)

    @property
    def corpus(self) -> Path:
        return self.root / "corpus"

    def checkpoint(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.rmtl"

    def expert(self, mode: str, kind, tag: str = "") -> Path:
        sub = mode if not tag else f"{mode}-{tag}"
        return self.root / "experts" / sub / f"{PerturbationKind.parse(kind).label}.rmtl"

    def report(self, name: str) -> Path:
        return self.root / "reports" / name

    def timing(self, name: str) -> Path:
        return self.root / "timing" / name

    @property
    def ledger(self) -> ExperimentLedger:
        return ExperimentLedger(self.root / "ledger.jsonl")

    def write(self, path: Path, text: str) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        return path


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found at {path}; run the stage that produces it first")
    return path


# ---------------------------------------------------------------------------
# corpus access
# ---------------------------------------------------------------------------


class Corpus:
    """Cached (kind, split) slices of an on-disk corpus."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = load_manifest(self.root)
        self._cache: dict = {}

    def split(self, kind, split: str) -> Split:
        key = (PerturbationKind.parse(kind), split)
        if key not in self._cache:
            self._cache[key] = load_split(self.root, key[0], split)
        return self._cache[key]

    def union(self, kinds: Iterable, split: str) -> Split:
        return Split.concat([self.split(k, split) for k in kinds])

    def kinds(self) -> list[PerturbationKind]:
        return [PerturbationKind.parse(k) for k in self.manifest["kinds"]]


def generate_data(config: PipelineConfig) -> dict:
    lay = Layout(config.out)
    manifest = build_corpus(lay.corpus, config.count, config.sub_seed("corpus"))
    lay.ledger.append("gen-data", config, [lay.corpus / "manifest.json"], {"samples": len(manifest["samples"])})
    return manifest


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def load_model(config: PipelineConfig, path) -> MtlModel:
    model = MtlModel(config.model_config())
    model.load_state_dict(serialize.load_checkpoint(_require(Path(path), "model checkpoint")))
    return model


def params_digest(params: Mapping, names: Optional[Iterable[str]] = None) -> str:
    h = hashlib.sha256()
    for name in sorted(names if names is not None else params):
        t = params[name]
        h.update(name.encode())
        h.update(np.ascontiguousarray(getattr(t, "data", t)).tobytes())
    return h.hexdigest()


def frozen_encoder_names(model: MtlModel) -> list[str]:
    norms = set(model.norm_names())
    return [n for n in model.encoder_names() if n not in norms]


def run_train_base(config: PipelineConfig, corpus: Optional[Corpus] = None) -> MtlModel:
    lay = Layout(config.out)
    corpus = corpus or Corpus(lay.corpus)
    model = MtlModel(config.model_config(), seed=config.sub_seed("init", "base"))
    train = corpus.split(PerturbationKind.CLEAN, "train")
    # Adam state restarts every base_restart epochs (0: a single cycle)
    cycle = config.base_restart or max(config.base_epochs, 1)
    history = []
    for c, start in enumerate(range(0, config.base_epochs, cycle)):
        n = min(cycle, config.base_epochs - start)
        hp = TrainConfig(n, config.batch_size, config.base_lr, seed=config.sub_seed("shuffle", "base", c))
        history += train_base(model, train, hp)
    path = lay.checkpoint("base")
    path.parent.mkdir(parents=True, exist_ok=True)
    serialize.save_checkpoint(path, model.state_dict())
    lay.ledger.append("train-base", config, [path], {"loss": history})
    return model


def train_monolithic(config: PipelineConfig, base: MtlModel, corpus: Corpus) -> MtlModel:
    """Comparator: the whole network fine-tuned once on the pooled data of every kind."""
    lay = Layout(config.out)
    model = base.copy()
    pooled = corpus.union(ALL_KINDS, "train")
    hp = TrainConfig(config.mono_epochs, config.batch_size, config.mono_lr, seed=config.sub_seed("shuffle", "mono"))
    history = train_base(model, pooled, hp)
    path = lay.checkpoint("monolithic")
    path.parent.mkdir(parents=True, exist_ok=True)
    serialize.save_checkpoint(path, model.state_dict())
    lay.ledger.append("train-monolithic", config, [path], {"loss": history})
    return model


# ---------------------------------------------------------------------------
# experts
# ---------------------------------------------------------------------------


def expert_batches(target: Split, others: Optional[Split], mix_ratio: float, batch_size: int,
                   rng: np.random.Generator) -> tuple[Split, list[np.ndarray]]:
    """All target samples plus enough draws from ``others`` that they make up
    ``mix_ratio`` of the epoch, shuffled into minibatches."""
    n_other = 0
    if others is not None and len(others) and mix_ratio > 0:
        n_other = min(len(others), int(round(len(target) * mix_ratio / (1.0 - mix_ratio))))
    if n_other:
        pick = np.sort(rng.choice(len(others), size=n_other, replace=False))
        data = Split.concat([target, others.subset(pick)])
    else:
        data = target
    return data, minibatches(len(data), batch_size, rng)


def train_expert(model: MtlModel, kind, corpus: Corpus, config: PipelineConfig,
                 schedule: Optional[str] = None, epochs: Optional[int] = None, tag: str = "",
                 batch_log: Optional[list] = None):
    """Fit one kind's low-rank expert (and its norm/decoder snapshots in plus mode) with the backbone frozen."""
    kind = PerturbationKind.parse(kind)
    plus = config.mode == "robumtl_plus"
    expert = new_expert(model, kind, schedule or config.schedule, config.alpha,
                        init_seed=config.sub_seed("init", "expert", kind.label),
                        final_stage_only=config.final_stage_only)
    squad = new_squad(model, expert) if plus else None
    trainable = squad.trainable() if plus else expert.trainable()
    overrides = squad.overrides() if plus else None
    lora = expert.graph_terms()

    clean = corpus.split(PerturbationKind.CLEAN, "train")
    if kind is PerturbationKind.CLEAN:
        target, others = clean, None  # the clean expert never sees corrupted samples
    else:
        target = corpus.split(kind, "train")
        others = corpus.union([k for k in ALL_KINDS if k is not kind], "train")
    warmup = config.warmup
    epochs = config.expert_epochs if epochs is None else epochs
    plan = {}

    def batches(epoch):
        rng = np.random.default_rng(config.sub_seed("shuffle", "expert", kind.label, tag, epoch))
        if epoch < warmup:
            data, idx = clean, minibatches(len(clean), config.batch_size, rng)
        else:
            data, idx = expert_batches(target, others, config.mix_ratio, config.batch_size, rng)
        plan["data"] = data
        if batch_log is not None:
            batch_log.extend(data.kinds[i] for i in idx)
        return idx

    def loss_fn(idx):
        data = plan["data"]
        preds = model.forward(data.images[idx], overrides, lora)
        return mtl_loss(model, preds, labels_of(data, idx))

    trainable_ids = {id(t) for t in trainable.values()}

    def check():
        for name, p in model.params.items():
            if p.grad is not None and id(p) not in trainable_ids:
                raise TrainingError(f"frozen parameter {name!r} received a gradient")
        for name, p in trainable.items():
            if p.grad is None:
                raise TrainingError(f"trainable tensor {name!r} received no gradient")

    history = fit(trainable, loss_fn, batches, warmup + epochs, config.expert_lr, check=check,
                  label=f"expert[{kind.label}]")
    result = squad if plus else expert
    lay = Layout(config.out)
    path = lay.expert(config.fusion_mode, kind, tag)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_expert(path, result)
    lay.ledger.append(f"train-expert:{kind.label}{':' + tag if tag else ''}", config, [path],
                      {"loss": history, "parameters": expert.num_parameters()})
    return result


def load_pool(config: PipelineConfig, model: MtlModel, tag: str = "") -> dict:
    lay = Layout(config.out)
    pool = {}
    for kind in ALL_KINDS:
        path = _require(lay.expert(config.fusion_mode, kind, tag), f"{kind.label} expert")
        entry = load_expert(path, model)
        if config.fusion_mode == "squad" and not isinstance(entry, ExpertSquad):
            raise ValidationError(f"{path} holds a plain expert but squad mode was requested")
        pool[kind] = entry
    return pool


# ---------------------------------------------------------------------------
# router
# ---------------------------------------------------------------------------


def run_train_dmls(config: PipelineConfig, corpus: Corpus) -> tuple[DmlsNet, dict]:
    lay = Layout(config.out)
    tr = corpus.union(ALL_KINDS, "train")
    te = corpus.union(ALL_KINDS, "test")
    net = DmlsNet(seed=config.sub_seed("init", "dmls"))
    log.info("router parameters: %d", net.num_parameters())
    hp = RouterTrainConfig(config.router_epochs, 32, config.router_lr, seed=config.sub_seed("shuffle", "dmls"))
    metrics = train_dmls(net, tr.images, tr.kinds, te.images, te.kinds, hp)
    path = lay.checkpoint("dmls")
    path.parent.mkdir(parents=True, exist_ok=True)
    net.save(path)
    lay.write(lay.report("dmls_confusion.csv"), confusion_csv(metrics["confusion"]))
    lay.write(lay.report("dmls_roc.csv"), roc_csv(metrics["scores"], te.kinds))
    summary = {k: metrics[k] for k in ("accuracy", "precision", "recall", "f1", "parameters", "epochs_run", "history")}
    lay.write(lay.report("dmls_metrics.json"), json.dumps(_jsonable(summary), indent=1, sort_keys=True) + "\n")
    lay.ledger.append("train-dmls", config, [path], summary)
    return net, metrics


def load_router(config: PipelineConfig) -> DmlsNet:
    return DmlsNet.load(_require(Layout(config.out).checkpoint("dmls"), "router checkpoint"))


# ---------------------------------------------------------------------------
# shared fine-tuning
# ---------------------------------------------------------------------------


def kind_batches(split: Split, batch_size: int) -> list[np.ndarray]:
    """Single-kind batches in kind order, then sample order."""
    out = []
    for k in np.unique(split.kinds):
        idx = np.flatnonzero(split.kinds == k)
        out += [idx[i : i + batch_size] for i in range(0, len(idx), batch_size)]
    return out


def finetune_shared(model: MtlModel, router: DmlsNet, pool: Mapping, corpus: Corpus,
                    config: PipelineConfig) -> MtlModel:
    """Adapt decoders and layer norms to the routed experts; every other tensor stays fixed."""
    if config.mode != "robumtl":
        raise ModeError("shared fine-tuning only applies in robumtl mode; squads carry their own heads")
    model = model.copy()
    data = corpus.union(ALL_KINDS, "train")
    names = model.norm_names() + model.decoder_names()
    trainable = {n: model.params[n] for n in names}
    fcfg = FusionConfig(config.k, "lora")
    # routing depends only on the images, so it is resolved once up front
    groups = kind_batches(data, config.batch_size)
    routed = [route_and_adapt(model, router, data.images[g], fcfg, pool) for g in groups]
    weights = [r.overrides for r in routed]
    for w in weights:
        for name in trainable:
            w.pop(name, None)
    def batches(epoch):
        rng = np.random.default_rng(config.sub_seed("shuffle", "finetune", epoch))
        order = rng.permutation(len(groups))
        return list(order)

    def loss_fn(gi):
        idx = groups[gi]
        preds = model.forward(data.images[idx], weights[gi])
        return mtl_loss(model, preds, labels_of(data, idx))

    history = fit(trainable, loss_fn, batches, config.finetune_epochs, config.finetune_lr, label="finetune")
    lay = Layout(config.out)
    path = lay.checkpoint("base_ft")
    path.parent.mkdir(parents=True, exist_ok=True)
    serialize.save_checkpoint(path, model.state_dict())
    lay.ledger.append("finetune", config, [path], {"loss": history})
    return model


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


class TaskMeter:
    """Streams predictions into the three task metrics."""

    def __init__(self, model: MtlModel):
        self.seg_classes = model.task("semseg").channels
        self.seg = IoUAccumulator(self.seg_classes)
        self.sal = IoUAccumulator(2)
        self.nrm = SquaredErrorAccumulator(channel_axis=1)

    def update(self, preds: Mapping[str, np.ndarray], split: Split, idx):
        self.seg.update(preds["semseg"].argmax(axis=1), split.seg[idx])
        self.sal.update((preds["saliency"][:, 0] > 0).astype(np.int64), split.saliency[idx])
        self.nrm.update(preds["normals"], split.normals[idx])

    def values(self) -> dict[str, float]:
        return {"semseg": self.seg.value(), "saliency": self.sal.value(), "normals": self.nrm.value()}


def evaluate_model(model, split: Split, batch_size: int = 16) -> dict[str, float]:
    """Task metrics of a fixed (unrouted) model."""
    meter = TaskMeter(model.base if hasattr(model, "base") else model)
    for idx in kind_batches(split, batch_size):
        meter.update(model.predict(split.images[idx]), split, idx)
    return meter.values()


@dataclass
class RoutedRun:
    report: EvalReport
    decisions: list
    true_kinds: list

    def activation_csv(self) -> str:
        m = activation_matrix(self.decisions, self.true_kinds)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\expert"] + [k.label for k in ALL_KINDS])
        for i, row in enumerate(m):
            w.writerow([ALL_KINDS[i].label] + [f"{v:.6f}" for v in row])
        return buf.getvalue()


def run_inference(model: MtlModel, router: DmlsNet, pool: Mapping, split: Split, fcfg: FusionConfig,
                  name: str = "routed", batch_size: int = 16) -> RoutedRun:
    """Per batch: one vote, top-K, fuse, inject, predict, accumulate."""
    meter = TaskMeter(model)
    decisions, true_kinds, voted = [], [], []
    start = time.perf_counter()
    batches = kind_batches(split, batch_size)
    for b, idx in enumerate(batches):
        adapted = route_and_adapt(model, router, split.images[idx], fcfg, pool, decisions, batch_id=b)
        meter.update(adapted.predict(split.images[idx]), split, idx)
        kinds = split.kinds[idx]
        true_kinds.append(int(np.bincount(kinds).argmax()))
        voted.append(int(np.argmax(adapted.routing.scores)))
    elapsed = time.perf_counter() - start
    report = EvalReport(name, task_results(meter.values()),
                        router_confusion=confusion_matrix(true_kinds, voted, len(ALL_KINDS)),
                        timing={"seconds": elapsed, "batches": len(batches), "images": len(split),
                                "fps": len(split) / elapsed if elapsed > 0 else float("nan")})
    return RoutedRun(report, decisions, true_kinds)


def eval_sets(corpus: Corpus, config: PipelineConfig) -> dict[str, Split]:
    clean = corpus.split(PerturbationKind.CLEAN, "test")
    mixed = mixed_split(clean, config.sub_seed("mixed"))
    mixed.kinds[:] = -1  # composite; no single true kind
    return {
        "clean": clean,
        "single": corpus.union(PERTURBED, "test"),
        "mixed": mixed,
    }


def _mixed_safe(split: Split) -> Split:
    """Kind-grouping needs nonnegative labels; composites get one pseudo-kind."""
    if np.all(split.kinds >= 0):
        return split
    out = Split(split.ids, split.images, split.seg, split.saliency, split.normals, np.zeros_like(split.kinds))
    return out


def _routed_model(config: PipelineConfig) -> MtlModel:
    lay = Layout(config.out)
    if config.mode == "robumtl" and lay.checkpoint("base_ft").exists():
        return load_model(config, lay.checkpoint("base_ft"))
    return load_model(config, lay.checkpoint("base"))


def run_eval(config: PipelineConfig, corpus: Optional[Corpus] = None, set_name: str = "single",
             write: bool = True) -> list[EvalReport]:
    """Routed model plus the base and (if trained) monolithic comparators on one evaluation set.

    Both delta rows use the clean-trained base model as reference: the adverse
    row on the evaluation set, the clean row on the clean test split.
    """
    lay = Layout(config.out)
    corpus = corpus or Corpus(lay.corpus)
    sets = eval_sets(corpus, config)
    if set_name not in sets:
        raise ValidationError(f"unknown evaluation set {set_name!r}; choose from {sorted(sets)}")
    split = _mixed_safe(sets[set_name])
    clean = sets["clean"]
    base = load_model(config, lay.checkpoint("base"))
    routed_model = _routed_model(config)
    router = load_router(config)
    pool = load_pool(config, routed_model)
    fcfg = FusionConfig(config.k, config.fusion_mode)

    base_adv = evaluate_model(base, split, config.eval_batch)
    base_clean = evaluate_model(base, clean, config.eval_batch)
    tag = f"{config.mode}_k{config.k}"
    run = run_inference(routed_model, router, pool, split, fcfg, f"{tag}:{set_name}", config.eval_batch)
    run_clean = run_inference(routed_model, router, pool, clean, fcfg, f"{tag}:clean", config.eval_batch)
    routed = run.report
    routed.delta_m_adv = delta_m(routed.values(), _vals(base_adv), routed.directions())
    routed.delta_m_clean = delta_m(run_clean.report.values(), _vals(base_clean), routed.directions())
    reports = [routed]
    comparators = [("base", base)]
    if lay.checkpoint("monolithic").exists():
        comparators.append(("monolithic", load_model(config, lay.checkpoint("monolithic"))))
    for cname, cmodel in comparators:
        adv = base_adv if cname == "base" else evaluate_model(cmodel, split, config.eval_batch)
        cln = base_clean if cname == "base" else evaluate_model(cmodel, clean, config.eval_batch)
        rep = EvalReport(f"{cname}:{set_name}", task_results(adv))
        rep.delta_m_adv = delta_m(rep.values(), _vals(base_adv), rep.directions())
        rep.delta_m_clean = delta_m(_vals(cln), _vals(base_clean), rep.directions())
        reports.append(rep)
    if write:
        stem = f"eval_{tag}_{set_name}"
        lay.write(lay.report(f"{stem}.csv"), reports_csv(reports))
        lay.write(lay.report(f"{stem}.txt"), summary_block(reports))
        lay.write(lay.report(f"{stem}_activation.csv"), run.activation_csv())
        lay.write(lay.report(f"{stem}_fusion_log.csv"), fusion_log_csv(run.decisions))
        lay.write(lay.report(f"{stem}_router_confusion.csv"), confusion_csv(routed.router_confusion))
        lay.write(lay.timing(f"{stem}.json"), json.dumps(_jsonable(routed.timing), indent=1) + "\n")
        lay.ledger.append(f"eval:{stem}", config, [lay.report(f"{stem}.csv")],
                          {r.name: {"tasks": r.values(), "dm_adv": r.delta_m_adv, "dm_clean": r.delta_m_clean}
                           for r in reports})
    return reports


def _vals(values: Mapping[str, float]) -> list[float]:
    return [values[t] for t in TASK_METRICS if t in values]


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------


def ablate_k(config: PipelineConfig, corpus: Optional[Corpus] = None, ks: Sequence[int] = range(1, 7)) -> list[dict]:
    """Δm of routed inference vs the base model for every k on the single and mixed sets."""
    lay = Layout(config.out)
    corpus = corpus or Corpus(lay.corpus)
    sets = eval_sets(corpus, config)
    base = load_model(config, lay.checkpoint("base"))
    model = _routed_model(config)
    router = load_router(config)
    pool = load_pool(config, model)
    directions = [TASK_METRICS[t][1] for t in TASK_METRICS]
    rows = []
    refs = {name: evaluate_model(base, _mixed_safe(sets[name]), config.eval_batch) for name in ("single", "mixed")}
    for k in ks:
        row = {"k": int(k)}
        for name in ("single", "mixed"):
            run = run_inference(model, router, pool, _mixed_safe(sets[name]), FusionConfig(int(k), config.fusion_mode),
                                f"k{k}:{name}", config.eval_batch)
            row[f"dm_{name}"] = delta_m(run.report.values(), _vals(refs[name]), directions)
            for t, v in zip(TASK_METRICS, run.report.values()):
                row[f"{name}_{t}"] = v
        rows.append(row)
    cols = ["k", "dm_single", "dm_mixed"] + [f"{s}_{t}" for s in ("single", "mixed") for t in TASK_METRICS]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([r["k"]] + [f"{r[c]:.6f}" for c in cols[1:]])
    path = lay.write(lay.report(f"ablate_k_{config.mode}.csv"), buf.getvalue())
    lay.ledger.append("ablate-k", config, [path], {"rows": rows})
    return rows


def schedule_tag(schedule) -> str:
    return "r" + "-".join(str(r) for r in RankSchedule.parse(schedule).ranks)


def ablate_ranks(config: PipelineConfig, corpus: Optional[Corpus] = None,
                 schedules: Optional[Sequence[str]] = None) -> list[dict]:
    """Retrain the pool under each rank schedule and evaluate routed inference on the single set."""
    lay = Layout(config.out)
    corpus = corpus or Corpus(lay.corpus)
    schedules = schedules or [s for s in config.rank_schedules.split(";") if s.strip()]
    base = load_model(config, lay.checkpoint("base"))
    router = load_router(config)
    split = eval_sets(corpus, config)["single"]
    ref = evaluate_model(base, split, config.eval_batch)
    directions = [TASK_METRICS[t][1] for t in TASK_METRICS]
    rows = []
    for sched in schedules:
        tag = schedule_tag(sched)
        for kind in ALL_KINDS:
            train_expert(base, kind, corpus, config, schedule=sched, tag=tag)
        pool = load_pool(config, base, tag)
        run = run_inference(base, router, pool, split, FusionConfig(config.k, config.fusion_mode),
                            f"{tag}:single", config.eval_batch)
        rows.append({
            "schedule": RankSchedule.parse(sched).ranks,
            "parameters": expected_parameter_count(base, sched, config.final_stage_only),
            "dm_single": delta_m(run.report.values(), _vals(ref), directions),
            **{t: v for t, v in zip(TASK_METRICS, run.report.values())},
        })
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schedule", "parameters", "dm_single", *TASK_METRICS])
    for r in rows:
        w.writerow(["/".join(map(str, r["schedule"])), r["parameters"], f"{r['dm_single']:.6f}",
                    *(f"{r[t]:.6f}" for t in TASK_METRICS)])
    path = lay.write(lay.report(f"ablate_ranks_{config.mode}.csv"), buf.getvalue())
    lay.ledger.append("ablate-ranks", config, [path], {"rows": rows})
    return rows


def collect_report(config: PipelineConfig) -> str:
    """Concatenate every text summary and CSV under reports/ into one block."""
    lay = Layout(config.out)
    rdir = lay.root / "reports"
    if not rdir.exists():
        raise FileNotFoundError(f"no reports directory at {rdir}")
    parts = []
    texts = [p for p in sorted(rdir.glob("*.txt")) if p.name != "summary.txt"]
    for path in texts + sorted(p for p in rdir.glob("ablate_*.csv")):
        parts.append(f"== {path.name}\n{path.read_text()}")
    dm = rdir / "dmls_metrics.json"
    if dm.exists():
        parts.append(f"== {dm.name}\n{dm.read_text()}")
    text = "\n".join(parts)
    lay.write(lay.report("summary.txt"), text)
    return text


def run_all(config: PipelineConfig, stages: Optional[Callable[[str], None]] = None) -> dict:
    """Every stage in order; returns the headline reports."""
    note = stages or (lambda s: None)
    note("gen-data")
    generate_data(config)
    corpus = Corpus(Layout(config.out).corpus)
    note("train-base")
    base = run_train_base(config, corpus)
    for kind in ALL_KINDS:
        note(f"train-expert {kind.label}")
        train_expert(base, kind, corpus, config)
    note("train-dmls")
    router, _ = run_train_dmls(config, corpus)
    note("train-monolithic")
    train_monolithic(config, base, corpus)
    if config.mode == "robumtl" and config.finetune_epochs > 0:
        note("finetune")
        finetune_shared(base, router, load_pool(config, base), corpus, config)
    note("eval")
    single = run_eval(config, corpus, "single")
    mixed = run_eval(config.replace(k=6), corpus, "mixed")
    note("ablate-k")
    ks = ablate_k(config, corpus)
    return {"single": single, "mixed": mixed, "ablate_k": ks}
