"""Low-rank experts with a per-stage rank schedule, squads, and weight
injection / ejection."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from . import serialize
from .backbone import MtlModel
from .errors import DimensionError, FormatError, ValidationError
from .perturb import PerturbationKind
from .tensor import Tensor


@dataclass(frozen=True)
class RankSchedule:
    ranks: tuple

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        if any(r < 1 for r in self.ranks):
            raise ValidationError(f"all ranks must be >= 1, got {self.ranks}")

    def __len__(self):
        return len(self.ranks)

    def rank_for(self, stage: int) -> int:
        return self.ranks[stage]

    @classmethod
    def parse(cls, text) -> "RankSchedule":
        if isinstance(text, RankSchedule):
            return text
        if isinstance(text, str):
            text = [t for t in text.replace("(", "").replace(")", "").replace(" ", "").split(",") if t]
        return cls(tuple(int(t) for t in text))


@dataclass
class LoraExpert:
    kind: PerturbationKind
    alpha: float
    schedule: RankSchedule
    A: dict  # site -> Tensor (d_out, r)
    B: dict  # site -> Tensor (r, d_in)
    final_stage_only: bool = False

    @property
    def sites(self) -> list[str]:
        return list(self.A)

    def num_parameters(self) -> int:
        return int(sum(self.A[s].data.size + self.B[s].data.size for s in self.A))

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        for s in self.A:
            out[f"lora.{s}.A"] = self.A[s]
            out[f"lora.{s}.B"] = self.B[s]
        return out

    def graph_terms(self) -> dict:
        """site -> (A, B, alpha) for the in-graph low-rank path used in training."""
        return {s: (self.A[s], self.B[s], self.alpha) for s in self.A}


@dataclass
class ExpertSquad:
    expert: LoraExpert
    norm_params: dict = field(default_factory=dict)  # model param name -> Tensor
    decoder_params: dict = field(default_factory=dict)

    @property
    def kind(self) -> PerturbationKind:
        return self.expert.kind

    def overrides(self) -> dict[str, Tensor]:
        return {**self.norm_params, **self.decoder_params}

    def trainable(self) -> dict[str, Tensor]:
        out = self.expert.trainable()
        out.update({f"norm.{k}": v for k, v in self.norm_params.items()})
        out.update({f"decoder.{k}": v for k, v in self.decoder_params.items()})
        return out


def expert_sites(model: MtlModel, final_stage_only: bool = False) -> list[str]:
    last = model.config.num_stages - 1
    return [s for s in model.sites() if not final_stage_only or model.site_stage(s) == last]


def new_expert(model: MtlModel, kind, schedule, alpha: float = 1.0, init_seed: int = 0,
               final_stage_only: bool = False) -> LoraExpert:
    """A ~ N(0, 0.02^2), B = 0, so the initial update is exactly zero."""
    schedule = RankSchedule.parse(schedule)
    if len(schedule) != model.config.num_stages:
        raise ValidationError(
            f"rank schedule has {len(schedule)} entries for a {model.config.num_stages}-stage encoder"
        )
    rng = np.random.default_rng(init_seed)
    A, B = {}, {}
    for site in expert_sites(model, final_stage_only):
        d_out, d_in = model.site_shape(site)
        r = schedule.rank_for(model.site_stage(site))
        A[site] = Tensor(rng.normal(0.0, 0.02, (d_out, r)).astype(np.float32))
        B[site] = Tensor(np.zeros((r, d_in), dtype=np.float32))
    alpha = float(np.float32(alpha))  # stored as f32 on disk
    return LoraExpert(PerturbationKind.parse(kind), alpha, schedule, A, B, final_stage_only)


def new_squad(model: MtlModel, expert: LoraExpert) -> ExpertSquad:
    """Squad whose norm and decoder snapshots start from the model's current values."""
    norms = {n: Tensor(model.params[n].data.copy()) for n in model.norm_names()}
    decs = {n: Tensor(model.params[n].data.copy()) for n in model.decoder_names()}
    return ExpertSquad(expert, norms, decs)


def expected_parameter_count(model: MtlModel, schedule, final_stage_only: bool = False) -> int:
    """Closed form: sum over sites of r_stage * (d_in + d_out)."""
    schedule = RankSchedule.parse(schedule)
    total = 0
    for site in expert_sites(model, final_stage_only):
        d_out, d_in = model.site_shape(site)
        total += schedule.rank_for(model.site_stage(site)) * (d_in + d_out)
    return total


def delta(expert: LoraExpert, site: str) -> np.ndarray:
    """alpha * A @ B for one site."""
    if site not in expert.A:
        raise KeyError(f"expert has no injection site {site!r}")
    return (expert.alpha * (expert.A[site].data @ expert.B[site].data)).astype(np.float32)


def delta_map(expert: Union[LoraExpert, ExpertSquad]) -> dict[str, np.ndarray]:
    if isinstance(expert, ExpertSquad):
        expert = expert.expert
    return {s: delta(expert, s) for s in expert.sites}


# ---------------------------------------------------------------------------
# injection
# ---------------------------------------------------------------------------


class AdaptedModel:
    """A base model seen through replaced tensors. The base is never written."""

    def __init__(self, base: MtlModel, overrides: Mapping[str, Tensor], deltas: Mapping[str, np.ndarray]):
        self.base = base
        self.overrides = dict(overrides)
        self.deltas = dict(deltas)
        self.routing = None  # set by route_and_adapt

    @property
    def config(self):
        return self.base.config

    @property
    def params(self) -> dict[str, Tensor]:
        return {k: self.overrides.get(k, v) for k, v in self.base.params.items()}

    def forward(self, x, lora=None, overrides=None):
        merged = self.overrides if not overrides else {**self.overrides, **overrides}
        return self.base.forward(x, merged, lora)

    def predict(self, x) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.forward(x).items()}

    def encode(self, x):
        return self.base.encode(x, self.overrides)


def _base_of(model) -> MtlModel:
    return model.base if isinstance(model, AdaptedModel) else model


def _merged_weights(base: MtlModel, deltas: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    out = {}
    for site, d in deltas.items():
        name = f"{site}.weight"
        if name not in base.params:
            raise ValidationError(f"unknown injection site {site!r}")
        w = base.params[name].data
        if d.shape != w.shape:
            raise DimensionError(f"delta for {site} has shape {d.shape}, weight is {w.shape}")
        out[name] = Tensor(w + np.asarray(d, dtype=w.dtype))
    return out


def inject(model: MtlModel, fused_delta_map: Mapping[str, np.ndarray]) -> AdaptedModel:
    """Effective weights W + delta per site, materialized; the base stays untouched."""
    base = _base_of(model)
    return AdaptedModel(base, _merged_weights(base, fused_delta_map), fused_delta_map)


def eject(adapted) -> MtlModel:
    return _base_of(adapted)


def apply_squad(model: MtlModel, squad) -> AdaptedModel:
    """Inject the squad's deltas and overwrite norm + decoder tensors with its snapshots.

    Accepts an :class:`ExpertSquad` or anything exposing ``deltas``,
    ``norm_params`` and ``decoder_params`` (e.g. a fused squad).
    """
    base = _base_of(model)
    deltas = delta_map(squad) if isinstance(squad, ExpertSquad) else squad.deltas
    overrides = _merged_weights(base, deltas)
    for name, t in {**squad.norm_params, **squad.decoder_params}.items():
        if name not in base.params:
            raise ValidationError(f"squad snapshot {name!r} has no counterpart in the model")
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        if arr.shape != base.params[name].shape:
            raise DimensionError(f"squad snapshot {name}: {arr.shape} vs model {base.params[name].shape}")
        overrides[name] = t if isinstance(t, Tensor) else Tensor(arr)
    return AdaptedModel(base, overrides, deltas)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

FLAG_SQUAD = 1


def _encode_meta(expert: LoraExpert) -> bytes:
    ranks = expert.schedule.ranks
    return (
        struct.pack("<Bf", int(expert.kind), expert.alpha)
        + struct.pack("<I", len(ranks))
        + struct.pack(f"<{len(ranks)}I", *ranks)
        + struct.pack("<B", 1 if expert.final_stage_only else 0)
    )


def encode_expert(obj: Union[LoraExpert, ExpertSquad]) -> bytes:
    squad = isinstance(obj, ExpertSquad)
    expert = obj.expert if squad else obj
    tensors = {}
    for s in expert.sites:
        tensors[f"lora.{s}.A"] = expert.A[s].data
        tensors[f"lora.{s}.B"] = expert.B[s].data
    if squad:
        tensors.update({f"norm:{k}": v.data for k, v in obj.norm_params.items()})
        tensors.update({f"decoder:{k}": v.data for k, v in obj.decoder_params.items()})
    return serialize.encode_tensors(serialize.KIND_EXPERT, tensors, _encode_meta(expert),
                                    flags=FLAG_SQUAD if squad else 0)


def save_expert(path, obj: Union[LoraExpert, ExpertSquad]):
    Path(path).write_bytes(encode_expert(obj))


def _read_meta(r):
    kind, alpha = r.unpack("Bf", "expert kind/alpha")
    (s,) = r.unpack("I", "schedule length")
    ranks = r.unpack(f"{s}I", "schedule")
    (final,) = r.unpack("B", "stage mode")
    if kind >= len(PerturbationKind):
        raise FormatError(f"invalid perturbation index {kind}", r.pos - 4 * s - 9)
    return kind, alpha, ranks, bool(final)


def decode_expert(buf: bytes, model: Optional[MtlModel] = None) -> Union[LoraExpert, ExpertSquad]:
    offsets: dict = {}
    flags, meta, tensors = serialize.decode_tensors(buf, serialize.KIND_EXPERT, _read_meta, offsets)
    kind, alpha, ranks, final = meta
    A, B, norms, decs = {}, {}, {}, {}
    for name, arr in tensors.items():
        if name.startswith("lora."):
            site, part = name[len("lora."):].rsplit(".", 1)
            (A if part == "A" else B)[site] = Tensor(arr)
        elif name.startswith("norm:"):
            norms[name[len("norm:"):]] = Tensor(arr)
        elif name.startswith("decoder:"):
            decs[name[len("decoder:"):]] = Tensor(arr)
        else:
            raise FormatError(f"unexpected record {name!r}", offsets[name])
    if set(A) != set(B):
        raise FormatError("A/B factor sets differ", None)
    if model is not None:
        for name, arr in tensors.items():
            if name.startswith("lora."):
                site, part = name[len("lora."):].rsplit(".", 1)
                if f"{site}.weight" not in model.params:
                    raise FormatError(f"site {site!r} not present in model", offsets[name])
                d_out, d_in = model.site_shape(site)
                r = ranks[model.site_stage(site)]
                want = (d_out, r) if part == "A" else (r, d_in)
            else:
                pname = name.split(":", 1)[1]
                if pname not in model.params:
                    raise FormatError(f"snapshot {pname!r} not present in model", offsets[name])
                want = model.params[pname].shape
            if arr.shape != want:
                raise FormatError(f"{name}: shape {arr.shape} does not match model {want}", offsets[name])
    expert = LoraExpert(PerturbationKind(kind), float(alpha), RankSchedule(ranks), A, B, final)
    if flags & FLAG_SQUAD:
        return ExpertSquad(expert, norms, decs)
    return expert


def load_expert(path, model: Optional[MtlModel] = None) -> Union[LoraExpert, ExpertSquad]:
    return decode_expert(Path(path).read_bytes(), model)
