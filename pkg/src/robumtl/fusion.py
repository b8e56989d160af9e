"""Top-K expert selection and score-weighted merging in weight space."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DimensionError, ValidationError
from .lora import AdaptedModel, ExpertSquad, LoraExpert, apply_squad, delta_map, inject
from .perturb import NUM_KINDS, PerturbationKind
from .tensor import Tensor

MODES = ("lora", "squad")
_MODE_ALIASES = {"lora": "lora", "lora_only": "lora", "robumtl": "lora",
                 "squad": "squad", "robumtl_plus": "squad", "robumtl+": "squad"}

# Weights are snapped to this grid so that rescaling the scores cannot move
# them by a rounding ulp.
WEIGHT_GRID = 2.0**-32


@dataclass(frozen=True)
class FusionConfig:
    k: int = 1
    mode: str = "lora"
    n: int = NUM_KINDS

    def __post_init__(self):
        mode = _MODE_ALIASES.get(str(self.mode).lower())
        if mode is None:
            raise ValidationError(f"unknown fusion mode {self.mode!r}; expected one of {MODES}")
        object.__setattr__(self, "mode", mode)
        if not isinstance(self.k, (int, np.integer)) or not 1 <= self.k <= self.n:
            raise ValidationError(f"k must be an integer in [1, {self.n}], got {self.k!r}")


@dataclass(frozen=True)
class SelectedExperts:
    indices: tuple
    scores: tuple
    weights: tuple

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(zip(self.indices, self.scores, self.weights))


def top_k(s, k: int) -> SelectedExperts:
    """Keep the k highest scores (ties go to the lower index) and normalize
    their weights over the selection. Weights sum to exactly 1."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValidationError(f"score vector must be 1-D and nonempty, got shape {s.shape}")
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise ValidationError("scores must be finite and nonnegative")
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= s.size:
        raise ValidationError(f"k must be an integer in [1, {s.size}], got {k!r}")
    order = np.lexsort((np.arange(s.size), -s))[:k]
    sel = s[order]
    total = sel.sum()
    w = sel / total if total > 0 else np.full(k, 1.0 / k)
    w = np.round(w / WEIGHT_GRID) * WEIGHT_GRID
    w[int(np.argmax(w))] += 1.0 - w.sum()
    return SelectedExperts(tuple(int(i) for i in order), tuple(float(v) for v in sel), tuple(float(v) for v in w))


def _lookup(pool: Mapping, index: int):
    for key in (index, PerturbationKind(index), PerturbationKind(index).label):
        if key in pool:
            return pool[key]
    raise KeyError(f"expert pool has no entry for kind {PerturbationKind(index).label!r}")


def _deltas_of(entry) -> dict[str, np.ndarray]:
    if isinstance(entry, (LoraExpert, ExpertSquad)):
        return delta_map(entry)
    if hasattr(entry, "deltas"):
        return dict(entry.deltas)
    return {k: np.asarray(v) for k, v in entry.items()}


def _weighted_sum(maps: Sequence[Mapping[str, np.ndarray]], weights: Sequence[float], what: str) -> dict:
    keys = list(maps[0])
    for m in maps[1:]:
        if set(m) != set(keys):
            diff = sorted(set(m) ^ set(keys))
            raise ValidationError(f"{what} key sets differ across selected experts: {diff}")
    out = {}
    for key in keys:
        arrs = [np.asarray(m[key].data if isinstance(m[key], Tensor) else m[key]) for m in maps]
        shape = arrs[0].shape
        if any(a.shape != shape for a in arrs):
            raise ValidationError(f"{what} {key!r} has incompatible shapes {[a.shape for a in arrs]}")
        acc = np.zeros(shape, dtype=np.float64)
        for w, a in zip(weights, arrs):
            acc += w * a.astype(np.float64)
        out[key] = acc.astype(np.float32)
    return out


def fuse(base, pool: Mapping, selected: SelectedExperts) -> dict[str, np.ndarray]:
    """Per-site weighted sum of the selected experts' deltas.

    ``base`` (a model or None) is only used to check that every site exists
    with a matching weight shape.
    """
    maps = [_deltas_of(_lookup(pool, i)) for i in selected.indices]
    fused = _weighted_sum(maps, selected.weights, "site")
    if base is not None:
        params = base.params
        for site, d in fused.items():
            w = params.get(f"{site}.weight")
            if w is None:
                raise ValidationError(f"fused site {site!r} is not present in the model")
            if w.shape != d.shape:
                raise DimensionError(f"fused delta for {site} is {d.shape}, weight is {w.shape}")
    return fused


@dataclass
class FusedSquad:
    deltas: dict
    norm_params: dict
    decoder_params: dict
    selected: Optional[SelectedExperts] = None


def fuse_squads(base, pool: Mapping, selected: SelectedExperts) -> FusedSquad:
    squads = [_lookup(pool, i) for i in selected.indices]
    for i, sq in zip(selected.indices, squads):
        if not isinstance(sq, ExpertSquad):
            raise ValidationError(f"pool entry for {PerturbationKind(i).label!r} is not a squad")
    deltas = fuse(base, pool, selected)
    norms = _weighted_sum([sq.norm_params for sq in squads], selected.weights, "norm snapshot")
    decs = _weighted_sum([sq.decoder_params for sq in squads], selected.weights, "decoder snapshot")
    return FusedSquad(deltas, {k: Tensor(v) for k, v in norms.items()},
                      {k: Tensor(v) for k, v in decs.items()}, selected)


# ---------------------------------------------------------------------------
# routing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FusionDecision:
    batch_id: str
    scores: tuple
    selected: SelectedExperts


def route_and_adapt(model, router, batch, config: FusionConfig, pool: Mapping,
                    decisions: Optional[list] = None, batch_id=None) -> AdaptedModel:
    """One router call for the whole batch, then top-K fusion and injection."""
    scores = router.batch_vote(batch)
    selected = top_k(scores, config.k)
    if config.mode == "squad":
        adapted = apply_squad(model, fuse_squads(model, pool, selected))
    else:
        adapted = inject(model, fuse(model, pool, selected))
    decision = FusionDecision("" if batch_id is None else str(batch_id),
                              tuple(float(v) for v in scores), selected)
    adapted.routing = decision
    if decisions is not None:
        decisions.append(decision)
    return adapted


FUSION_LOG_COLUMNS = ("batch", *(f"s_{k.label}" for k in PerturbationKind), "selected", "weights")


def fusion_log_csv(decisions: Sequence[FusionDecision]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FUSION_LOG_COLUMNS)
    for d in decisions:
        w.writerow([
            d.batch_id,
            *(f"{v:.6f}" for v in d.scores),
            ";".join(PerturbationKind(i).label for i in d.selected.indices),
            ";".join(f"{v:.6f}" for v in d.selected.weights),
        ])
    return buf.getvalue()


def activation_matrix(decisions: Sequence[FusionDecision], true_kinds: Sequence[int], n: int = NUM_KINDS) -> np.ndarray:
    """Mean fusion weight each expert receives per true input kind (rows)."""
    acc = np.zeros((n, n))
    counts = np.zeros(n)
    for d, t in zip(decisions, true_kinds):
        for i, _, w in d.selected:
            acc[t, i] += w
        counts[t] += 1
    return np.divide(acc, counts[:, None], out=np.zeros_like(acc), where=counts[:, None] > 0)
