"""Acceptance suite: one or more tests per criterion, each tagged with
``@pytest.mark.criterion(n, title)``.  The terminal summary (see conftest)
prints one PASS/FAIL line per criterion with its wall time.

Criteria 5, 6 and 7 share one full desk-scale pipeline run (600 scenes per
kind, default configuration), which dominates the runtime of this file.
"""

import json
import time

import numpy as np
import pytest

from robumtl import pipeline as P
from robumtl import tensor as T
from robumtl.backbone import ModelConfig, MtlModel
from robumtl.errors import FormatError
from robumtl.fusion import fuse, top_k
from robumtl.lora import (
    decode_expert,
    delta,
    delta_map,
    eject,
    encode_expert,
    expected_parameter_count,
    inject,
    load_expert,
    new_expert,
)
from robumtl.metrics import delta_m
from robumtl.perturb import (
    ALL_KINDS,
    apply_perturbation,
    blur,
    fog,
    gaussian_noise,
    rain,
    render_scene,
    snow,
)
from robumtl.router import DmlsNet, se_block
from robumtl.serialize import decode_array, encode_array, load_checkpoint, read_array
from robumtl.tensor import Tensor

import robumtl.backbone as bb
from helpers import away_from_zero, distinct_values, gradcheck
from reference_rows import BASELINE, DIRECTIONS, ROWS

criterion = pytest.mark.criterion


# ---------------------------------------------------------------------------
# shared desk run
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    cfg = P.PipelineConfig(out=str(out))
    marks = []
    start = time.perf_counter()
    result = P.run_all(cfg, lambda s: marks.append((s, time.perf_counter())))
    end = time.perf_counter()
    stamps = [t for _, t in marks] + [end]
    seconds = {name: stamps[i + 1] - t for i, (name, t) in enumerate(marks)}
    return {"config": cfg, "result": result, "stage_seconds": seconds, "total": end - start}


# ---------------------------------------------------------------------------
# 1. relative-delta arithmetic
# ---------------------------------------------------------------------------


@criterion(1, "relative delta arithmetic on published rows")
@pytest.mark.parametrize("row", ["robumtl", "full_ft", "tuning_decoders"])
def test_c1_delta_m_rows(row):
    t0 = time.perf_counter()
    values, printed = ROWS[row]
    got = delta_m(values, BASELINE, DIRECTIONS)
    assert time.perf_counter() - t0 < 1.0
    assert abs(got - printed) <= 0.1, f"{row}: recomputed {got:+.3f}, printed {printed:+.2f}"


# ---------------------------------------------------------------------------
# 2. fusion algebra
# ---------------------------------------------------------------------------

SEEDS = range(120)


def _pool(rng, n=6, scale=0.25):
    # fused deltas are stored as float32; at this scale an absolute 1e-7 is above half an ulp
    shapes = [tuple(rng.integers(2, 9, size=2)) for _ in range(rng.integers(1, 4))]
    return {i: {f"s{j}": rng.normal(0, scale, size=shp).astype(np.float32) for j, shp in enumerate(shapes)}
            for i in range(n)}


@criterion(2, "fusion algebra")
def test_c2_top1_is_direct_injection(tiny_model):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        pool = _pool(rng)
        s = rng.dirichlet(np.ones(6))
        fused = fuse(None, pool, top_k(s, 1))
        best = int(np.argmax(s))
        assert all(np.array_equal(fused[k], pool[best][k]) for k in pool[best])
    # the same holds through the model: fused injection == injecting the expert
    rng = np.random.default_rng(0)
    experts = {int(k): new_expert(tiny_model, k, (1, 2, 2, 1), init_seed=int(k)) for k in ALL_KINDS}
    for e in experts.values():
        for site in e.sites:
            e.B[site] = Tensor(rng.normal(0, 0.1, e.B[site].shape).astype(np.float32))
    s = [0.05, 0.1, 0.6, 0.1, 0.1, 0.05]
    via_fusion = inject(tiny_model, fuse(tiny_model, experts, top_k(s, 1))).params
    direct = inject(tiny_model, delta_map(experts[2])).params
    assert all(np.array_equal(via_fusion[k].data, direct[k].data) for k in direct)


@criterion(2, "fusion algebra")
def test_c2_equal_scores_give_the_mean():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        pool = _pool(rng)
        k = int(rng.integers(2, 7))
        members = rng.permutation(6)[:k]
        s = np.full(6, 0.01)
        s[members] = 0.5
        fused = fuse(None, pool, top_k(s, k))
        for site in fused:
            mean = np.mean([pool[int(i)][site].astype(np.float64) for i in members], axis=0)
            assert np.max(np.abs(fused[site] - mean)) <= 1e-7


@criterion(2, "fusion algebra")
def test_c2_score_scale_invariance():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        pool = _pool(rng)
        s = rng.dirichlet(np.ones(6))
        c = float(10 ** rng.uniform(-3, 3))
        k = int(rng.integers(1, 7))
        a, b = top_k(s, k), top_k(s * c, k)
        assert a.indices == b.indices and a.weights == b.weights
        fa, fb = fuse(None, pool, a), fuse(None, pool, b)
        assert all(np.array_equal(fa[site], fb[site]) for site in fa)


@criterion(2, "fusion algebra")
def test_c2_full_k_is_convex_combination():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        pool = _pool(rng)
        s = rng.dirichlet(np.ones(6))
        fused = fuse(None, pool, top_k(s, 6))
        for site in fused:
            want = sum(s[i] * pool[i][site].astype(np.float64) for i in range(6))
            assert np.max(np.abs(fused[site] - want)) <= 1e-7


@criterion(2, "fusion algebra")
def test_c2_full_k_within_one_ulp_at_any_scale():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        pool = _pool(rng, scale=float(10 ** rng.uniform(-3, 3)))
        s = rng.dirichlet(np.ones(6))
        fused = fuse(None, pool, top_k(s, 6))
        for site in fused:
            want = sum(s[i] * pool[i][site].astype(np.float64) for i in range(6))
            # float32 rounding of the result plus the 2^-32 grid on the weights
            bound = np.spacing(np.abs(want).astype(np.float32)) / 2
            bound = bound + 2.0 ** -32 * sum(np.abs(pool[i][site].astype(np.float64)) for i in range(6))
            assert np.all(np.abs(fused[site] - want) <= bound)


# ---------------------------------------------------------------------------
# 3. low-rank expert contracts
# ---------------------------------------------------------------------------

DESK_SCHEDULE = (16, 32, 64, 128)


@pytest.fixture(scope="module")
def desk_model():
    return MtlModel(ModelConfig(), seed=11)


def _trained(model, kind, seed, scale=0.05):
    e = new_expert(model, kind, DESK_SCHEDULE, init_seed=seed)
    rng = np.random.default_rng(seed)
    for s in e.sites:
        e.B[s] = Tensor(rng.normal(0, scale, e.B[s].shape).astype(np.float32))
    return e


def _images(n, seed):
    return np.random.default_rng(seed).uniform(size=(n, 3, 64, 64)).astype(np.float32)


@criterion(3, "low-rank expert contracts")
def test_c3_fresh_expert_is_bit_identical(desk_model):
    x = _images(2, 0)
    ref = desk_model.predict(x)
    out = inject(desk_model, delta_map(new_expert(desk_model, "rain", DESK_SCHEDULE, init_seed=3))).predict(x)
    assert all(np.array_equal(ref[t], out[t]) for t in ref)


@criterion(3, "low-rank expert contracts")
def test_c3_inject_eject_round_trip(desk_model):
    before = desk_model.state_dict()
    adapted = inject(desk_model, delta_map(_trained(desk_model, "fog", 4)))
    assert any(not np.array_equal(adapted.params[k].data, before[k]) for k in before)
    restored = eject(adapted).state_dict()
    assert all(np.array_equal(restored[k], before[k]) for k in before)


@criterion(3, "low-rank expert contracts")
def test_c3_merged_equals_separate_path(desk_model, monkeypatch):
    e = _trained(desk_model, "snow", 5)
    x = _images(2, 1)
    merged = inject(desk_model, delta_map(e)).predict(x)
    plain = bb._linear

    def two_path(model, name, inp, overrides, lora=None):
        y = plain(model, name, inp, overrides)
        if name in e.A:
            y = y + T.linear(T.linear(inp, e.B[name]), e.A[name]) * e.alpha
        return y

    monkeypatch.setattr(bb, "_linear", two_path)
    separate = desk_model.predict(x)
    assert max(float(np.max(np.abs(merged[t] - separate[t]))) for t in merged) < 1e-5


@criterion(3, "low-rank expert contracts")
def test_c3_delta_rank_within_schedule(desk_model):
    e = _trained(desk_model, "blur", 6)
    for s in e.sites:
        sv = np.linalg.svd(delta(e, s).astype(np.float64), compute_uv=False)
        rank = int((sv > sv[0] * max(sv.shape[0], 1) * 1e-6).sum())
        assert rank <= DESK_SCHEDULE[desk_model.site_stage(s)]


# ---------------------------------------------------------------------------
# 4. gradient validation
# ---------------------------------------------------------------------------


def _se(f, w1, w2):
    return se_block(f, w1, w2)[1]


PRIMITIVES = {
    "matmul": lambda r: (T.matmul, [r.normal(size=(3, 4)), r.normal(size=(4, 2))], 1e-6),
    "conv": lambda r: ((lambda x, w, b, st=int(r.integers(1, 3)): T.conv2d(x, w, b, stride=st, padding=1)),
                       [r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)], 1e-6),
    "depthwise-separable": lambda r: (T.depthwise_separable_conv,
                                      [r.normal(size=(2, 3, 5, 5)), r.normal(size=(3, 1, 3, 3)),
                                       r.normal(size=(4, 3, 1, 1)), r.normal(size=3), r.normal(size=4)], 1e-6),
    "maxpool": lambda r: (T.maxpool2d, [distinct_values(r, (2, 2, 4, 4))], 1e-5),
    "avgpool": lambda r: (lambda x: T.adaptive_avgpool(x, 1), [r.normal(size=(2, 3, 4, 4))], 1e-6),
    "relu": lambda r: (T.relu, [away_from_zero(r, (4, 5))], 1e-6),
    "softmax": lambda r: (T.softmax, [r.normal(size=(3, 5))], 1e-6),
    "se": lambda r: (_se, [np.abs(r.normal(size=(3, 8))), r.normal(size=(4, 8)), r.normal(size=(8, 4))], 1e-6),
    "ce": lambda r: ((lambda z, y=r.integers(0, 5, size=4): T.cross_entropy(z, y)), [r.normal(size=(4, 5))], 1e-6),
    "bce": lambda r: ((lambda z, t=(r.random((3, 4)) > 0.5).astype(float): T.bce_with_logits(z, t)),
                      [r.normal(size=(3, 4)) * 2], 1e-6),
    "l2": lambda r: ((lambda p, t=r.normal(size=(2, 2, 3, 3)): T.l2_loss(p, t)), [r.normal(size=(2, 2, 3, 3))], 1e-6),
}


@criterion(4, "gradient validation")
@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_c4_finite_differences(name):
    worst = 0.0
    for case in range(20):
        fn, arrays, eps = PRIMITIVES[name](np.random.default_rng(7000 + case))
        worst = max(worst, gradcheck(fn, arrays, seed=case, eps=eps))
    assert worst < 1e-5, f"{name}: worst relative error {worst:.2e}"


# ---------------------------------------------------------------------------
# 5. router desk training
# ---------------------------------------------------------------------------


@criterion(5, "router desk training")
def test_c5_router_held_out_accuracy(desk):
    cfg = desk["config"]
    metrics = json.loads(P.Layout(cfg.out).report("dmls_metrics.json").read_text())
    print(f"router: accuracy {metrics['accuracy']:.4f} after {metrics['epochs_run']} epochs, "
          f"{desk['stage_seconds']['train-dmls']:.0f}s")
    assert metrics["epochs_run"] <= 30
    assert metrics["accuracy"] >= 0.90
    assert desk["stage_seconds"]["train-dmls"] < 600


@criterion(5, "router desk training")
def test_c5_batch_vote(desk):
    cfg = desk["config"]
    corpus = P.Corpus(P.Layout(cfg.out).corpus)
    router = P.load_router(cfg)
    rng = np.random.default_rng(0)
    hits = total = 0
    for kind in ALL_KINDS:
        held = np.concatenate([corpus.split(kind, "val").images, corpus.split(kind, "test").images])
        for _ in range(100):
            batch = held[rng.choice(len(held), 16, replace=False)]
            hits += int(np.argmax(router.batch_vote(batch)) == int(kind))
            total += 1
    print(f"batch vote: {hits}/{total}")
    assert hits / total >= 0.99


# ---------------------------------------------------------------------------
# 6. routed robustness
# ---------------------------------------------------------------------------


def _better(a, b, lower_is_better):
    return a < b if lower_is_better else a > b


@criterion(6, "routed robustness against base and monolithic")
def test_c6_routed_beats_base_and_monolithic(desk):
    routed, base, mono = desk["result"]["single"]
    for rep in (routed, base, mono):
        print(rep.name, {t.task: round(t.value, 4) for t in rep.tasks}, f"dm={rep.delta_m_adv:+.3f}")
    print(f"pipeline total {desk['total']:.0f}s")
    for other in (base, mono):
        wins = sum(_better(r.value, o.value, r.lower_is_better) for r, o in zip(routed.tasks, other.tasks))
        assert wins >= 2, f"routed wins {wins}/3 tasks against {other.name}"
        assert routed.delta_m_adv > other.delta_m_adv
    assert desk["total"] < 45 * 60


# ---------------------------------------------------------------------------
# 7. k sweep
# ---------------------------------------------------------------------------


@criterion(7, "k sweep trend")
def test_c7_k_sweep(desk):
    rows = {r["k"]: r for r in desk["result"]["ablate_k"]}
    for k, r in sorted(rows.items()):
        print(f"k={k} single {r['dm_single']:+.3f} mixed {r['dm_mixed']:+.3f}")
    assert rows[6]["dm_mixed"] >= rows[1]["dm_mixed"]
    assert rows[1]["dm_single"] >= rows[6]["dm_single"]


# ---------------------------------------------------------------------------
# 8 and 9 use small pipeline runs
# ---------------------------------------------------------------------------

TINY = dict(count=12, base_epochs=1, expert_epochs=1, warmup=1, router_epochs=1, mono_epochs=1,
            finetune_epochs=1, batch_size=8, eval_batch=8)


@pytest.fixture(scope="module")
def twin_runs(tmp_path_factory):
    outs = []
    for tag in ("a", "b"):
        out = tmp_path_factory.mktemp(f"twin_{tag}")
        P.run_all(P.PipelineConfig(out=str(out), seed=9, **TINY))
        outs.append(out)
    return outs


class CountingRouter:
    """Wraps a router and records every scoring call, whatever the entry point."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def __getattr__(self, name):
        attr = getattr(self.inner, name)
        if name in ("forward", "batch_vote", "_scores", "logits", "features"):
            def counted(*a, **kw):
                self.calls += 1
                return attr(*a, **kw)
            return counted
        return attr


@criterion(8, "router invoked once per batch")
@pytest.mark.parametrize("batch_size", [1, 5, 8])
def test_c8_router_once_per_batch(twin_runs, batch_size):
    cfg = P.PipelineConfig(out=str(twin_runs[0]), seed=9, **TINY)
    corpus = P.Corpus(P.Layout(cfg.out).corpus)
    model = P.load_model(cfg, P.Layout(cfg.out).checkpoint("base"))
    router = P.load_router(cfg)
    counter = CountingRouter(router)
    split = P.eval_sets(corpus, cfg)["single"]
    run = P.run_inference(model, counter, P.load_pool(cfg, model), split, P.FusionConfig(3), batch_size=batch_size)
    batches = len(P.kind_batches(split, batch_size))
    assert counter.calls == batches == len(run.decisions)
    assert router.invocations == batches


# ---------------------------------------------------------------------------
# 9. persistence
# ---------------------------------------------------------------------------


@criterion(9, "persistence")
def test_c9_corpus_files_round_trip(twin_runs):
    root = P.Layout(twin_runs[0]).corpus
    files = sorted(root.rglob("*.img")) + sorted(root.rglob("*.lbl"))
    assert files
    for f in files[:200]:
        raw = f.read_bytes()
        assert encode_array(decode_array(raw)) == raw
        assert np.array_equal(read_array(f), decode_array(raw))


@criterion(9, "persistence")
def test_c9_checkpoints_and_experts_round_trip(twin_runs):
    lay = P.Layout(twin_runs[0])
    cfg = P.PipelineConfig(out=str(twin_runs[0]), seed=9, **TINY)
    base_path = lay.checkpoint("base")
    state = load_checkpoint(base_path)
    model = P.load_model(cfg, base_path)
    assert all(np.array_equal(model.state_dict()[k], v) for k, v in state.items())
    router_path = lay.checkpoint("dmls")
    router = DmlsNet.load(router_path)
    copy = twin_runs[0] / "router_copy.rmtl"
    router.save(copy)
    assert copy.read_bytes() == router_path.read_bytes()
    for kind in ALL_KINDS:
        path = lay.expert("lora", kind)
        raw = path.read_bytes()
        assert encode_expert(load_expert(path, model)) == raw


@criterion(9, "persistence")
def test_c9_corrupted_headers_rejected(twin_runs):
    lay = P.Layout(twin_runs[0])
    raw = lay.expert("lora", "rain").read_bytes()
    bad = b"XXXX" + raw[4:]
    with pytest.raises(FormatError) as err:
        decode_expert(bad)
    assert err.value.offset == 0 and str(err.value)
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0x40
    with pytest.raises(FormatError):
        decode_expert(bytes(flipped))
    with pytest.raises(FormatError):
        decode_array(b"")


@criterion(9, "persistence")
def test_c9_same_seed_reruns_are_byte_identical(twin_runs):
    a, b = (P.Layout(o).root / "reports" for o in twin_runs)
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir()) and names
    differ = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    assert not differ, f"reports differ between reruns: {differ}"
    for sub in ("checkpoints", "experts"):
        fa = sorted(p.relative_to(twin_runs[0]) for p in (twin_runs[0] / sub).rglob("*.rmtl"))
        assert all((twin_runs[0] / f).read_bytes() == (twin_runs[1] / f).read_bytes() for f in fa)


# ---------------------------------------------------------------------------
# 10. parameter accounting
# ---------------------------------------------------------------------------


@criterion(10, "parameter accounting")
def test_c10_router_budget(twin_runs):
    reported = json.loads(P.Layout(twin_runs[0]).report("dmls_metrics.json").read_text())["parameters"]
    assert reported == DmlsNet().num_parameters() <= 55_000


@criterion(10, "parameter accounting")
def test_c10_expert_closed_form(desk_model):
    e = new_expert(desk_model, "noise", DESK_SCHEDULE)
    want = sum(DESK_SCHEDULE[desk_model.site_stage(s)] * sum(desk_model.site_shape(s)) for s in desk_model.sites())
    assert e.num_parameters() == want == expected_parameter_count(desk_model, DESK_SCHEDULE)


@criterion(10, "parameter accounting")
def test_c10_schedule_ordering(desk_model):
    low = expected_parameter_count(desk_model, (8, 16, 32, 64))
    mid = expected_parameter_count(desk_model, (16, 32, 64, 128))
    flat = expected_parameter_count(desk_model, (128, 128, 128, 128))
    assert low < mid < flat


# ---------------------------------------------------------------------------
# 11. perturbation statistics
# ---------------------------------------------------------------------------


def _tv(img):
    return float(np.abs(np.diff(img, axis=-1)).sum() + np.abs(np.diff(img, axis=-2)).sum())


@criterion(11, "perturbation statistics")
@pytest.mark.parametrize("sigma", [0.02, 0.05, 0.1])
def test_c11_noise_sigma_recovered(sigma):
    gray = np.full((3, 128, 128), 0.5, dtype=np.float32)
    std = float((gaussian_noise(gray, sigma, seed=1) - gray).std())
    assert abs(std - sigma) <= 0.05 * sigma


@criterion(11, "perturbation statistics")
def test_c11_identity_at_zero_severity():
    scene = render_scene(3)
    img = scene.pixels
    assert np.array_equal(gaussian_noise(img, 0.0, seed=1), img)
    assert np.array_equal(blur(img, "gaussian", 1), img)
    assert np.array_equal(rain(img, density=0.0, seed=1), img)
    assert np.array_equal(snow(img, density=0.0, seed=1), img)
    assert np.array_equal(fog(img, 0.0), img)
    for kind in ALL_KINDS:
        assert np.array_equal(apply_perturbation(scene, kind, 0, seed=2).pixels, img)


@criterion(11, "perturbation statistics")
@pytest.mark.parametrize("kind", ["gaussian", "average", "motion"])
def test_c11_blur_reduces_total_variation(kind):
    yy, xx = np.mgrid[0:32, 0:32]
    board = np.repeat(((yy + xx) % 2).astype(np.float32)[None], 3, axis=0)
    assert _tv(blur(board, kind, 3, 45.0)) < _tv(board)
