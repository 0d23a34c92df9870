"""Acceptance criteria, one test per criterion, each reporting a PASS/FAIL line."""

import itertools
import math
import time

import numpy as np
import pytest
import torch
import yaml

from _oracles import brute_force_nme, central_differences, relative_error, tiny_loss_fn, tiny_problem
from conftest import ACCEPTANCE_LINES
from fusecl.cli import main as cli_main
from fusecl.engine import PRESETS, class_means, fused_feature_matrix, new_state, nme_classify, run_round
from fusecl.evalkit import (DESK_BUDGET, DESK_SEEDS, desk_config, desk_streams, ordered_within_noise,
                            pooled_std, run_ablation_suite)
from fusecl.losses import combined_aux_loss, cross_entropy, distillation_loss, total_loss
from fusecl.nets import MaskedFeatureExtractor, checksum, trainable_parameters
from fusecl.pruning import binarize_masks, effective_masks, prune_stats, structural_prune
from fusecl.stream import herding_select

BENCH_ROWS = ["none", "fusion", "fusion+FC", "fusion+FC+mask", "drop-extractor-2"]
BENCH_LIMIT_S = 15 * 60


def record(criterion, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# -- plain-float oracles ---------------------------------------------------------

def _softmax(v, T=1.0):
    m = max(x / T for x in v)
    e = [math.exp(x / T - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def _ce(rows, labels):
    return sum(-math.log(_softmax(r)[y]) for r, y in zip(rows, labels)) / len(rows)


def _distill(z, zhat, u, T):
    total = 0.0
    for a, b in zip(z, zhat):
        p, q = _softmax(a[:u], T), _softmax(b[:u], T)
        total -= sum(pi * math.log(qi) for pi, qi in zip(p, q))
    return total / len(z)


# -- criteria ------------------------------------------------------------------------

def test_criterion_1_loss_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    lam1, lam2, T = 1.0, 0.1, 2.0
    worst = 0.0
    for _ in range(1000):
        n, u, c = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        fused = rng.normal(size=(n, u + c)) * 3
        aux = rng.normal(size=(n, u + c)) * 3
        teacher = rng.normal(size=(n, u)) * 3
        y = rng.integers(0, u + c, n)
        t = lambda a: torch.tensor(a, dtype=torch.float64)
        L_f = cross_entropy(t(fused), torch.from_numpy(y)).item()
        L_o = cross_entropy(t(aux), torch.from_numpy(y)).item()
        L_d = distillation_loss(t(teacher), t(aux), u, T).item()
        L = total_loss(L_f, combined_aux_loss(L_o, L_d, lam1), lam2)
        oracle = (_ce(fused.tolist(), y) + lam2 * (_ce(aux.tolist(), y)
                  + lam1 * _distill(teacher.tolist(), aux.tolist(), u, T)))
        worst = max(worst, abs(L - oracle))
    hand = distillation_loss(torch.tensor([[0.0, 0.0]], dtype=torch.float64),
                             torch.tensor([[math.log(3), 0.0, 5.0]], dtype=torch.float64), 2, 1.0).item()
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and abs(hand - 0.836988) <= 1e-6 and elapsed < 5
    record(1, ok, f"max |L - oracle| = {worst:.2e} over 1000 draws, hand value {hand:.6f}, {elapsed:.2f}s")


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    model, teacher, x, y, cfg = tiny_problem()
    params = trainable_parameters(model)
    n_params = sum(p.numel() for p in params)
    names = [n for n, p in model.named_parameters() if p.requires_grad]
    model.train()
    loss_fn = tiny_loss_fn(model, teacher, x, y, cfg)
    analytic = torch.autograd.grad(loss_fn(), params)
    numeric = central_differences(loss_fn, params)
    worst = max(relative_error(a, n) for a, n in zip(analytic, numeric))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-3 and n_params <= 1000 and any("mask_logits" in n for n in names) and elapsed < 60
    record(2, ok, f"{n_params} float64 params incl. mask logits, worst relative error {worst:.2e}, "
                  f"{elapsed:.1f}s")


def test_criterion_3_prune_equivalence():
    t0 = time.perf_counter()
    worst, shrink_ok, pruned_any = 0.0, True, 0
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        widths = tuple(int(w) for w in torch.randint(2, 8, (int(torch.randint(1, 4, (1,), generator=g)),),
                                                      generator=g))
        ext = MaskedFeatureExtractor(3, widths)
        with torch.no_grad():
            for layer in ext.layers:
                layer.mask_logits.normal_(0, 1.5, generator=g)
                layer.bn.weight.uniform_(0.5, 1.5, generator=g)
                layer.bn.bias.normal_(0, 0.2, generator=g)
                layer.bn.running_mean.normal_(0, 0.2, generator=g)
                layer.bn.running_var.uniform_(0.5, 1.5, generator=g)
        ext.eval()
        masks = binarize_masks(ext)
        pruned, kept = structural_prune(ext, masks)
        x = torch.randn(100, 3, 8, 8, generator=g)
        with torch.no_grad():
            oracle = ext(x, effective_masks(ext, masks))[:, torch.from_numpy(kept)]
            worst = max(worst, (pruned(x) - oracle).abs().max().item())
        stats = prune_stats(ext, pruned, count_masks=False)
        if not masks.all_ones:
            pruned_any += 1
            shrink_ok &= stats.params_after < stats.params_before
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and shrink_ok and pruned_any > 0 and elapsed < 60
    record(3, ok, f"max deviation {worst:.2e} over 20 extractors x 100 inputs, "
                  f"{pruned_any} surgeries all shrank={shrink_ok}, {elapsed:.1f}s")


@pytest.fixture(scope="module")
def desk_stream():
    return desk_streams()(0)


@pytest.fixture(scope="module")
def two_round_states(desk_stream):
    t0 = time.perf_counter()
    out = {}
    for name in ("fusion+FC+mask", "unfrozen"):
        state = new_state(desk_config(), PRESETS[name], DESK_BUDGET)
        run_round(state, desk_stream.train_data(1), desk_stream.test_seen(1))
        before = checksum(state.extractors[0])
        run_round(state, desk_stream.train_data(2), desk_stream.test_seen(2))
        out[name] = (state, before, checksum(state.model.old[0]))
    return out, time.perf_counter() - t0


def test_criterion_4_frozen_immutability(two_round_states):
    states, elapsed = two_round_states
    _, before, after = states["fusion+FC+mask"]
    _, ubefore, uafter = states["unfrozen"]
    ok = before == after and ubefore != uafter and elapsed < 300
    record(4, ok, f"frozen checksum unchanged={before == after}, unfrozen control changed="
                  f"{ubefore != uafter}, {elapsed:.0f}s")


def _greedy_exhaustive(feats, k):
    mu = feats.mean(0)
    chosen = []
    for step in range(1, k + 1):
        best = min((i for i in range(len(feats)) if i not in chosen),
                   key=lambda i: (np.linalg.norm(mu - (feats[chosen].sum(0) + feats[i]) / step), i))
        chosen.append(best)
    return chosen


def test_criterion_5_oracles(two_round_states, desk_stream):
    rng = np.random.default_rng(0)
    herding_ok = True
    for n, dim in itertools.product(range(1, 9), (1, 3, 8)):
        feats = rng.normal(size=(n, dim))
        herding_ok &= herding_select(feats, n) == _greedy_exhaustive(feats, n)
    state = two_round_states[0]["fusion+FC+mask"][0]
    test = desk_stream.test_seen(2)
    q_idx = rng.choice(len(test), 200, replace=False)
    ex = {c: fused_feature_matrix(state.model, v) for c, v in state.memory.images.items()}
    q = fused_feature_matrix(state.model, test.images[q_idx])
    classes, means = class_means(ex)
    nme = nme_classify(q, classes, means)
    nme_ok = bool((nme == brute_force_nme(q, ex)).all())
    record(5, herding_ok and nme_ok, f"herding == exhaustive greedy on <=8 candidates: {herding_ok}; "
                                     f"NME == brute force on 200 queries: {nme_ok}")


@pytest.fixture(scope="module")
def benchmark():
    t0 = time.perf_counter()
    result = run_ablation_suite(BENCH_ROWS, DESK_SEEDS, desk_streams(), desk_config(), DESK_BUDGET)
    return result, time.perf_counter() - t0


def _fmt(s):
    return f"{s.name} {100 * s.acc_mean:.1f}+-{100 * (s.acc_std or 0):.1f}"


def test_criterion_6a_full_beats_none(benchmark):
    result, elapsed = benchmark
    full, none = result.summaries["fusion+FC+mask"], result.summaries["none"]
    gap = full.acc_mean - none.acc_mean
    ok = gap >= 0.03 and elapsed < BENCH_LIMIT_S
    record("6a", ok, f"{_fmt(full)} vs {_fmt(none)}: gap {100 * gap:.1f} points (need >= 3), "
                     f"benchmark {elapsed / 60:.1f} min")


def test_criterion_6b_ordering(benchmark):
    result, _ = benchmark
    chain = [result.summaries[n] for n in ("fusion+FC+mask", "fusion+FC", "fusion", "none")]
    pairs = ordered_within_noise(chain)
    detail = "; ".join(f"{hi} >= {lo} (pooled std {100 * pooled_std(result.summaries[hi], result.summaries[lo]):.1f}): {ok}"
                       for hi, lo, ok in pairs)
    record("6b", all(ok for *_, ok in pairs), f"{', '.join(_fmt(s) for s in chain)}; {detail}")


def test_criterion_6c_first_round_retention(benchmark):
    result, _ = benchmark
    full, none = result.summaries["fusion+FC+mask"], result.summaries["none"]
    a, b = full.subset_mean(1), none.subset_mean(1)
    record("6c", a > b, f"final-round accuracy on round-1 classes: full {100 * a:.1f} vs none {100 * b:.1f}")


def test_criterion_6d_drop_extractor(benchmark):
    result, _ = benchmark
    full, probe = result.summaries["fusion+FC+mask"], result.summaries["drop-extractor-2"]
    a, b = full.subset_mean(2), probe.subset_mean(2)
    record("6d", b < a, f"round-2 classes at the final round: intact {100 * a:.1f} vs "
                        f"without extractor 2 {100 * b:.1f}")


def test_criterion_7_size_accounting(benchmark):
    result, _ = benchmark
    d = desk_config().d
    exact, increasing = True, True
    for reports in result.reports["fusion+FC+mask"].values():
        for prev, cur in zip(reports, reports[1:]):
            one_transform = cur.prune["kept_per_layer"][-1] * d + d
            exact &= cur.transform_params - prev.transform_params == one_transform
            exact &= cur.param_count == (prev.param_count + cur.extractor_params[-1] + one_transform
                                         + cur.head_params - prev.head_params)
        ratios = [r.size_ratio for r in reports]
        increasing &= all(a < b for a, b in zip(ratios, ratios[1:]))
    series = [round(r.size_ratio, 2) for r in result.reports["fusion+FC+mask"][DESK_SEEDS[0]]]
    record(7, exact and increasing, f"increment identity exact={exact}, ratios strictly increasing="
                                    f"{increasing} (seed {DESK_SEEDS[0]}: {series})")


def test_criterion_8_determinism(tmp_path):
    cfg = {
        "name": "determinism",
        "dataset": {"synthetic": {"num_classes": 10, "train_per_class": 60, "test_per_class": 20,
                                  "blob_sigma": 1.5, "jitter": 2.5, "pixel_noise": 0.5, "distractors": 3}},
        "rounds": [2, 2, 2],
        "seeds": [0],
        "budget": 30,
        "train": {"max_epochs": 4, "finetune_epochs": 2},
        "probes": ["drop-extractor-2"],
    }
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    files = []
    for out in ("a", "b"):
        assert cli_main(["run", "--config", str(path), "--out", str(tmp_path / out)]) == 0
        (run_dir,) = (tmp_path / out).iterdir()
        files.append((run_dir / "metrics.csv").read_bytes())
    record(8, files[0] == files[1], f"two identical runs, metrics.csv byte-identical={files[0] == files[1]} "
                                    f"({len(files[0])} bytes)")
