import numpy as np
import pytest
import torch

from _oracles import brute_force_nme
from fusecl.engine import (
    PRESETS, InvalidConfig, MethodFlags, TrainConfig, assemble_round_model, class_means,
    finetune_pruned, fused_feature_matrix, new_state, nme_classify, nme_predict, run_continual,
    run_round, train_round_joint,
)
from fusecl.nets import checksum, load_teacher, param_count
from fusecl.stream import (
    Dataset, ExemplarMemory, SyntheticSpec, make_class_order, make_synthetic, split_rounds,
)

SMALL = dict(widths=(4, 8), d=8, max_epochs=3, finetune_epochs=2, batch_size=32, refit_epochs=20)


@pytest.fixture(scope="module")
def small_stream():
    spec = SyntheticSpec(num_classes=6, train_per_class=20, test_per_class=10, size=8, seed=3)
    train, test = make_synthetic(spec)
    return split_rounds(make_class_order(6, 1), [2, 2, 2], train, test)


@pytest.fixture(scope="module")
def full_run(small_stream, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    state, reports = run_continual(small_stream, TrainConfig(**SMALL), PRESETS["fusion+FC+mask"],
                                   budget=24, probes=["drop-extractor-2"], out_dir=out)
    return state, reports, out


def _blobs(n=60, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    imgs = rng.normal(0, 20, size=(n, 8, 8, 3))
    imgs[y == 0, :4] += 200
    imgs[y == 1, 4:] += 200
    return Dataset(np.clip(imgs, 0, 255).astype(np.uint8), y)


def test_first_round_fits_separable_blobs():
    data = _blobs()
    state = new_state(TrainConfig(widths=(4, 8), d=8, max_epochs=60, batch_size=16), PRESETS["fusion+FC"], 20)
    state.t = 1
    state.model = assemble_round_model(state, 2)
    state.round_sizes.append(2)
    train_round_joint(state, data)
    with torch.no_grad():
        x = torch.from_numpy((data.images.transpose(0, 3, 1, 2) - 127.5) / 127.5).float()
        acc = (state.model(x).argmax(1).numpy() == data.labels).mean()
    assert acc > 0.95
    # no teacher yet: the distillation term never contributes
    assert all(b.L_d == 0 for b in state.telemetry[(1, "joint")])


def test_telemetry_identity(full_run):
    state, _, _ = full_run
    cfg = state.config
    for (t, _), log in state.telemetry.items():
        for b in log:
            assert abs(b.L_s - (b.L_o + cfg.lam1 * b.L_d)) <= 1e-6
            assert abs(b.L - (b.L_f + cfg.lam2 * b.L_s)) <= 1e-6
            if t == 1:
                assert b.L_d == 0


def test_single_model_telemetry(small_stream):
    state, _ = run_continual(small_stream, TrainConfig(**SMALL), PRESETS["none"], 24, rounds=2)
    for log in state.telemetry.values():
        for b in log:
            assert b.L_f == 0 and abs(b.L - (b.L_o + b.L_d)) <= 1e-6
    assert state.extractors == [] and len(state.teachers) == 2


def test_bookkeeping(full_run, small_stream):
    state, reports, _ = full_run
    assert state.t == 3 and len(state.extractors) == 3
    assert all(e.frozen for e in state.extractors)
    assert state.model.num_classes == sum(small_stream.round_sizes)
    assert [r.seen_classes for r in reports] == [2, 4, 6]
    assert len(state.memory) <= 24 and state.memory.counts() == {c: 4 for c in range(6)}


def test_parameter_accounting(full_run):
    _, reports, _ = full_run
    for prev, cur in zip(reports, reports[1:]):
        assert cur.extractor_params[:-1] == prev.extractor_params
        transform_delta = cur.transform_params - prev.transform_params
        pooled = cur.prune["kept_per_layer"][-1]
        assert transform_delta == pooled * 8 + 8
        expected = (prev.param_count + cur.extractor_params[-1] + transform_delta
                    + cur.head_params - prev.head_params)
        assert cur.param_count == expected
    ratios = [r.size_ratio for r in reports]
    assert all(a < b for a, b in zip(ratios, ratios[1:]))


def test_teacher_matches_checkpoint(full_run):
    state, _, out = full_run
    for t, teacher in enumerate(state.teachers, 1):
        assert checksum(load_teacher(out / f"round_{t:02d}")) == checksum(teacher)
    manifest = (out / "round_03" / "manifest.json").read_text()
    assert '"round": 3' in manifest


def test_frozen_extractors_unchanged_by_round(small_stream):
    state = new_state(TrainConfig(**SMALL), PRESETS["fusion+FC+mask"], 24)
    run_round(state, small_stream.train_data(1), small_stream.test_seen(1))
    before = checksum(state.extractors[0])
    teacher = checksum(state.teacher)
    run_round(state, small_stream.train_data(2), small_stream.test_seen(2))
    assert checksum(state.extractors[0]) == before
    assert checksum(state.teachers[0]) == teacher


def test_unfrozen_flag_changes_old_extractor(small_stream):
    state = new_state(TrainConfig(**SMALL), PRESETS["unfrozen"], 24)
    run_round(state, small_stream.train_data(1), small_stream.test_seen(1))
    before = checksum(state.extractors[0])
    run_round(state, small_stream.train_data(2), small_stream.test_seen(2))
    assert checksum(state.model.old[0]) != before


def test_finetune_requires_pruning(small_stream):
    state = new_state(TrainConfig(**SMALL), PRESETS["fusion+FC+mask"], 24)
    state.t = 1
    state.model = assemble_round_model(state, 2)
    state.round_sizes.append(2)
    with pytest.raises(RuntimeError):
        finetune_pruned(state, small_stream.train_data(1))


def test_parameter_count_constant_during_finetune(small_stream):
    from fusecl.pruning import binarize_masks, prune_current
    state = new_state(TrainConfig(**SMALL), PRESETS["fusion+FC+mask"], 24)
    state.t = 1
    state.model = assemble_round_model(state, 2)
    state.round_sizes.append(2)
    data = small_stream.train_data(1)
    train_round_joint(state, data)
    prune_current(state.model, binarize_masks(state.model.current))
    state.pruned = True
    n = param_count(state.model)
    finetune_pruned(state, data)
    assert param_count(state.model) == n


def test_finetune_does_not_hurt_on_average(small_stream):
    gains = []
    for seed in range(5):
        cfg = TrainConfig(**dict(SMALL, max_epochs=4, finetune_epochs=4, seed=seed))
        _, reports = run_continual(small_stream, cfg, PRESETS["fusion+FC+mask"], 24, rounds=2)
        gains += [r.prune["head_acc_after_finetune"] - r.prune["head_acc_after_surgery"] for r in reports]
    assert np.mean(gains) >= 0


def test_round_errors(small_stream):
    state = new_state(TrainConfig(**SMALL), PRESETS["none"], 24)
    run_round(state, small_stream.train_data(1), small_stream.test_seen(1))
    with pytest.raises(ValueError):
        run_round(state, small_stream.train_data(1), small_stream.test_seen(1))
    empty = small_stream.train_data(2).select(np.zeros(40, dtype=bool))
    with pytest.raises(ValueError):
        run_round(state, empty, small_stream.test_seen(2))


def test_invalid_flag_combinations():
    with pytest.raises(InvalidConfig):
        new_state(TrainConfig(), MethodFlags(fusion=False, transforms=False, masks=True), 10)
    with pytest.raises(InvalidConfig):
        new_state(TrainConfig(), MethodFlags(multi_teacher=True), 10)
    with pytest.raises(InvalidConfig):
        TrainConfig(T=0.5)


def test_determinism(small_stream):
    cfg = TrainConfig(**SMALL)
    a = run_continual(small_stream, cfg, PRESETS["fusion+FC+mask"], 24, rounds=2)[1]
    b = run_continual(small_stream, cfg, PRESETS["fusion+FC+mask"], 24, rounds=2)[1]
    assert [r.to_json() for r in a] == [r.to_json() for r in b]


def test_multi_teacher_uses_every_teacher(small_stream):
    state, reports = run_continual(small_stream, TrainConfig(**SMALL),
                                   PRESETS["multi-teacher-single-model"], 24)
    assert len(state.teachers) == 3
    assert [t.head.out_features for t in state.teachers] == [2, 4, 6]
    assert reports[-1].param_count > 0


def test_probe_metadata(full_run):
    _, reports, _ = full_run
    probe = reports[-1].probes["drop-extractor-2"]
    assert probe["include"] == [0, 2]
    assert "exemplar" in probe["head_refit"]
    assert "drop-extractor-2" not in reports[0].probes


# -- nearest mean of exemplars ---------------------------------------------------

def test_nme_single_class():
    classes, means = class_means({3: np.random.default_rng(0).normal(size=(4, 5))})
    pred = nme_classify(np.random.default_rng(1).normal(size=(10, 5)), classes, means)
    assert (pred == 3).all()


def test_nme_orthogonal_means():
    classes, means = class_means({0: np.array([[1.0, 0.0]]), 1: np.array([[0.0, 2.0]])})
    assert nme_classify(np.array([[0.0, 1.0], [3.0, 0.0]]), classes, means).tolist() == [1, 0]


def test_nme_tie_goes_to_smaller_class():
    classes, means = class_means({0: np.array([[1.0, 0.0]]), 1: np.array([[0.0, 1.0]])})
    assert nme_classify(np.array([[1.0, 1.0]]), classes, means).tolist() == [0]


def test_nme_empty_class_rejected():
    with pytest.raises(RuntimeError):
        class_means({0: np.zeros((0, 3))})


def test_nme_matches_brute_force_and_is_scale_invariant():
    rng = np.random.default_rng(5)
    ex = {c: rng.normal(loc=rng.normal(size=6), size=(5, 6)) for c in range(4)}
    q = rng.normal(size=(200, 6))
    classes, means = class_means(ex)
    pred = nme_classify(q, classes, means)
    np.testing.assert_array_equal(pred, brute_force_nme(q, ex))
    classes, means = class_means({c: v * 7.5 for c, v in ex.items()})
    np.testing.assert_array_equal(nme_classify(q * 7.5, classes, means), pred)


def test_nme_predict_on_model(full_run, small_stream):
    state, _, _ = full_run
    test = small_stream.test_seen(3)
    ex = {c: fused_feature_matrix(state.model, v) for c, v in state.memory.images.items()}
    q = fused_feature_matrix(state.model, test.images)
    np.testing.assert_array_equal(nme_predict(state.model, state.memory, test.images),
                                  brute_force_nme(q, ex))
    with pytest.raises(RuntimeError):
        nme_predict(state.model, ExemplarMemory(10), test.images)
