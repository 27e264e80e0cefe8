import json
import math
from pathlib import Path

import numpy as np
import pytest

from promptfocus.errors import (ConfigurationError, ContractError, StateError,
                                TrainAbortError)
from promptfocus.harness import (COMPONENT_DUMMY, COMPONENT_FROZEN, ONTOLOGY,
                                 TRAIN_COMPONENTS, AdamWState, SceneFactory,
                                 SceneStyle, TrainConfig, _build_model,
                                 _make_scenes, _select_for_scenes, adamw_step,
                                 confusion_matrix, evaluate, generate_scene,
                                 metrics_from_confusion, scene_image_embedding,
                                 synthetic_library, train)
from promptfocus.focuser import load_checkpoint
from promptfocus.rng import RngState
from promptfocus.tensor import Tensor


def small_cfg(**over):
    """Config sized for sub-second training runs."""
    base = dict(steps=20, batch_size=2, train_scenes=6, eval_scenes=3,
                eval_every=10, grid=4, width=16, feature_dim=32,
                token_count=4, heads=2, depth=2, lr=1e-3)
    base.update(over)
    return TrainConfig(**base)


def tiny_fixtures():
    return synthetic_library(dim=16, extra=2)


# ---------------------------------------------------------------- optimizer


def textbook_adamw(params, grads, m, v, t, lr, wd, b1, b2, eps):
    # reference update written the long way, one array at a time
    out = []
    for p, g, mi, vi in zip(params, grads, m, v):
        p = p * (1.0 - lr * wd)
        mi[...] = b1 * mi + (1.0 - b1) * g
        vi[...] = b2 * vi + (1.0 - b2) * np.square(g)
        m_hat = mi / (1.0 - b1 ** t)
        v_hat = vi / (1.0 - b2 ** t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


def test_adamw_matches_textbook_update():
    cfg = small_cfg(lr=3e-3, weight_decay=0.04)
    for seed in range(3):
        rng = RngState(seed)
        shapes = [(4, 5), (7,), (2, 3)]
        tensors = [Tensor(rng.normal(s), requires_grad=True) for s in shapes]
        named = [(f"p{i}", t) for i, t in enumerate(tensors)]
        ref = [t.data.copy() for t in tensors]
        m = [np.zeros(s) for s in shapes]
        v = [np.zeros(s) for s in shapes]
        state = AdamWState()
        for t_step in range(1, 21):
            grads = [rng.normal(s) for s in shapes]
            adamw_step(named, grads, state, cfg)
            ref = textbook_adamw(ref, grads, m, v, t_step, cfg.lr,
                                 cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
        for t, want in zip(tensors, ref):
            assert np.abs(t.data - want).max() < 1e-12


def test_adamw_fused_buffers_match_per_tensor_loop_bitwise():
    cfg = small_cfg(lr=2e-3, weight_decay=0.03)
    rng = RngState(5)
    shapes = [(6, 4), (9,), (3, 3)]
    datas = [rng.normal(s) for s in shapes]
    grad_seq = [[rng.normal(s) for s in shapes] for _ in range(30)]

    flat_t = [Tensor(d.copy(), requires_grad=True) for d in datas]
    flat_named = [(f"w{i}", t) for i, t in enumerate(flat_t)]
    flat_state = AdamWState()

    loop_t = [Tensor(d.copy(), requires_grad=True) for d in datas]
    loop_named = [(f"w{i}", t) for i, t in enumerate(loop_t)]
    # pre-seeded moment dicts keep the state on the per-tensor code path
    loop_state = AdamWState(m={f"w{i}": np.zeros(s) for i, s in enumerate(shapes)},
                            v={f"w{i}": np.zeros(s) for i, s in enumerate(shapes)})

    for grads in grad_seq:
        adamw_step(flat_named, grads, flat_state, cfg)
        adamw_step(loop_named, grads, loop_state, cfg)
    assert flat_state._flat is not None and loop_state._flat is None
    for a, b in zip(flat_t, loop_t):
        assert a.data.tobytes() == b.data.tobytes()
    for i in range(len(shapes)):
        assert flat_state.m[f"w{i}"].tobytes() == loop_state.m[f"w{i}"].tobytes()
        assert flat_state.v[f"w{i}"].tobytes() == loop_state.v[f"w{i}"].tobytes()


def test_adamw_rejects_bad_inputs():
    cfg = small_cfg()
    t = Tensor(np.ones((2, 2)), requires_grad=True)
    state = AdamWState()
    with pytest.raises(StateError):
        adamw_step([("a", t)], [], state, cfg)
    with pytest.raises(StateError):
        adamw_step([("a", t)], [np.ones((3, 2))], state, cfg)
    adamw_step([("a", t)], [np.ones((2, 2))], state, cfg)
    with pytest.raises(StateError):
        # state is bound to parameter "a", not "b"
        adamw_step([("b", t)], [np.ones((2, 2))], state, cfg)


def test_adamw_weight_decay_is_decoupled():
    # zero gradients: the only movement is the multiplicative decay
    cfg = small_cfg(lr=1e-2, weight_decay=0.5)
    t = Tensor(np.full((3,), 2.0), requires_grad=True)
    state = AdamWState()
    adamw_step([("a", t)], [np.zeros(3)], state, cfg)
    assert np.abs(t.data - 2.0 * (1.0 - cfg.lr * cfg.weight_decay)).max() < 1e-15


# ---------------------------------------------------------------- metrics


def iou_by_sets(labels, preds, c):
    truth = labels == c
    hit = preds == c
    union = np.logical_or(truth, hit).sum()
    if union == 0:
        return None
    return np.logical_and(truth, hit).sum() / union


def test_metrics_from_confusion_matches_set_arithmetic():
    classes = len(ONTOLOGY)
    for seed in range(25):
        rng = RngState(seed)
        labels = rng.integers(0, classes, 500)
        preds = rng.integers(0, classes, 500)
        conf = np.zeros((classes, classes), dtype=np.int64)
        np.add.at(conf, (labels, preds), 1)
        rep = metrics_from_confusion(conf)
        want_mean = []
        for c, name in enumerate(ONTOLOGY):
            iou = iou_by_sets(labels, preds, c)
            if iou is None:
                assert name in rep.excluded
                continue
            assert abs(rep.per_class_iou[name] - iou) < 1e-12
            if (labels == c).any():
                want_mean.append(iou)
        assert abs(rep.miou - np.mean(want_mean)) < 1e-12


def test_metrics_perfect_and_disjoint_cases():
    classes = len(ONTOLOGY)
    perfect = np.diag(np.arange(1, classes + 1)).astype(np.int64)
    rep = metrics_from_confusion(perfect)
    assert rep.miou == 1.0 and rep.excluded == ()

    conf = np.zeros((classes, classes), dtype=np.int64)
    conf[0, 1] = 10  # every patch of class 0 predicted as class 1
    rep = metrics_from_confusion(conf)
    assert rep.per_class_iou[ONTOLOGY[0]] == 0.0
    assert rep.miou == 0.0
    assert set(rep.excluded) == set(ONTOLOGY[2:])

    with pytest.raises(ContractError):
        metrics_from_confusion(np.zeros((classes, classes), dtype=np.int64))


def test_confusion_matrix_matches_per_scene_argmax():
    cfg = small_cfg(component="frozen")
    master = RngState(3)
    lib, table = tiny_fixtures()
    model = _build_model(cfg, table, master)
    scenes = _make_scenes(cfg, master)[0]
    conf = confusion_matrix(model, scenes)
    want = np.zeros_like(conf)
    for s in scenes:
        pred = np.argmax(model.logits(s).data, axis=1)
        np.add.at(want, (s.labels, pred), 1)
    assert np.array_equal(conf, want)
    assert conf.sum() == sum(s.labels.size for s in scenes)


# ---------------------------------------------------------------- scenes


def test_scene_generation_is_deterministic():
    style = SceneStyle("s", rotation=0.3, noise_std=0.2)
    factory = SceneFactory()
    for seed in range(5):
        a = generate_scene(style, RngState(seed).derive("x"), factory)
        b = generate_scene(style, RngState(seed).derive("x"), factory)
        assert np.array_equal(a.labels, b.labels)
        assert a.features.tobytes() == b.features.tobytes()
        c = generate_scene(style, RngState(seed).derive("y"), factory)
        assert not np.array_equal(a.labels, c.labels) or a.features.tobytes() != c.features.tobytes()


def test_scene_class_quotas_are_balanced():
    style = SceneStyle("flat")
    factory = SceneFactory()
    for seed in range(20):
        scene = generate_scene(style, RngState(seed), factory, grid=5,
                               classes_per_scene=3)
        counts = np.bincount(scene.labels, minlength=len(ONTOLOGY))
        present = counts[counts > 0]
        assert len(present) == 3
        # 25 cells over 3 classes: quotas 9/8/8
        assert present.max() - present.min() <= 1
        assert scene.present == tuple(sorted(set(scene.labels.tolist())))


def test_noise_free_scene_features_are_exact_prototypes():
    style = SceneStyle("clean", rotation=0.4, noise_std=0.0)
    factory = SceneFactory()
    scene = generate_scene(style, RngState(9), factory)
    protos = factory.styled_prototypes(style)
    match = np.zeros(scene.labels.size, dtype=bool)
    for i, (lab, f) in enumerate(zip(scene.labels, scene.features)):
        match[i] = any(np.array_equal(f, protos[lab, v])
                       for v in range(factory.variants))
    assert match.all()


def test_scene_respects_allowed_class_pool():
    style = SceneStyle("flat")
    factory = SceneFactory()
    for seed in range(10):
        scene = generate_scene(style, RngState(seed), factory,
                               classes_per_scene=2, allowed=(1, 4, 6))
        assert set(scene.labels.tolist()) <= {1, 4, 6}
    with pytest.raises(ConfigurationError):
        generate_scene(style, RngState(0), factory, classes_per_scene=4,
                       allowed=(0, 1))


def test_context_pull_shifts_every_cell_by_scene_mean():
    style = SceneStyle("noisy", noise_std=0.3)
    plain = SceneFactory(context_pull=0.0)
    pulled = SceneFactory(context_pull=0.6)
    for seed in range(5):
        a = generate_scene(style, RngState(seed), plain)
        b = generate_scene(style, RngState(seed), pulled)
        assert np.array_equal(a.labels, b.labels)
        ctx = plain.styled_prototypes(style)[list(a.present)].mean(axis=(0, 1))
        assert np.abs(b.features - (a.features + 0.6 * ctx)).max() < 1e-12


def test_scene_embedding_is_mean_of_present_text_rows():
    _, table = tiny_fixtures()
    factory = SceneFactory()
    scene = generate_scene(SceneStyle("flat"), RngState(2), factory)
    emb = scene_image_embedding(scene, table, RngState(0), noise_std=0.0)
    rows = np.stack([table.row_of(ONTOLOGY[c]) for c in scene.present])
    want = rows.mean(axis=0)
    want /= np.linalg.norm(want)
    assert np.abs(emb - want).max() < 1e-12
    assert abs(np.linalg.norm(emb) - 1.0) < 1e-12


def test_factory_rejects_undersized_feature_dim():
    with pytest.raises(ConfigurationError):
        SceneFactory(feature_dim=10)
    with pytest.raises(ConfigurationError):
        SceneFactory(variants=3)


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ConfigurationError):
        small_cfg(lr=0.0)
    with pytest.raises(ConfigurationError):
        small_cfg(steps=-1)
    with pytest.raises(ConfigurationError):
        small_cfg(eval_every=0)
    with pytest.raises(ConfigurationError):
        small_cfg(component="nonsense")
    with pytest.raises(ConfigurationError):
        small_cfg(warmup_steps=-2)


def test_lr_warmup_is_linear_then_flat():
    cfg = small_cfg(lr=1e-2, warmup_steps=10)
    for step in range(1, 11):
        assert abs(cfg.lr_at(step) - 1e-2 * step / 10) < 1e-15
    assert cfg.lr_at(11) == 1e-2
    assert cfg.lr_at(4000) == 1e-2
    assert small_cfg(lr=1e-2).lr_at(1) == 1e-2


# ---------------------------------------------------------------- model


def test_batched_logits_match_per_scene_logits():
    master = RngState(7)
    lib, table = tiny_fixtures()
    for comp in TRAIN_COMPONENTS:
        cfg = small_cfg(component=comp)
        model = _build_model(cfg, table, master.derive(comp))
        scenes = _make_scenes(cfg, master.derive(comp))[0]
        model.selections = _select_for_scenes(cfg, scenes, lib, table,
                                              master.derive(comp))
        got = model.batched_logits(scenes).data
        want = np.concatenate([model.logits(s).data for s in scenes])
        # stacked rows share one matmul, so only float ordering may differ
        assert np.abs(got - want).max() < 1e-10


def test_prompt_components_require_cached_selection():
    master = RngState(1)
    _, table = tiny_fixtures()
    cfg = small_cfg(component="full")
    model = _build_model(cfg, table, master)
    scene = _make_scenes(cfg, master)[0][0]
    with pytest.raises(ContractError):
        model.logits(scene)
    with pytest.raises(ContractError):
        model.batched_logits([scene])
    with pytest.raises(ContractError):
        model.batched_logits([])


def test_dummy_prompt_selection_is_uniform_everywhere():
    master = RngState(4)
    lib, table = tiny_fixtures()
    cfg = small_cfg(component=COMPONENT_DUMMY)
    scenes = _make_scenes(cfg, master)[0]
    sels = _select_for_scenes(cfg, scenes, lib, table, master)
    for s in scenes:
        sel = sels[s.key]
        assert sel.cls == lib.names
        assert all(abs(w - 1.0 / len(lib)) < 1e-15 for w in sel.sim)


def test_selections_use_library_row_order():
    master = RngState(6)
    lib, table = tiny_fixtures()
    cfg = small_cfg(component="full")
    scenes = _make_scenes(cfg, master)[0]
    sels = _select_for_scenes(cfg, scenes, lib, table, master)
    for sel in sels.values():
        idx = [table.index_of(c) for c in sel.cls]
        assert idx == sorted(idx)


# ---------------------------------------------------------------- training


def test_train_writes_report_checkpoints_and_loss_log(tmp_path):
    cfg = small_cfg()
    report = train(cfg, tiny_fixtures(), tmp_path)
    assert report.step0_equivalence
    assert report.backbone_hash_start == report.backbone_hash_end
    assert math.isfinite(report.loss_first) and math.isfinite(report.loss_last)
    assert len(report.prompt_counts) == cfg.train_scenes + 2 * cfg.eval_scenes
    assert [h["step"] for h in report.eval_history] == [0, 10, 20]

    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss,lr"
    assert len(lines) == cfg.steps + 1
    first = lines[1].split(",")
    assert first[0] == "1" and float(first[2]) == cfg.lr

    on_disk = json.loads((tmp_path / "report.json").read_text())
    assert on_disk == json.loads(json.dumps(report.to_dict()))
    assert on_disk["backbone_hash_equal"] is True
    assert (tmp_path / "final.pffc").exists()
    assert (tmp_path / "last_good.pffc").exists()


def test_identical_config_reruns_are_byte_identical(tmp_path):
    cfg = small_cfg(steps=15, seed=11)
    a, b = tmp_path / "a", tmp_path / "b"
    train(cfg, tiny_fixtures(), a)
    train(cfg, tiny_fixtures(), b)
    for name in ("report.json", "loss.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_warmup_column_appears_in_loss_log(tmp_path):
    cfg = small_cfg(steps=6, warmup_steps=4, lr=8e-3)
    train(cfg, tiny_fixtures(), tmp_path)
    rows = (tmp_path / "loss.csv").read_text().splitlines()[1:]
    lrs = [float(r.split(",")[2]) for r in rows]
    assert lrs == [8e-3 * s / 4 for s in (1, 2, 3, 4)] + [8e-3, 8e-3]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_run_aborts_with_checkpoint(tmp_path):
    # lr*wd > 2 flips parameter signs with growing magnitude, so the
    # weights overflow within tens of steps and the loss goes non-finite
    cfg = small_cfg(steps=200, lr=1e8)
    with pytest.raises(TrainAbortError) as info:
        train(cfg, tiny_fixtures(), tmp_path)
    assert info.value.step >= 1
    assert Path(info.value.checkpoint_path).exists()


def test_train_requires_full_ontology_coverage(tmp_path):
    lib, table = synthetic_library(dim=16, extra=0)
    short = type(lib)(lib.names[:-1])
    rows = np.stack([table.row_of(n) for n in short.names])
    short_table = type(table)(short.names, rows)
    with pytest.raises(ContractError):
        train(small_cfg(), (short, short_table), tmp_path)


def test_two_class_task_is_learnable(tmp_path):
    cfg = small_cfg(steps=120, lr=3e-3, scene_classes=(0, 1),
                    classes_per_scene=2, train_scenes=8, eval_scenes=4,
                    eval_every=120, ks_noise=0.1)
    report = train(cfg, tiny_fixtures(), tmp_path)
    assert report.loss_last < 0.7 * report.loss_first
    assert report.final_knowledge["miou"] > 0.5
    names = set(report.final_knowledge["per_class_iou"])
    assert {"road", "car"} <= names


def test_frozen_component_trains_head_only(tmp_path):
    cfg = small_cfg(component=COMPONENT_FROZEN, steps=10)
    report = train(cfg, tiny_fixtures(), tmp_path)
    assert report.backbone_hash_start == report.backbone_hash_end
    assert report.step0_equivalence
    saved = load_checkpoint(tmp_path / "final.pffc")
    assert saved and all(name.startswith("head.") for name in saved)
