import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from datforge.augment import GeometricRecord, PairBatch
from datforge.detector import Detection, DetectorConfig, predict
from datforge.errors import ConsistencyError, NonFiniteError, ShapeError
from datforge.evalkit import map50
from datforge.numerics import Tensor, grad_check, serialize
from datforge.oracle import OracleConfig, pretrain_oracle
from datforge.scenegen import SOURCE_DOMAIN, TARGET_DOMAIN, BoxLabel, SceneSpec, dataset_from_items, make_image
from datforge.trainer import (
    EmaState,
    LabelSource,
    LossWeights,
    StudentConfig,
    StudentTrainer,
    TrainSchedule,
    alignment_loss,
    combined_loss,
    ema_update,
    init_projection,
    label_provenance,
    phase_flags,
    select_label_source,
)

DET = DetectorConfig()
SPEC = SceneSpec(seed=5)


def _ds(domain, n, split="train"):
    return dataset_from_items([make_image(SPEC, domain, split, i) for i in range(n)],
                              {"classes": ["car", "person", "truck"]})


@pytest.fixture(scope="module")
def data():
    source, target = _ds(SOURCE_DOMAIN, 8), _ds(TARGET_DOMAIN, 8)
    dino = {i: [Detection(b, 0.9) for b in bs] for i, bs in zip(target.ids, target.boxes)}
    oracle = pretrain_oracle(OracleConfig(pretrain_iterations=0), [], 3)
    return source, target, dino, oracle


def _cfg(**kw):
    sched = kw.pop("schedule", TrainSchedule(1, 2, 40))
    return StudentConfig(schedule=sched, batch_size=2, seed=11, **kw)


# -- EMA ----------------------------------------------------------------------

def _state(teacher, student, alpha):
    return EmaState({"w": Tensor(np.array(student, np.float64))}, {"w": Tensor(np.array(teacher, np.float64))}, alpha)


def test_ema_single_step():
    st_ = ema_update(_state([1.0], [0.0], 0.9))
    assert st_.teacher["w"].data[0] == pytest.approx(0.9)
    assert st_.student["w"].data[0] == 0.0


def test_ema_fixed_point():
    st_ = ema_update(_state([0.3, -2.0], [0.3, -2.0], 0.999))
    assert st_.teacher["w"].data.tolist() == [0.3, -2.0]


@settings(max_examples=60, deadline=None)
@given(alpha=st.sampled_from([0.9, 0.999, 0.9996]), k=st.integers(0, 100), seed=st.integers(0, 2**32))
def test_ema_geometric_decay(alpha, k, seed):
    rng = np.random.default_rng(seed)
    theta, bar0 = rng.normal(size=5), rng.normal(size=5)
    state = _state(bar0, theta, alpha)
    for _ in range(k):
        ema_update(state)
    assert np.allclose(np.abs(state.teacher["w"].data - theta), alpha ** k * np.abs(bar0 - theta), atol=1e-6, rtol=0)
    assert np.array_equal(state.student["w"].data, theta)


def test_ema_mismatch_errors():
    with pytest.raises(ConsistencyError):
        ema_update(EmaState({"a": Tensor(np.zeros(2))}, {"b": Tensor(np.zeros(2))}, 0.9))
    with pytest.raises(ShapeError):
        ema_update(EmaState({"a": Tensor(np.zeros(2))}, {"a": Tensor(np.zeros(3))}, 0.9))
    with pytest.raises(ValueError):
        _state([0.0], [0.0], 1.0)


# -- schedule -------------------------------------------------------------------

def test_phase_flag_examples():
    s = TrainSchedule(5000, 20000, 60000)
    assert not phase_flags(4999, s).align_target and phase_flags(5000, s).align_target
    assert phase_flags(20000, s).use_pseudo_labels and not phase_flags(19999, s).use_pseudo_labels
    assert phase_flags(0, s).code() == "100"


@settings(max_examples=60, deadline=None)
@given(a=st.integers(0, 50), b=st.integers(0, 50), c=st.integers(0, 50))
def test_phase_flags_monotone(a, b, c):
    n_sim, n_pl, n_max = sorted((a, b, c))
    s = TrainSchedule(n_sim, n_pl, n_max + 1)
    codes = [phase_flags(i, s) for i in range(n_max + 1)]
    for prev, cur in zip(codes, codes[1:]):
        for f in ("align_source", "align_target", "use_pseudo_labels"):
            assert getattr(cur, f) >= getattr(prev, f)
    assert all(f.align_source for f in codes)


@pytest.mark.parametrize("args", [(10, 5, 20), (0, 5, 4), (-1, 0, 1)])
def test_schedule_validation(args):
    with pytest.raises(ValueError):
        TrainSchedule(*args)


def test_schedule_ema_after_pl():
    with pytest.raises(ValueError):
        TrainSchedule(0, 10, 20, n_init_ema=5)


# -- alignment ------------------------------------------------------------------

def _identity_head(c):
    eye = np.eye(c)
    return {"proj.fc1.weight": Tensor(eye.copy()), "proj.fc1.bias": Tensor(np.zeros(c)),
            "proj.fc2.weight": Tensor(eye.copy()), "proj.fc2.bias": Tensor(np.zeros(c))}


def test_alignment_parallel_is_zero():
    feats = np.random.default_rng(0).uniform(0.1, 1.0, (2, 4, 5, 5))
    # the identity head keeps non-negative inputs, so the projected map equals the oracle map
    loss = alignment_loss(Tensor(feats), Tensor(feats * 3.0), _identity_head(4))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_alignment_orthogonal_is_one():
    s = np.zeros((1, 2, 3, 3))
    s[:, 0] = 1.0
    o = np.zeros((1, 2, 6, 6))
    o[:, 1] = 2.0
    assert alignment_loss(Tensor(s), Tensor(o), _identity_head(2)).item() == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32))
def test_alignment_bounds(seed):
    rng = np.random.default_rng(seed)
    head = init_projection(4, 8, 3, seed % 1000, np.float64)
    loss = alignment_loss(Tensor(rng.normal(size=(2, 4, 4, 4))), Tensor(rng.normal(size=(2, 3, 6, 6))), head).item()
    assert 0.0 <= loss <= 2.0


def test_alignment_grad_check():
    rng = np.random.default_rng(3)
    head = init_projection(4, 6, 3, 0, np.float64)
    oracle = Tensor(rng.normal(size=(2, 3, 6, 6)))
    point = {"x": rng.normal(size=(2, 4, 4, 4)), **{k: v.data for k, v in head.items()}}

    def fn(p):
        return alignment_loss(p["x"], oracle, {k: p[k] for k in head})

    assert grad_check(fn, point) < 1e-4


def test_alignment_oracle_gets_no_gradient():
    head = init_projection(4, 6, 3, 0, np.float64)
    x = Tensor(np.random.default_rng(1).normal(size=(1, 4, 4, 4)), True)
    oracle = Tensor(np.random.default_rng(2).normal(size=(1, 3, 4, 4)), True)
    alignment_loss(x, oracle, head).backward()
    assert x.grad is not None and oracle.grad is None


def test_alignment_channel_mismatch():
    head = init_projection(4, 6, 3, 0, np.float64)
    with pytest.raises(ShapeError):
        alignment_loss(Tensor(np.ones((1, 4, 4, 4))), Tensor(np.ones((1, 5, 4, 4))), head)
    with pytest.raises(ShapeError):
        alignment_loss(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 4, 4))), head)


# -- combined loss ----------------------------------------------------------------

def test_combined_loss_examples():
    assert combined_loss(2.0, 1.0, 0.5, LossWeights(1.0, 1.0)) == 3.5
    assert combined_loss(2.0, 1.0, 0.5, LossWeights(0.0, 1.0)) == 2.5
    assert combined_loss(0.0, 0.0, 0.0, LossWeights()) == 0.0
    with pytest.raises(NonFiniteError):
        combined_loss(float("nan"), 0.0, 0.0, LossWeights())
    with pytest.raises(NonFiniteError):
        combined_loss(Tensor(np.array(1.0)), Tensor(np.array(np.inf)), 0.0, LossWeights())
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0.0)


# -- label sources ----------------------------------------------------------------

def test_label_provenance():
    assert label_provenance(0, LabelSource("dino")) == "dino"
    assert label_provenance(10**6, LabelSource("mean_teacher")) == "teacher"
    only = LabelSource("ema_only", 25000)
    assert label_provenance(24999, only) == "dino" and label_provenance(25000, only) == "teacher"
    mixed = LabelSource("ema_mixed", 25000)
    assert [label_provenance(i, mixed) for i in (24999, 25000, 25001, 25002)] == ["dino", "dino", "teacher", "dino"]
    with pytest.raises(ValueError):
        LabelSource("ema_mixed")
    with pytest.raises(ValueError):
        LabelSource("oracle")


def _identity_batch(ids):
    blank = np.zeros((len(ids), 3, 64, 64), np.float32)
    return PairBatch(list(ids), blank, blank, [[] for _ in ids], [GeometricRecord.identity(64)] * len(ids))


def test_select_dino_is_lookup():
    dino = {4: [Detection(BoxLabel(1, 2, 3, 10, 12), 0.9)], 7: []}
    labels, prov = select_label_source(0, LabelSource("dino"), dino, {}, _identity_batch([7, 4]), DET, 0.8)
    assert prov == "dino" and labels == [[], [BoxLabel(1, 2, 3, 10, 12)]]


def test_select_dino_missing_id():
    with pytest.raises(ConsistencyError, match="13"):
        select_label_source(0, LabelSource("dino"), {4: []}, {}, _identity_batch([13]), DET, 0.8)
    with pytest.raises(ConsistencyError):
        select_label_source(0, LabelSource("dino"), None, {}, _identity_batch([4]), DET, 0.8)


# -- training loop ------------------------------------------------------------------

def test_trainer_resource_checks(data):
    source, target, _, oracle = data
    with pytest.raises(ConsistencyError):
        StudentTrainer(_cfg(), DET, source, target, oracle, None)
    with pytest.raises(ConsistencyError):
        StudentTrainer(_cfg(label_source=LabelSource("mean_teacher")), DET, source, target, None)


def test_zero_alignment_matches_source_only(data):
    source, target, dino, oracle = data
    sched = TrainSchedule(5, 5, 10)
    a = StudentTrainer(_cfg(schedule=sched, weights=LossWeights(1.0, 0.0)), DET, source, target, oracle, dino)
    b = StudentTrainer(_cfg(schedule=sched, weights=LossWeights(1.0, 0.0),
                            label_source=LabelSource("mean_teacher")), DET, source)
    a.run(3)
    b.run(3)
    assert serialize.state_digest(a.student) == serialize.state_digest(b.student)
    assert all(r.loss_sim == 0.0 and r.loss_det_t == 0.0 for r in a.history)


def test_breakdown_sums_and_isolation(data):
    source, target, dino, oracle = data
    tr = StudentTrainer(_cfg(), DET, source, target, oracle, dino)
    before = oracle.digest()
    for _ in range(4):
        rec = tr.train_step()
        assert rec.loss_total == pytest.approx(rec.loss_det_s + rec.loss_det_t + rec.loss_sim, abs=1e-6)
    assert [r.flags.code() for r in tr.history] == ["100", "110", "111", "111"]
    assert [r.provenance for r in tr.history] == ["none", "none", "dino", "dino"]
    assert oracle.digest() == before
    assert all(p.grad is None for p in tr.teacher.values())


def test_past_n_max(data):
    source, *_ = data
    tr = StudentTrainer(_cfg(schedule=TrainSchedule(0, 1, 1), weights=LossWeights(1.0, 0.0),
                             label_source=LabelSource("mean_teacher")), DET, source)
    tr.run()
    assert tr.iteration == 1
    with pytest.raises(ValueError):
        tr.train_step()


def test_checkpoint_resume_bit_identical(data, tmp_path):
    source, target, dino, oracle = data
    cfg = _cfg(label_source=LabelSource("ema_mixed", 4), lr=0.05)
    a = StudentTrainer(cfg, DET, source, target, oracle, dino)
    a.run(3)
    a.save(tmp_path / "ck")
    a.run(13)
    b = StudentTrainer(cfg, DET, source, target, oracle, dino)
    b.load(tmp_path / "ck")
    assert b.iteration == 3
    b.run(13)
    assert [r.row() for r in a.history[3:]] == [r.row() for r in b.history]
    assert [r.provenance for r in b.history] == ["dino"] * 2 + ["teacher", "dino"] * 4
    a.save(tmp_path / "a")
    b.save(tmp_path / "b")
    for name in ("manifest.json", "payload.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    b.write_logs(tmp_path / "logs")
    with open(tmp_path / "logs" / "label_sources.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iter", "source"] and rows[1] == ["3", "dino"] and rows[3] == ["5", "teacher"]


def test_checkpoint_missing_and_conflicting(data, tmp_path):
    source, target, dino, oracle = data
    tr = StudentTrainer(_cfg(), DET, source, target, oracle, dino)
    tr.save(tmp_path / "ck")
    tensors, meta = serialize.load_checkpoint(tmp_path / "ck")
    del tensors["proj/proj.fc2.bias"]
    serialize.save_checkpoint(tmp_path / "missing", tensors, meta)
    with pytest.raises(ConsistencyError, match="proj/proj.fc2.bias"):
        tr.load(tmp_path / "missing")
    wide = StudentTrainer(_cfg(proj_hidden=64), DET, source, target, oracle, dino)
    with pytest.raises(ConsistencyError) as exc:
        wide.load(tmp_path / "ck")
    msg = str(exc.value)
    assert "proj/proj.fc1.weight" in msg and "(64, 128)" in msg and "(64, 64)" in msg


def test_evaluate_uses_teacher(data):
    source, target, dino, oracle = data
    tr = StudentTrainer(_cfg(lr=0.05), DET, source, target, oracle, dino)
    tr.run(3)
    assert serialize.state_digest(tr.teacher) != serialize.state_digest(tr.student)
    ref = map50(predict(target.images, tr.teacher, DET), target.boxes, 3)
    assert tr.evaluate(target) == ref
