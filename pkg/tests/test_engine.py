import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from incseg import engine
from incseg.engine import (
    ExperimentPlan,
    ShiftStudy,
    StageConfig,
    ensure_stage,
    retention_of,
    run_plan,
    run_shift_study,
    shift_study_plans,
    train_plan_stage,
    train_stage,
)
from incseg.errors import ConfigError, DataError
from incseg.labelspace import LabelSpace
from incseg.losses import LossWeights
from incseg.model import ArchConfig, Checkpoint, freeze_teacher
from incseg.phantomdata import PhantomSpec, write_dataset
from incseg.reporting import NoResultsError, report

ARCH = ArchConfig(levels=3, width=4)
SMALL = PhantomSpec(grid=(32, 32))
COUNTS = {"train": 8, "val": 2, "test": 3}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    return {c: str(write_dataset(root, SMALL.with_(seed=20 + c), [c], COUNTS, f"D{c}").parent)
            for c in (1, 2, 3)}


def make_plan(data, out, strategy="MiB", classes=(1, 2), cache=None, **kw):
    kw = {"epochs": 2, "batch_size": 4, "lr": 1e-2, **kw}
    stages = [StageConfig((c,), data[c], strategy=strategy, **kw) for c in classes]
    return ExperimentPlan(stages, str(out), ARCH, cache_dir=str(cache) if cache else None)


def state(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def test_runs_are_deterministic(data, tmp_path):
    a = run_plan(make_plan(data, tmp_path / "a"))
    b = run_plan(make_plan(data, tmp_path / "b"))
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    assert a.histories == b.histories
    for pa, pb in zip(a.checkpoints, b.checkpoints):
        assert pa.read_bytes() == pb.read_bytes()


def test_trajectory_of_five_steps(data):
    cfg = StageConfig((1,), data[1], epochs=3, batch_size=2, lr=1e-2)
    res = train_stage(cfg, None, LabelSpace([[1]]), 0, ARCH, max_steps=5)
    assert len(res.history) == 5
    assert all(math.isfinite(h["total"]) for h in res.history)
    assert res.checkpoint.meta["steps"] == 5
    again = train_stage(cfg, None, LabelSpace([[1]]), 0, ARCH, max_steps=5)
    assert again.history == res.history


def test_zero_steps_keeps_teacher_prediction(data):
    space = LabelSpace([[1], [2]])
    s0 = train_stage(StageConfig((1,), data[1], epochs=1, batch_size=4, lr=1e-2), None, space, 0, ARCH)
    s1 = train_stage(StageConfig((2,), data[2], epochs=1), s0.checkpoint, space, 1, ARCH, max_steps=0)
    teacher = freeze_teacher(s0.checkpoint.model)
    x = torch.randn(3, 1, 32, 32, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        p_old = torch.softmax(teacher(x), 1)
        p_new = torch.softmax(s1.checkpoint.model(x), 1)
    np.testing.assert_allclose(p_new[:, 1].numpy(), p_old[:, 1].numpy(), atol=1e-6)
    np.testing.assert_allclose((p_new[:, 0] + p_new[:, 2]).numpy(), p_old[:, 0].numpy(), atol=1e-6)
    assert s1.history == []


def test_dataset_access_is_confined(data):
    cfg = StageConfig((1,), data[1], epochs=1, batch_size=4)
    res = train_stage(cfg, None, LabelSpace([[1]]), 0, ARCH, max_steps=1)
    assert set(res.accessed) == {engine._manifest_path(data[1])}


def test_zero_corr_weight_is_exactly_mib(data, tmp_path):
    mib = run_plan(make_plan(data, tmp_path / "mib", "MiB"))
    w = LossWeights(corr=0.0)
    zero = run_plan(make_plan(data, tmp_path / "zero", "MiB+CORR", weights=w))
    for hm, hz in zip(mib.histories[1], zero.histories[1]):
        assert hm["total"] == hz["total"] and hm["seg"] == hz["seg"] and hm["kd"] == hz["kd"]
    sm = state(Checkpoint.load(mib.checkpoints[1]).model)
    sz = state(Checkpoint.load(zero.checkpoints[1]).model)
    assert all(torch.equal(sm[k], sz[k]) for k in sm)


def test_corr_weight_changes_training(data, tmp_path):
    mib = run_plan(make_plan(data, tmp_path / "mib", "MiB"))
    corr = run_plan(make_plan(data, tmp_path / "corr", "MiB+CORR"))
    assert mib.histories[0] == corr.histories[0]
    assert mib.histories[1] != corr.histories[1]


def test_resume_skips_completed_stages(data, tmp_path, monkeypatch):
    plan = make_plan(data, tmp_path / "p")
    first = run_plan(plan)
    before = [p.read_bytes() for p in first.checkpoints]

    def boom(*a, **k):
        raise AssertionError("should not retrain")

    monkeypatch.setattr(engine, "train_stage", boom)
    second = run_plan(plan)
    assert [p.read_bytes() for p in second.checkpoints] == before
    assert second.histories == first.histories
    with pytest.raises(AssertionError):
        run_plan(plan, force=True)


def test_interrupted_stage_is_retrained(data, tmp_path):
    plan = make_plan(data, tmp_path / "p")
    run_plan(plan)
    (tmp_path / "p/stage_1.done").unlink()
    ref = (tmp_path / "p/stage_1.ckpt").read_bytes()
    (tmp_path / "p/stage_1.ckpt").write_bytes(b"partial")
    run_plan(plan)
    assert (tmp_path / "p/stage_1.ckpt").read_bytes() == ref


def test_tampered_checkpoint_detected(data, tmp_path):
    plan = make_plan(data, tmp_path / "p")
    res = run_plan(plan)
    good = res.checkpoints[0].read_bytes()
    ck = Checkpoint.load(res.checkpoints[0])
    with torch.no_grad():
        ck.model.head.bias.add_(1.0)
    ck.save(res.checkpoints[0])
    # the marker hash no longer matches, so stage 0 is rebuilt
    run_plan(plan)
    assert res.checkpoints[0].read_bytes() == good


def test_parent_hash_mismatch(data, tmp_path):
    plan = make_plan(data, tmp_path / "p")
    res = run_plan(plan)
    prev = Checkpoint.load(res.checkpoints[0])
    with pytest.raises(DataError, match="parent hash"):
        ensure_stage(plan, 1, prev, "0" * 64)
    meta = Checkpoint.load(res.checkpoints[1]).meta
    assert meta["parent_hash"] == engine.file_hash(res.checkpoints[0])


def test_stage_zero_shared_through_cache(data, tmp_path, monkeypatch):
    cache = tmp_path / "cache"
    a = run_plan(make_plan(data, tmp_path / "a", "MiB", cache=cache))
    calls = []
    real = engine.train_stage

    def spy(cfg, prev, space, t, *a, **k):
        calls.append(t)
        return real(cfg, prev, space, t, *a, **k)

    monkeypatch.setattr(engine, "train_stage", spy)
    b = run_plan(make_plan(data, tmp_path / "b", "FT", cache=cache))
    assert calls == [1]
    assert a.checkpoints[0].read_bytes() == b.checkpoints[0].read_bytes()


def test_per_epoch_log(data, tmp_path):
    run_plan(make_plan(data, tmp_path / "p"))
    lines = (tmp_path / "p/stage_1.log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[-1])
    assert set(rec["loss"]) >= {"seg", "kd", "total"} and "2" in rec["val_dice"]


class TestErrors:
    def test_dataset_labels_other_classes(self, data):
        cfg = StageConfig((2,), data[1], epochs=1)
        with pytest.raises(DataError, match="introduces"):
            train_stage(cfg, None, LabelSpace([[2]]), 0, ARCH)

    def test_missing_previous(self, data):
        with pytest.raises(ConfigError):
            train_stage(StageConfig((2,), data[2]), None, LabelSpace([[1], [2]]), 1, ARCH)

    def test_label_space_mismatch(self, data):
        space = LabelSpace([[1]])
        s0 = train_stage(StageConfig((1,), data[1], epochs=1), None, space, 0, ARCH, max_steps=1)
        wrong = LabelSpace([[3], [2]])
        with pytest.raises(ConfigError, match="does not match"):
            train_stage(StageConfig((2,), data[2]), s0.checkpoint, wrong, 1, ARCH)

    def test_classes_disagree_with_space(self, data):
        with pytest.raises(ConfigError):
            train_stage(StageConfig((1,), data[1]), None, LabelSpace([[2]]), 0, ARCH)

    def test_train_stage_needs_previous_on_disk(self, data, tmp_path):
        plan = make_plan(data, tmp_path / "p")
        with pytest.raises(DataError, match="not been completed"):
            train_plan_stage(plan, 1)
        with pytest.raises(ConfigError):
            train_plan_stage(plan, 5)

    def test_bad_stage_config(self, data):
        with pytest.raises(ConfigError):
            StageConfig((1,), data[1], strategy="ILT")
        with pytest.raises(ConfigError):
            StageConfig((1,), data[1], epochs=0)
        with pytest.raises(ConfigError):
            ExperimentPlan([], "x")


def test_train_plan_stage_in_order(data, tmp_path):
    plan = make_plan(data, tmp_path / "p")
    c0 = train_plan_stage(plan, 0)
    c1 = train_plan_stage(plan, 1)
    assert (c0.stage, c1.stage) == (0, 1)
    assert c1.space.stages == ((1,), (2,))
    ref = run_plan(make_plan(data, tmp_path / "q"))
    assert (tmp_path / "p/stage_1.ckpt").read_bytes() == ref.checkpoints[1].read_bytes()


def test_plan_json_roundtrip(data, tmp_path):
    d = make_plan(data, tmp_path / "out").to_dict()
    d["output_dir"] = "out"
    (tmp_path / "plan.json").write_text(json.dumps(d))
    plan = ExperimentPlan.load(tmp_path / "plan.json")
    assert plan.output_dir == str((tmp_path / "out").resolve())
    assert plan.stages == make_plan(data, tmp_path / "out").stages
    d["schema_version"] = 9
    (tmp_path / "bad.json").write_text(json.dumps(d))
    with pytest.raises(ConfigError):
        ExperimentPlan.load(tmp_path / "bad.json")


STUDY = ShiftStudy(
    phantom=SMALL,
    stage_classes=((1,), (2,)),
    counts=COUNTS,
    deltas=(0.0, 0.8),
    strategies=("FT", "MiB"),
    arch=ARCH,
    first={"epochs": 2, "batch_size": 4, "lr": 1e-2},
    later={"epochs": 1, "batch_size": 4, "lr": 1e-2},
)


@pytest.fixture(scope="module")
def study_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("study")
    run_shift_study(STUDY, root)
    return root


def test_shift_study_table(study_root):
    lines = (study_root / "shift_study.csv").read_text().splitlines()
    assert lines[0] == "strategy,delta,class,dice_stage0,dice_stage1,retention"
    assert len(lines) == 1 + 2 * 2 * 1
    assert {l.split(",")[0] for l in lines[1:]} == {"FT", "MiB"}


def test_shift_study_is_deterministic(study_root, tmp_path):
    run_shift_study(STUDY, tmp_path)
    assert (tmp_path / "shift_study.csv").read_bytes() == (study_root / "shift_study.csv").read_bytes()


def test_zero_shift_matches_plain_plan(study_root, tmp_path):
    plan = shift_study_plans(STUDY, study_root)[(0.0, "MiB")]
    plain = replace(plan, output_dir=str(tmp_path / "plain"), cache_dir=None)
    rows = retention_of(run_plan(plain), [1])
    csv_row = [l for l in (study_root / "shift_study.csv").read_text().splitlines()
               if l.startswith("MiB,0.000,")][0]
    assert csv_row.split(",")[-1] == f"{rows[0]['retention']:.6f}"


class TestReport:
    def test_empty_dir(self, tmp_path):
        with pytest.raises(NoResultsError):
            report(tmp_path)

    def test_regeneration_is_byte_identical(self, study_root, tmp_path):
        a = report(study_root, tmp_path / "a")
        b = report(study_root, tmp_path / "b")
        names = sorted(p.name for p in a.iterdir())
        assert "retention_vs_shift.png" in names and "comparison.md" in names
        for n in names:
            assert (a / n).read_bytes() == (b / n).read_bytes(), n
        assert "Exploratory" in (a / "shift_study.md").read_text()

    def test_each_triple_once(self, study_root, tmp_path):
        out = report(study_root, tmp_path / "r")
        rows = (out / "comparison.csv").read_text().splitlines()[1:]
        keys = [tuple(r.split(",")[:3]) for r in rows]
        assert len(keys) == len(set(keys)) and len(keys) > 0

    def test_duplicate_names_rejected(self, data, tmp_path):
        run_plan(make_plan(data, tmp_path / "r/x"))
        run_plan(make_plan(data, tmp_path / "r/y"))
        with pytest.raises(DataError, match="duplicate"):
            report(tmp_path / "r")


def test_shift_verdict_without_stage_zero_dice(tmp_path):
    (tmp_path / "shift_study.csv").write_text(
        "strategy,delta,class,dice_stage0,dice_stage1,retention\n"
        "MiB,0.000,1,0.000000,0.000000,nan\nMiB,1.000,1,0.000000,0.000000,nan\n")
    out = report(tmp_path)
    assert "MiB: retention is undetermined" in (out / "shift_study.md").read_text()
