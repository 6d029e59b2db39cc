import numpy as np
import pytest
import torch

from mafs.checkpoint import ENCODER_GROUPS, Checkpoint
from mafs.config import load_config
from mafs.errors import ConfigError
from mafs.imaging import synth_dataset
from mafs.losses import TaskWeights
from mafs.models import JointNet, Teacher, TeacherConfig
from mafs.training import (
    evaluate_segmentation,
    infer_fuse,
    infer_segment,
    init_from_stage1,
    load_joint,
    load_teacher,
    make_batch,
    pretrain_stage1,
    stage2_step,
    teacher_checkpoint,
    train_stage2,
    train_teacher,
)

SMALL = [
    "data.size=32",
    "data.num_classes=3",
    "train.crop=32",
    "train.batch_size=2",
    "train.mask_patch=8",
    "train.stage1_epochs=3",
    "train.stage2_epochs=3",
    "train.teacher_epochs=5",
    "net.base_channels=8",
    "net.level_channels=(8, 8, 8, 8)",
    "net.head_channels=8",
    "net.mst_heads=2",
]


@pytest.fixture(scope="module")
def cfg():
    return load_config(overrides=SMALL)


@pytest.fixture(scope="module")
def data(cfg):
    return synth_dataset(2, 32, 32, cfg.data.num_classes, 5)


@pytest.fixture(scope="module")
def stage1(cfg, data):
    return pretrain_stage1(cfg, data)


@pytest.fixture(scope="module")
def teacher(cfg):
    torch.manual_seed(0)
    return Teacher.builtin(TeacherConfig(cfg.net.num_classes, 8))


def test_make_batch_shapes(data):
    vi, ir, lab = make_batch(data, 32, None, augment=False)
    assert vi.shape == (2, 3, 32, 32) and ir.shape == (2, 1, 32, 32) and lab.shape == (2, 32, 32)
    assert torch.equal(vi[0], torch.from_numpy(data[0][0].visible).permute(2, 0, 1))


def test_stage1_first_loss_positive_and_resume_bit_identical(cfg, data):
    reports = []
    ck = pretrain_stage1(cfg, data, reports=reports)
    assert np.isfinite(reports[0].total) and reports[0].total > 0
    assert ck.meta["step"] == 3
    cut = load_config(overrides=SMALL + ["train.max_steps=1"])
    partial = pretrain_stage1(cut, data)
    partial = Checkpoint.from_bytes(partial.to_bytes())
    resumed = []
    ck2 = pretrain_stage1(cfg, data, resume=partial, reports=resumed)
    assert [r.to_json() for r in resumed] == [r.to_json() for r in reports[1:]]
    for k, v in ck.weights.items():
        assert torch.equal(ck2.weights[k], v), k


def test_resume_rejects_wrong_kind(cfg, data, stage1):
    bad = Checkpoint("stage2", stage1.net_config, stage1.weights, meta={"step": 0})
    with pytest.raises(ConfigError):
        pretrain_stage1(cfg, data, resume=bad)


def test_init_loads_only_encoder(cfg, stage1):
    torch.manual_seed(123)
    model = JointNet(cfg.net)
    fresh = {k: v.clone() for k, v in model.state_dict().items()}
    init_from_stage1(model, stage1, cfg)
    state = model.state_dict()
    for k, v in state.items():
        if k.startswith("encoder."):
            assert torch.equal(v, stage1.weights[k])
        else:
            assert torch.equal(v, fresh[k]), k
    assert not any(k.startswith("de_rec.") for k in state)
    with pytest.raises(ConfigError):
        init_from_stage1(model, Checkpoint("stage1", stage1.net_config, stage1.subset(["SFE"])), cfg)
    assert set(stage1.subset(ENCODER_GROUPS)) == {k for k in state if k.startswith("encoder.")}


def test_stage2_recombination_teacher_frozen_and_dwa(cfg, data, stage1, teacher):
    before = teacher_checkpoint(teacher).to_bytes()
    reports = []
    ck = train_stage2(cfg, data, stage1, teacher, reports=reports)
    assert teacher_checkpoint(teacher).to_bytes() == before
    assert len(reports) == 3
    for r in reports:
        assert r.recombine() == pytest.approx(r.total, rel=1e-6)
        assert r.weights["lambda_f"] + r.weights["lambda_s"] == pytest.approx(2.0, abs=1e-6)
    assert reports[0].weights == {"lambda_f": 1.0, "lambda_s": 1.0}
    assert "task_weights" in ck.meta and ck.groups() >= {"De_fus", "De_seg"}


def test_stage2_class_mismatch(cfg, data, stage1):
    wrong = Teacher.builtin(TeacherConfig(cfg.net.num_classes + 1, 8))
    with pytest.raises(ConfigError):
        train_stage2(cfg, data, stage1, wrong)
    with pytest.raises(ConfigError):
        train_stage2(cfg, [(p, None) for p, _ in data], stage1, Teacher.builtin(TeacherConfig(3, 8)))


def test_teacher_sees_detached_fused_image(cfg, data, teacher):
    model = JointNet(cfg.net)
    vi, ir, lab = make_batch(data, 32, None, augment=False)
    total, _, _ = stage2_step(model, teacher, vi, ir, lab, TaskWeights(), cfg)
    total.backward()
    assert all(p.grad is None for p in teacher.module.parameters())


def test_teacher_training_and_round_trip(cfg, data, tmp_path):
    with pytest.warns(RuntimeWarning):
        t = train_teacher(load_config(overrides=SMALL + ["train.teacher_target_acc=1.0"]), data)
    assert t.train_accuracy > 0
    ck = teacher_checkpoint(t)
    ck.save(tmp_path / "t.ckpt")
    again = load_teacher(tmp_path / "t.ckpt")
    assert again.digest() == t.digest()
    assert again(torch.rand(1, 3, 32, 32)).shape == (1, cfg.net.num_classes, 32, 32)
    with pytest.raises(ConfigError):
        train_teacher(cfg, [(p, None) for p, _ in data])


def test_inference_contracts(cfg, data, stage1, teacher, tmp_path):
    ck = train_stage2(cfg, data, stage1, teacher)
    path = ck.save(tmp_path / "s2.ckpt")
    pair = data[0][0]
    rgb = infer_fuse(path, pair)
    assert rgb.shape == (32, 32, 3) and rgb.min() >= 0 and rgb.max() <= 1
    assert np.array_equal(rgb, infer_fuse(path, pair))
    seg = infer_segment(path, pair)
    assert seg.data.max() < cfg.net.num_classes
    assert np.array_equal(seg.data, infer_segment(path, pair).data)
    per_class, m, acc = evaluate_segmentation(path, data)
    assert 0 <= m <= 1 and 0 <= acc <= 1
    with pytest.raises(ConfigError):
        load_joint(stage1)
