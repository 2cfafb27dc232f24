import numpy as np
import pytest
import torch

from incseg.errors import CheckpointError, ConfigError, InvalidInputError
from incseg.labelspace import LabelSpace
from incseg.model import (
    ArchConfig,
    Checkpoint,
    build_model,
    expand_classifier,
    forward,
    freeze_teacher,
    param_count,
)

ARCH = ArchConfig(levels=3, width=4)
SPACE = LabelSpace([[1, 2], [3], [4, 5]])


def trained_like(seed=0, t=0):
    """A stage model whose head is no longer all zeros."""
    m = build_model(ARCH, SPACE, t, seed)
    g = torch.Generator().manual_seed(seed + 99)
    with torch.no_grad():
        m.head.weight.copy_(torch.randn(m.head.weight.shape, generator=g))
        m.head.bias.copy_(torch.randn(m.head.bias.shape, generator=g))
    return m.eval()


def test_zero_head_gives_uniform_softmax():
    m = build_model(ARCH, SPACE, 0, seed=3).eval()
    p = torch.softmax(m(torch.randn(2, 1, 16, 16)), 1)
    np.testing.assert_allclose(p.detach().numpy(), 1 / 3, atol=1e-7)


def test_forward_is_deterministic():
    x = torch.randn(2, 1, 16, 16, generator=torch.Generator().manual_seed(5))
    a = forward(trained_like(7), x)
    b = forward(trained_like(7), x)
    assert torch.equal(a, b)


def test_output_shape_matches_input():
    m = trained_like()
    out = m(torch.randn(3, 1, 24, 32))
    assert out.shape == (3, SPACE.num_channels(0), 24, 32)


def test_bad_shape_names_divisor():
    with pytest.raises(InvalidInputError, match="divisible by 4"):
        trained_like()(torch.randn(1, 1, 18, 16))


def test_three_dimensional():
    m = build_model(ArchConfig(levels=2, width=4, dims=3), SPACE, 1, 0)
    assert m(torch.randn(1, 1, 8, 8, 8)).shape == (1, 4, 8, 8, 8)


def test_arch_validation():
    with pytest.raises(ConfigError):
        ArchConfig(levels=5)
    with pytest.raises(ConfigError):
        ArchConfig(dims=1)


@pytest.mark.parametrize("k", [1, 2])
def test_expansion_splits_background_evenly(k):
    old = trained_like(1)
    new = expand_classifier(old, k)
    assert new.num_classes == old.num_classes + k
    x = torch.randn(100, 1, 8, 8, generator=torch.Generator().manual_seed(k))
    with torch.no_grad():
        z_old, z_new = old(x), new(x)
    p_old, p_new = torch.softmax(z_old, 1), torch.softmax(z_new, 1)
    n = old.num_classes
    share = p_old[:, :1] / (k + 1)
    np.testing.assert_allclose(p_new[:, :1].numpy(), share.numpy(), atol=1e-6)
    for j in range(k):
        np.testing.assert_allclose(p_new[:, n + j : n + j + 1].numpy(), share.numpy(), atol=1e-6)
    np.testing.assert_allclose(p_new[:, 1:n].numpy(), p_old[:, 1:n].numpy(), atol=1e-6)
    assert torch.equal(z_new[:, 1:n], z_old[:, 1:n])


def test_expansion_leaves_source_untouched():
    old = trained_like(2)
    before = {k: v.clone() for k, v in old.state_dict().items()}
    new = expand_classifier(old, 2)
    for k, v in old.state_dict().items():
        assert torch.equal(v, before[k])
    n = old.num_classes
    assert torch.equal(new.head.weight[1:n], old.head.weight[1:n])
    assert torch.equal(new.head.bias[1:n], old.head.bias[1:n])


def test_parameter_bookkeeping():
    m0 = trained_like()
    m1 = expand_classifier(m0, 1)
    m2 = expand_classifier(m1, 2)
    width = m0.head.in_channels
    assert param_count(m1) == param_count(m0) + 1 * (width + 1)
    assert param_count(m2) == param_count(m1) + 2 * (width + 1)


def test_teacher_frozen_through_student_updates():
    student = expand_classifier(trained_like(4), 1)
    teacher = freeze_teacher(trained_like(4))
    x = torch.randn(2, 1, 8, 8)
    before = teacher(x).clone()
    assert not before.requires_grad
    opt = torch.optim.SGD(student.parameters(), lr=0.1)
    for _ in range(3):
        opt.zero_grad()
        student(x).pow(2).mean().backward()
        opt.step()
    assert torch.equal(teacher(x), before)
    assert teacher(x).shape[1] == student(x).shape[1] - 1


def test_teacher_matches_student_old_channels_after_expansion():
    base = trained_like(5)
    teacher, student = freeze_teacher(base), expand_classifier(base, 2).eval()
    x = torch.randn(2, 1, 8, 8)
    with torch.no_grad():
        s = student(x)
    n = teacher.num_classes
    assert torch.equal(teacher(x)[:, 1:], s[:, 1:n])


def test_no_teacher_at_stage_zero():
    assert freeze_teacher(None) is None


class TestCheckpoint:
    def make(self):
        return Checkpoint(0, SPACE.truncate(0), trained_like(8),
                          {"seed": 8, "epochs": 1, "config_hash": "abc", "parent_hash": None})

    def test_byte_roundtrip(self, tmp_path):
        ck = self.make()
        ck.save(tmp_path / "a.ckpt")
        back = Checkpoint.load(tmp_path / "a.ckpt")
        back.save(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert back.space == ck.space and back.meta == ck.meta
        x = torch.randn(1, 1, 8, 8)
        with torch.no_grad():
            assert torch.equal(back.model.eval()(x), ck.model(x))

    def test_bad_magic(self):
        data = bytearray(self.make().to_bytes())
        data[0] ^= 0xFF
        with pytest.raises(CheckpointError, match="magic"):
            Checkpoint.from_bytes(bytes(data))

    def test_truncated(self):
        data = self.make().to_bytes()
        with pytest.raises(CheckpointError, match="truncated"):
            Checkpoint.from_bytes(data[:-10])

    def test_header_lists_blocks(self):
        ck = self.make()
        names = [b[0] for b in ck.header()["blocks"]]
        assert "head.weight" in names and "encoders.0.conv1.weight" in names
