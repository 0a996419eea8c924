import pytest
import torch
from hypothesis import given, settings, strategies as st

from freqadapt import compute as C
from freqadapt.segnet import (STUDENT, TEACHER, CheckpointMismatch, Segmentor, ema_update, init_from_source,
                              init_segmentor, seg_forward, source_params)


def _x(n=2, h=16, w=16, seed=0):
    return torch.rand(n, 1, h, w, generator=torch.Generator().manual_seed(seed))


@pytest.mark.parametrize("norm", [False, True])
def test_zero_head_gives_uniform_probabilities(norm):
    seg = init_segmentor(0, num_classes=3, norm=norm)
    with torch.no_grad():
        seg.student.head.weight.zero_()
        seg.student.head.bias.zero_()
    _, p = seg_forward(seg, _x())
    assert torch.allclose(p, torch.full_like(p, 1 / 3))


def test_student_and_teacher_agree_after_init():
    seg = init_segmentor(1)
    x = _x()
    zs, ps = seg_forward(seg, x, STUDENT)
    zt, pt = seg_forward(seg, x, TEACHER)
    assert (ps - pt).abs().max() < 1e-6
    assert torch.equal(zs, zt)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
def test_embedding_shape_and_normalisation(n, hq, wq):
    seg = init_segmentor(2, base_width=4)
    z, p = seg_forward(seg, torch.rand(n, 1, 4 * hq, 4 * wq))
    assert z.shape == (n, seg.embed_dim) == (n, 16)
    assert torch.allclose(p.sum(dim=1), torch.ones(n, 4 * hq, 4 * wq), atol=1e-5)


def test_indivisible_input_rejected():
    with pytest.raises(ValueError, match="divisible by 4"):
        seg_forward(init_segmentor(0), torch.zeros(1, 1, 6, 8))
    with pytest.raises(ValueError):
        seg_forward(init_segmentor(0), torch.zeros(1, 1, 8, 8), "nobody")


def test_teacher_output_is_detached():
    seg = init_segmentor(0)
    z, p = seg_forward(seg, _x(), TEACHER)
    assert not z.requires_grad and not p.requires_grad
    z, p = seg_forward(seg, _x(), STUDENT)
    assert z.requires_grad and p.requires_grad


def test_encoder_is_shared():
    seg = init_segmentor(0)
    seg.teacher.head.bias.data += 1.0  # decoders differ, encoder features must not
    x = _x()
    zs, _ = seg_forward(seg, x, STUDENT)
    zt, _ = seg_forward(seg, x, TEACHER)
    assert torch.equal(zs, zt)
    assert len(list(seg.encoder.parameters())) > 0


def test_init_from_source_copies_exactly():
    src = init_segmentor(7)
    seg = init_from_source(source_params(src))
    for a, b in zip(seg.teacher.parameters(), seg.student.parameters()):
        assert torch.equal(a, b)
    for (k, a), b in zip(src.state_dict().items(), seg.state_dict().values()):
        if k.startswith(("encoder.", "student.")):
            assert torch.equal(a, b)
    x = _x()
    assert torch.equal(seg_forward(seg, x, STUDENT)[1], seg_forward(src, x, STUDENT)[1])


def test_init_from_source_lists_offending_tensors():
    params = source_params(init_segmentor(0, base_width=4))
    with pytest.raises(CheckpointMismatch) as err:
        init_from_source(params, base_width=8)
    assert any("encoder.levels.0.a.weight" in p and "(4, 1, 3, 3)" in p for p in err.value.problems)
    del params["student.head.bias"]
    with pytest.raises(CheckpointMismatch, match="student.head.bias: missing"):
        init_from_source(params, base_width=4)


def test_ema_examples():
    t, s = torch.nn.Linear(1, 1), torch.nn.Linear(1, 1)
    with torch.no_grad():
        for p in t.parameters():
            p.fill_(1.0)
        for p in s.parameters():
            p.fill_(0.0)
    ema_update(t, s, 1.0)
    assert t.weight.item() == 1.0
    ema_update(t, s, 0.9995)
    assert t.weight.item() == pytest.approx(0.9995)
    for _ in range(9):
        ema_update(t, s, 0.9995)
    assert t.weight.item() == pytest.approx(0.9995 ** 10, rel=1e-6)
    ema_update(t, s, 0.0)
    assert t.weight.item() == 0.0
    with pytest.raises(ValueError):
        ema_update(t, s, 1.5)


def test_ema_fixed_point_and_geometric_decay(f64):
    seg = init_segmentor(0).double()
    before = [p.clone() for p in seg.teacher.parameters()]
    ema_update(seg.teacher, seg.student, 0.3)
    assert all(torch.allclose(a, b, rtol=1e-15, atol=1e-15) for a, b in zip(before, seg.teacher.parameters()))
    with torch.no_grad():
        for p in seg.teacher.parameters():
            p.add_(1.0)
    d0 = torch.cat([(t - s).flatten() for t, s in zip(seg.teacher.parameters(), seg.student.parameters())]).norm()
    k, eta = 25, 0.9
    for _ in range(k):
        ema_update(seg.teacher, seg.student, eta)
    dk = torch.cat([(t - s).flatten() for t, s in zip(seg.teacher.parameters(), seg.student.parameters())]).norm()
    assert float(dk / d0) == pytest.approx(eta ** k, rel=1e-9)


def test_ema_is_off_the_tape():
    seg = init_segmentor(0)
    ema_update(seg.teacher, seg.student, 0.5)
    assert all(p.grad_fn is None for p in seg.teacher.parameters())


def test_seeded_init_is_deterministic():
    assert C.fingerprint(init_segmentor(3).parameters()) == C.fingerprint(init_segmentor(3).parameters())
    with pytest.raises(ValueError):
        Segmentor(levels=0)
