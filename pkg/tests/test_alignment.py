import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from arralab.alignment import (
    LAMBDA_GRID,
    AlignmentConfig,
    ProjectionHead,
    alignment_mask,
    composite_loss,
    gva_loss,
    per_position_losses,
    project,
    select_alignment_positions,
)
from arralab.armodel import BOI, EOI, IMAGE, REP, TEXT, build_sequence
from arralab.errors import ConfigError, ShapeError
from arralab.numerics import finite_difference_check, verification_mode
from arralab.tokenizers import TextVocab


def _seq(mechanism, n_image=16, words="a red square at top left"):
    v = TextVocab()
    ids, mask = v.encode_padded(words)
    return build_sequence(ids, np.arange(n_image) + 100, mechanism, v, n_image, mask)


def test_position_counts():
    hyb = select_alignment_positions(_seq("HYBNEXT"), "HYBNEXT")
    assert len(hyb) == 16
    seq = _seq("HYBNEXT")
    assert seq.roles[hyb[0]] == BOI and seq.roles[hyb[-1] + 1] == IMAGE
    assert seq.roles[hyb[-1] + 2] == EOI
    rep_seq = _seq("REP")
    rep = select_alignment_positions(rep_seq, "REP")
    assert len(rep) == 1 and rep_seq.roles[rep[0]] == REP
    assert len(select_alignment_positions(_seq("none"), "none")) == 0
    with pytest.raises(ValueError):
        select_alignment_positions(_seq("HYBNEXT"), "REP")


def test_role_audit_random_layouts():
    v = TextVocab()
    rng = np.random.default_rng(0)
    for _ in range(100):
        n_words = int(rng.integers(1, v.max_len))
        text = np.full(v.max_len, v.pad_id)
        text[:n_words] = rng.integers(len(v.tokens) - 5, len(v.tokens), n_words)
        side = int(rng.integers(1, 9))
        mech = ("HYBNEXT", "REP")[int(rng.integers(0, 2))]
        seq = build_sequence(text, rng.integers(100, 164, side * side), mech, v, side * side)
        pos = select_alignment_positions(seq, mech)
        if mech == "HYBNEXT":
            want = [t for t in range(len(seq) - 1) if seq.roles[t + 1] == IMAGE]
            assert pos.tolist() == want and len(pos) == side * side
        else:
            assert pos.tolist() == [int(np.flatnonzero(seq.roles == REP)[0])]
        assert not np.isin(seq.roles[np.minimum(pos + 1, len(seq) - 1)], [TEXT]).any()


def test_projection_shapes_and_zero():
    head = ProjectionHead("mlp2", 128, 32)
    assert project(torch.randn(1, 128), head).shape == (1, 32)
    for p in head.parameters():
        torch.nn.init.zeros_(p)
    assert torch.equal(head(torch.randn(3, 128)), torch.zeros(3, 32))
    with pytest.raises(ShapeError):
        head(torch.randn(1, 64))
    with pytest.raises(ConfigError):
        ProjectionHead("maxpool", 128, 48)
    with pytest.raises(ConfigError):
        ProjectionHead("attention", 128, 32)


def test_maxpool_windows():
    head = ProjectionHead("maxpool", 8, 2)
    assert list(head.parameters()) == []
    h = torch.tensor([[1.0, 5.0, 2.0, 0.0, -1.0, -3.0, 7.0, 6.0]])
    assert head(h).tolist() == [[5.0, 7.0]]


def test_gva_examples():
    cfg = AlignmentConfig(depth=1)
    head = ProjectionHead("maxpool", 4, 4)
    target = torch.tensor([[1.0, 0.0, 0.0, 0.0]])
    parallel = torch.tensor([[[3.0, 0.0, 0.0, 0.0]]])
    orth = torch.tensor([[[0.0, 2.0, 0.0, 0.0]]])
    assert gva_loss([None, parallel], [0], target, cfg, head).item() == pytest.approx(0.0, abs=1e-7)
    assert gva_loss([None, orth], [0], target, cfg, head).item() == pytest.approx(1.0, abs=1e-7)
    both = torch.cat([parallel, torch.tensor([[[1.0, 1.0, 0.0, 0.0]]])], 1)
    a = 1 - 3 / 3
    b = 1 - 1 / np.sqrt(2)
    got = gva_loss([None, both], [0, 1], target, cfg, head).item()
    assert got == pytest.approx((a + b) / 2, abs=1e-7)
    mse = AlignmentConfig(depth=1, objective="mse")
    got = gva_loss([None, both], [0, 1], target, mse, head).item()
    assert got == pytest.approx(((4 + 0) / 4 + (0 + 1) / 4) / 2, abs=1e-7)


def test_gva_uses_configured_depth():
    head = ProjectionHead("maxpool", 2, 2)
    target = torch.tensor([[1.0, 0.0]])
    layers = [torch.tensor([[[0.0, 1.0]]]), torch.tensor([[[1.0, 0.0]]])]
    assert gva_loss(layers, [0], target, AlignmentConfig(depth=1), head).item() == pytest.approx(0)
    assert gva_loss(layers, [0], target, AlignmentConfig(depth=0), head).item() == pytest.approx(1)


def test_gva_batched_targets_and_errors():
    head = ProjectionHead("maxpool", 2, 2)
    h = torch.tensor([[[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]]])
    targets = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    mask = np.array([[True, False], [True, False]])
    assert gva_loss([None, h], mask, targets, AlignmentConfig(), head).item() == pytest.approx(0)
    with pytest.raises(ValueError):
        gva_loss([None, h], np.zeros((2, 2), bool), targets, AlignmentConfig(), head)
    with pytest.raises(ShapeError):
        gva_loss([None, h], mask, torch.ones(2, 3), AlignmentConfig(), head)


@pytest.mark.parametrize("objective", ["cosine", "mse"])
def test_gva_gradient_through_mlp2(objective):
    gen = torch.Generator().manual_seed(0)
    with verification_mode():
        head = ProjectionHead("mlp2", 16, 8).double()
        hidden = torch.randn(2, 5, 16, generator=gen, dtype=torch.float64)
        target = torch.nn.functional.normalize(torch.randn(2, 8, generator=gen, dtype=torch.float64), dim=-1)
        cfg = AlignmentConfig(objective=objective)
        pos = [1, 2, 4]
        params = {k: v.detach().clone() for k, v in head.named_parameters()}
        params["hidden"] = hidden

        def graph(p):
            h = {k: v for k, v in p.items() if k != "hidden"}
            with torch.nn.utils.stateless._reparametrize_module(head, h):
                return gva_loss([None, p["hidden"]], pos, target, cfg, head)

        assert finite_difference_check(graph, params).max_rel_err < 1e-4


def test_composite_examples():
    cfg = AlignmentConfig(lam=1.0)
    assert composite_loss(2.0, 0.5, 0.0, cfg) == 2.5
    ar, gva, z = torch.tensor(1.7), torch.tensor(0.3), torch.tensor(4.0)
    assert torch.equal(composite_loss(ar, gva, z, AlignmentConfig(lam=0.0)), ar + 1e-5 * z)
    assert torch.equal(composite_loss(ar, None, z, AlignmentConfig(mechanism="none")), ar + 1e-5 * z)
    assert torch.equal(composite_loss(ar, gva, z, AlignmentConfig(mechanism="none")), ar + 0.0 * gva + 1e-5 * z)
    assert LAMBDA_GRID == (0.5, 0.8, 1.0, 1.5, 2.0)
    assert AlignmentConfig().lam == 1.0 and AlignmentConfig().depth == 1


def test_dlambda_equals_gva():
    gen = torch.Generator().manual_seed(0)
    ar, gva, z = torch.rand(3, generator=gen, dtype=torch.float64)
    lam = torch.tensor(0.8, dtype=torch.float64, requires_grad=True)
    total = composite_loss(ar, gva, z, AlignmentConfig(lam=lam))
    (grad,) = torch.autograd.grad(total, lam)
    assert grad.item() == gva.item()


@given(
    arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)),
    arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)),
)
@settings(max_examples=100, deadline=None)
def test_loss_bounds(a, b):
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    cos = per_position_losses(a, b, "cosine")
    assert bool(((cos >= -1e-12) & (cos <= 2 + 1e-12)).all())
    assert bool((per_position_losses(a, b, "mse") >= 0).all())


def test_config_validation():
    AlignmentConfig().validate(4)
    for bad in (
        AlignmentConfig(depth=5),
        AlignmentConfig(depth=0),
        AlignmentConfig(lam=-0.1),
        AlignmentConfig(mechanism="REPA"),
        AlignmentConfig(encoder="vision_only", aggregation="cls"),
        AlignmentConfig(objective="kl"),
    ):
        with pytest.raises(ConfigError):
            bad.validate(4)
    AlignmentConfig(encoder="vision_only", aggregation="avgpool").validate(4)
    d = AlignmentConfig(lam=1.5).to_dict()
    assert d["lambda"] == 1.5 and AlignmentConfig.from_dict(d) == AlignmentConfig(lam=1.5)


def test_mask_matches_positions():
    seq = _seq("HYBNEXT")
    assert np.flatnonzero(alignment_mask(seq.roles, "HYBNEXT")).tolist() == select_alignment_positions(
        seq, "HYBNEXT"
    ).tolist()
    batch = np.stack([seq.roles, seq.roles])
    assert alignment_mask(batch, "HYBNEXT").sum() == 32
