import math

import numpy as np
import pytest
import torch

from pgpsam.errors import DimensionError
from pgpsam.numerics import grad_check, make_rng
from pgpsam.ppr import (
    PrototypeBank,
    PrototypeSet,
    ProgressiveRefinement,
    assemble_prototypes,
    class_attention_weights,
    fused_feature,
    gather_rows,
    query_attention_weights,
    refine_prototypes,
    scatter_update,
)

from oracles import np_, randn, softmax_vec, topk_sort_oracle


def make_refiner(c=4, n=2, h=4, w=4, k=1, seed=0):
    return ProgressiveRefinement(c, n, h, w, k, make_rng(seed))


def randomize_(module, seed):
    g = np.random.default_rng(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.from_numpy(g.normal(0, 0.7, p.shape)))


def class_attention_oracle(F_I, F_M, ca):
    F_I, F_M = np_(F_I), np_(F_M)
    h, w, _ = F_I.shape
    wf, bf = np_(ca.feat_conv.weight)[0], np_(ca.feat_conv.bias)[0]
    wm, bm = np_(ca.class_conv.weight)[0], np_(ca.class_conv.bias)[0]
    rw, rb = np_(ca.row_fc.weight)[0], np_(ca.row_fc.bias)[0]
    cw, cb = np_(ca.col_fc.weight)[0], np_(ca.col_fc.bias)[0]
    ow, ob = np_(ca.out_conv.weight)[:, 0], np_(ca.out_conv.bias)
    fi = [[sum(F_I[i, j] * wf) + bf for j in range(w)] for i in range(h)]
    fm = [[sum(F_M[i, j] * wm) + bm for j in range(w)] for i in range(h)]
    rows = [sum(fi[i][j] * rw[j] for j in range(w)) + rb for i in range(h)]
    cols = [sum(fm[i][j] * cw[i] for i in range(h)) + cb for j in range(w)]
    out = np.zeros((h, w, len(ob)))
    for i in range(h):
        for j in range(w):
            out[i, j] = softmax_vec(ow * (rows[i] * cols[j]) + ob)
    return out


def refine_oracle(stacked, F_I, F_M, p):
    F_I, F_M = np_(F_I), np_(F_M)
    h, w, c = F_I.shape
    n, s, _ = stacked.shape
    P = np_(stacked).reshape(n * s, c)
    wfu, bfu = np_(p.fuse.weight), np_(p.fuse.bias)
    fused = np.array([[wfu @ np.concatenate([F_I[i, j], F_M[i, j]]) + bfu for j in range(w)] for i in range(h)])
    fused = fused.reshape(h * w, c)
    wc = class_attention_oracle(F_I, F_M, p.class_attention).reshape(h * w, n * s).T
    a, b = p.mix_a.item(), p.mix_b.item()
    out = np.zeros((n * s, c))
    for q in range(n * s):
        wq = softmax_vec([sum(P[q, t] * fused[x, t] for t in range(c)) / math.sqrt(c) for x in range(h * w)])
        wcn = wc[q] / sum(wc[q])
        for x in range(h * w):
            out[q] += (a * wcn[x] + b * wq[x]) * fused[x]
    return out.reshape(n, s, c)


# ---------------------------------------------------------------- assembly

def test_assemble_self_similarity():
    bank = PrototypeBank(2, 5, alpha=8, k_select=1, rng=make_rng(0))
    with torch.no_grad():
        bank.inter[3] = bank.intra[0]
        bank.inter[11] = bank.intra[1]
    asm = assemble_prototypes(bank)
    assert asm.selected_indices.tolist() == [[3], [11]]
    for n in range(2):
        assert torch.equal(asm.stacked[n, 0], bank.intra[n])
        assert torch.equal(asm.stacked[n, 1], bank.intra[n])


def test_assemble_shape_law():
    bank = PrototypeBank(2, 6, alpha=8, k_select=3, rng=make_rng(1))
    assert bank.pool_size == 16
    asm = assemble_prototypes(bank)
    assert tuple(asm.stacked.shape) == (2, 4, 6)
    assert tuple(asm.selected_indices.shape) == (2, 3)
    for row in asm.selected_indices.tolist():
        assert len(set(row)) == 3
    assert tuple(asm.flat.shape) == (8, 6)


def test_assemble_matches_sort_oracle():
    for seed in range(25):
        bank = PrototypeBank(3, 4, alpha=8, k_select=2, rng=make_rng(seed))
        asm = assemble_prototypes(bank)
        assert asm.selected_indices.tolist() == topk_sort_oracle(bank.intra, bank.inter, 2).tolist()
        for n in range(3):
            assert torch.equal(asm.stacked[n, 0], bank.intra[n])
            for j, q in enumerate(asm.selected_indices[n]):
                assert torch.equal(asm.stacked[n, j + 1], bank.inter[q])


def test_selection_is_detached_but_gathered_rows_carry_gradient():
    bank = PrototypeBank(2, 3, alpha=2, k_select=2, rng=make_rng(2))
    asm = assemble_prototypes(bank)
    assert not asm.selected_indices.requires_grad
    asm.stacked.sum().backward()
    assert bank.inter.grad is not None and bank.intra.grad is not None


# ---------------------------------------------------------------- class attention

def test_class_attention_sums_to_one(rng):
    p = make_refiner()
    randomize_(p, 1)
    wc = class_attention_weights(randn(rng, 4, 4, 4), randn(rng, 4, 4, 2), p.class_attention)
    assert tuple(wc.shape) == (4, 4, p.n_slots)
    assert torch.allclose(wc.sum(-1), torch.ones(4, 4), atol=1e-6)


def test_class_attention_zeroed_final_conv_is_uniform(rng):
    p = make_refiner(k=3)
    with torch.no_grad():
        p.class_attention.out_conv.weight.zero_()
        p.class_attention.out_conv.bias.zero_()
    wc = class_attention_weights(randn(rng, 4, 4, 4), randn(rng, 4, 4, 2), p.class_attention)
    assert torch.allclose(wc, torch.full_like(wc, 1 / 8), atol=1e-15)


def test_class_attention_matches_composition(rng):
    p = make_refiner(c=4, n=2, k=1)
    randomize_(p, 2)
    F_I, F_M = randn(rng, 4, 4, 4), randn(rng, 4, 4, 2)
    got = class_attention_weights(F_I, F_M, p.class_attention).detach().numpy()
    np.testing.assert_allclose(got, class_attention_oracle(F_I, F_M, p.class_attention), atol=1e-10)


def test_class_attention_spatial_mismatch(rng):
    p = make_refiner()
    with pytest.raises(DimensionError):
        class_attention_weights(randn(rng, 4, 4, 4), randn(rng, 4, 3, 2), p.class_attention)


# ---------------------------------------------------------------- refinement

def _assembled(n=2, c=4, alpha=8, k=1, seed=0):
    bank = PrototypeBank(n, c, alpha=alpha, k_select=k, rng=make_rng(seed), std=1.0)
    return bank, assemble_prototypes(bank)


def test_refine_constant_feature_collapses(rng):
    p = make_refiner(k=1)
    v = torch.tensor([0.3, -1.2, 2.0, 0.5])
    with torch.no_grad():
        p.fuse.weight.zero_()
        p.fuse.bias.copy_(v)
        p.mix_a.fill_(0.7)
        p.mix_b.fill_(1.9)
    _, asm = _assembled()
    out = refine_prototypes(asm, randn(rng, 4, 4, 4), randn(rng, 4, 4, 2), p)
    expected = (0.7 + 1.9) * v
    assert torch.allclose(out, expected.expand_as(out), atol=1e-13)


def test_refine_null_mixing_is_zero(rng):
    p = make_refiner(k=1)
    _, asm = _assembled()
    out = refine_prototypes(asm, randn(rng, 4, 4, 4), randn(rng, 4, 4, 2), p, mix_a=0.0, mix_b=0.0)
    assert torch.equal(out, torch.zeros_like(out))


def test_refine_matches_loop_oracle(rng):
    for trial in range(3):
        p = make_refiner(c=4, n=2, k=1, seed=trial)
        randomize_(p, 10 + trial)
        _, asm = _assembled(seed=trial)
        F_I, F_M = randn(rng, 4, 4, 4), randn(rng, 4, 4, 2)
        got = refine_prototypes(asm, F_I, F_M, p).detach().numpy()
        np.testing.assert_allclose(got, refine_oracle(asm.stacked, F_I, F_M, p), atol=1e-10)


def test_query_attention_rows_stochastic(rng):
    w = query_attention_weights(randn(rng, 6, 4), randn(rng, 16, 4))
    assert torch.allclose(w.sum(-1), torch.ones(6), atol=1e-6)


def test_refine_wrong_slot_count(rng):
    p = make_refiner(k=2)
    _, asm = _assembled(k=1)
    with pytest.raises(DimensionError):
        refine_prototypes(asm, randn(rng, 4, 4, 4), randn(rng, 4, 4, 2), p)


# ---------------------------------------------------------------- scatter

def test_scatter_zero_update_is_identity():
    bank = PrototypeBank(2, 3, alpha=4, k_select=2, rng=make_rng(3))
    asm = assemble_prototypes(bank)
    out = scatter_update(bank, torch.zeros(2, 3, 3), asm.selected_indices)
    assert torch.equal(out.intra, bank.intra) and torch.equal(out.inter, bank.inter)


def test_scatter_gather_round_trip_disjoint(rng):
    bank = PrototypeBank(2, 3, alpha=4, k_select=2, rng=make_rng(4))
    idx = torch.tensor([[0, 5], [2, 7]])
    refined = randn(rng, 2, 3, 3)
    out = scatter_update(bank, refined, idx)
    delta = gather_rows(out.inter, idx) - gather_rows(bank.inter, idx)
    # (a + r) - a need not be bitwise r; compare against the same float ops
    expected = gather_rows(bank.inter, idx) + refined[:, 1:] - gather_rows(bank.inter, idx)
    assert torch.equal(delta, expected)
    assert torch.equal(out.intra, bank.intra + refined[:, 0])
    untouched = [q for q in range(8) if q not in (0, 5, 2, 7)]
    assert torch.equal(out.inter[untouched], bank.inter[untouched])


def test_scatter_collision_accumulates():
    bank = PrototypeBank(2, 2, alpha=2, k_select=1, rng=make_rng(5))
    idx = torch.tensor([[1], [1]])
    refined = torch.tensor([[[0.0, 0.0], [1.0, 2.0]], [[0.0, 0.0], [10.0, 20.0]]])
    out = scatter_update(bank, refined, idx)
    oracle = np_(bank.inter).copy()
    for n in range(2):
        oracle[idx[n, 0]] += np_(refined[n, 1])
    np.testing.assert_allclose(out.inter.detach().numpy(), oracle, atol=1e-15)
    assert torch.equal(out.inter[[0, 2, 3]], bank.inter[[0, 2, 3]])


def test_scatter_out_of_range():
    bank = PrototypeBank(2, 2, alpha=2, k_select=1, rng=make_rng(5))
    with pytest.raises(IndexError):
        scatter_update(bank, torch.zeros(2, 2, 2), torch.tensor([[0], [4]]))


def test_scatter_does_not_mutate_bank(rng):
    bank = PrototypeBank(2, 3, alpha=4, k_select=2, rng=make_rng(6))
    before = bank.inter.detach().clone()
    scatter_update(bank, randn(rng, 2, 3, 3), torch.tensor([[0, 1], [1, 2]]))
    assert torch.equal(bank.inter, before)


def test_batched_scatter_per_sample(rng):
    base = PrototypeSet(randn(rng, 2, 3), randn(rng, 6, 3))
    idx = torch.tensor([[[0, 1], [2, 3]], [[5, 4], [1, 1]]])
    refined = randn(rng, 2, 2, 3, 3)
    out = scatter_update(base, refined, idx)
    for b in range(2):
        single = scatter_update(base, refined[b], idx[b])
        assert torch.allclose(out.inter[b], single.inter, atol=1e-15)
        assert torch.allclose(out.intra[b], single.intra, atol=1e-15)


# ---------------------------------------------------------------- end to end

def test_ppr_forward_grad_check(rng):
    torch.manual_seed(0)
    refiner = make_refiner(c=4, n=2, h=3, w=3, k=2, seed=7)
    bank = PrototypeBank(2, 4, alpha=4, k_select=2, rng=make_rng(8), std=0.5)
    F_I = randn(rng, 3, 3, 4, requires_grad=True)
    F_M = randn(rng, 3, 3, 2, requires_grad=True)
    target_a, target_b = randn(rng, 2, 4), randn(rng, 8, 4)

    def loss():
        out, _, _ = refiner(bank.as_set(), F_I, F_M)
        return (out.intra * target_a).sum() + (out.inter * target_b).sum()

    params = [F_I, F_M, bank.intra, bank.inter, *refiner.parameters()]
    report = grad_check(loss, params)
    assert report.passed(1e-4), report
