import numpy as np
import pytest
import torch
from torch import nn

from oracles import coupling_oracle
from samus.apg import (
    AutoPromptGenerator,
    CouplingBlock,
    DenseHead,
    FeatureRefresh,
    TokenUpdate,
)


def test_coupling_matches_loop_oracle():
    torch.manual_seed(0)
    block = CouplingBlock(6).double()
    a = torch.randn(2, 3, 6, dtype=torch.float64)
    b = torch.randn(2, 5, 6, dtype=torch.float64)
    out = block(a, b)
    assert out.shape == (2, 3, 6)
    for i in range(2):
        expected = coupling_oracle(
            a[i].numpy(),
            b[i].numpy(),
            block.wq.weight.numpy(force=True),
            block.wk.weight.numpy(force=True),
            block.wv.weight.numpy(force=True),
            block.mlp[0].weight.numpy(force=True),
            block.mlp[0].bias.numpy(force=True),
            block.mlp[2].weight.numpy(force=True),
            block.mlp[2].bias.numpy(force=True),
        )
        assert np.abs(out[i].numpy(force=True) - expected).max() < 1e-12


def test_coupling_keeps_query_token_count():
    torch.manual_seed(1)
    block = CouplingBlock(4)
    assert block(torch.randn(1, 7, 4), torch.randn(1, 2, 4)).shape == (1, 7, 4)


def test_coupling_width_check():
    block = CouplingBlock(4)
    with pytest.raises(ValueError, match="width"):
        block(torch.randn(1, 3, 5), torch.randn(1, 3, 4))


def test_coupling_projections_have_no_bias():
    block = CouplingBlock(4)
    assert block.wq.bias is None and block.wk.bias is None and block.wv.bias is None


def test_token_update_composition():
    torch.manual_seed(2)
    upd = TokenUpdate(6)
    task = torch.randn(2, 3, 6)
    out = torch.randn(2, 5, 6)
    new_task, new_out = upd(task, out)
    assert new_task.shape == task.shape and new_out.shape == out.shape
    t_q = upd.task_inner_q(task, out)
    t_k = upd.task_inner_k(out, task)
    expected_task = upd.task_combine(upd.task_outer(t_q, t_k)) + task
    o_q = upd.out_inner_q(out, task)
    o_k = upd.out_inner_k(task, out)
    expected_out = upd.out_combine(upd.out_outer(o_q, o_k)) + out
    assert torch.allclose(new_task, expected_task)
    assert torch.allclose(new_out, expected_out)


def test_token_update_blocks_are_independent():
    upd = TokenUpdate(6)
    blocks = [
        upd.task_inner_q,
        upd.task_inner_k,
        upd.task_outer,
        upd.out_inner_q,
        upd.out_inner_k,
        upd.out_outer,
    ]
    assert len({id(b) for b in blocks}) == 6
    weights = [b.wq.weight for b in blocks]
    for i in range(len(weights)):
        for j in range(i + 1, len(weights)):
            assert not torch.equal(weights[i], weights[j])


def test_feature_refresh_has_no_residual():
    torch.manual_seed(3)
    refresh = FeatureRefresh(6)
    # silence both outer blocks: their MLP output layer is the only path out
    with torch.no_grad():
        for outer in (refresh.feat_outer, refresh.tok_outer):
            outer.mlp[2].weight.zero_()
            outer.mlp[2].bias.zero_()
    feat = torch.randn(1, 9, 6)
    tokens = torch.randn(1, 4, 6)
    new_feat, new_tokens = refresh(feat, tokens)
    assert torch.equal(new_feat, torch.zeros_like(feat))
    assert torch.equal(new_tokens, torch.zeros_like(tokens))


def test_token_update_residual_survives_zeroed_blocks():
    torch.manual_seed(4)
    upd = TokenUpdate(6)
    with torch.no_grad():
        upd.task_combine.weight.zero_()
        upd.out_combine.weight.zero_()
    task = torch.randn(1, 2, 6)
    out = torch.randn(1, 5, 6)
    new_task, new_out = upd(task, out)
    assert torch.equal(new_task, task)
    assert torch.equal(new_out, out)


def test_dense_head_shape():
    torch.manual_seed(5)
    head = DenseHead(8)
    assert head(torch.randn(2, 8, 4, 4)).shape == (2, 8, 4, 4)
    mids = [c.weight.shape[0] for c in head.convs]
    assert mids == [2, 2, 2, 8]


def _generator(dim=8, k=3, num_tasks=2, seed=0):
    torch.manual_seed(seed)
    return AutoPromptGenerator(dim, task_token_count=k, num_tasks=num_tasks)


def test_generate_shapes():
    apg = _generator()
    emb = torch.randn(2, 4, 4, 8)
    out_tokens = torch.randn(5, 8)
    bundle = apg(emb, torch.tensor([0, 1]), out_tokens)
    assert bundle.sparse.shape == (2, 3, 8)
    assert bundle.dense.shape == (2, 8, 4, 4)
    assert bundle.embedding.shape == (2, 4, 4, 8)


def test_task_ids_select_different_banks():
    apg = _generator()
    emb = torch.randn(1, 4, 4, 8).repeat(2, 1, 1, 1)
    out_tokens = torch.randn(5, 8)
    bundle = apg(emb, torch.tensor([0, 1]), out_tokens)
    # outputs sit at a tiny scale under fresh init, so compare bitwise
    assert not torch.equal(bundle.sparse[0], bundle.sparse[1])
    same = apg(emb, torch.tensor([1, 1]), out_tokens)
    assert torch.equal(same.sparse[0], same.sparse[1])


def test_task_id_validation():
    apg = _generator(num_tasks=2)
    emb = torch.randn(2, 4, 4, 8)
    toks = torch.randn(5, 8)
    with pytest.raises(ValueError, match="task_ids of shape"):
        apg(emb, torch.tensor([0]), toks)
    with pytest.raises(ValueError, match="out of range"):
        apg(emb, torch.tensor([0, 2]), toks)
    with pytest.raises(ValueError, match="out of range"):
        apg(emb, torch.tensor([-1, 0]), toks)


def test_embedding_width_check():
    apg = _generator(dim=8)
    with pytest.raises(ValueError, match="width"):
        apg(torch.randn(1, 4, 4, 6), torch.tensor([0]), torch.randn(5, 6))


def test_num_tasks_must_be_positive():
    with pytest.raises(ValueError, match="at least one task"):
        AutoPromptGenerator(8, task_token_count=2, num_tasks=0)


def test_output_tokens_receive_no_gradient():
    apg = _generator()
    emb = torch.randn(1, 4, 4, 8, requires_grad=True)
    out_tokens = nn.Parameter(torch.randn(5, 8))
    bundle = apg(emb, torch.tensor([0]), out_tokens)
    (bundle.sparse.sum() + bundle.dense.sum()).backward()
    assert out_tokens.grad is None
    assert apg.task_bank.grad is not None
    assert emb.grad is not None


def test_task_bank_shape():
    apg = _generator(dim=8, k=3, num_tasks=4)
    assert apg.task_bank.shape == (4, 3, 8)
