import math
import warnings
from collections import Counter

import numpy as np
import pytest
import torch
from scipy import stats

import oracles
from conftest import small_config
from socialtrans import training
from socialtrans.checkpoint import CheckpointError, load_container, save_container
from socialtrans.data import build_sequences
from socialtrans.model import SocialTrans, fuse, prepare_batch
from socialtrans.training import (SparseAdam, TrainingDiverged, batch_gradients, full_softmax_prob,
                                  load_checkpoint, sample_negatives, sampled_softmax_loss, save_checkpoint, train)


def test_sampled_loss_matches_full_softmax_when_j_is_everything_else():
    rng = np.random.default_rng(1)
    emb = torch.from_numpy(rng.normal(size=(11, 4)))
    h = torch.from_numpy(rng.normal(size=4))
    for v in range(1, 11):
        got = sampled_softmax_loss(h, [v], [j for j in range(1, 11) if j != v], emb).item()
        assert abs(got - oracles.full_softmax_nll(h.numpy(), emb.numpy(), v)) < 1e-12
        assert abs(got + math.log(full_softmax_prob(h, emb, v).item())) < 1e-12


def test_clashing_negative_is_ignored():
    rng = np.random.default_rng(2)
    emb = torch.from_numpy(rng.normal(size=(8, 4)))
    h = torch.from_numpy(rng.normal(size=(3, 4)))
    with_clash = sampled_softmax_loss(h, [1, 2, 3], [2, 5, 6], emb, reduction="none")
    assert with_clash[1].item() == pytest.approx(sampled_softmax_loss(h[1], [2], [5, 6], emb).item(), abs=1e-14)
    assert with_clash[0].item() == pytest.approx(sampled_softmax_loss(h[0], [1], [2, 5, 6], emb).item(), abs=1e-14)


def test_sampled_loss_is_stable_for_huge_logits():
    emb = torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    h = torch.tensor([1e4, 0.0], dtype=torch.float64)
    assert sampled_softmax_loss(h, [1], [2], emb).item() == 0.0
    assert sampled_softmax_loss(h, [2], [1], emb).item() == pytest.approx(1e4)


def test_reductions():
    rng = np.random.default_rng(3)
    emb = torch.from_numpy(rng.normal(size=(8, 4)))
    h = torch.from_numpy(rng.normal(size=(5, 4)))
    per = sampled_softmax_loss(h, [1, 2, 3, 4, 5], [6, 7], emb, reduction="none")
    assert sampled_softmax_loss(h, [1, 2, 3, 4, 5], [6, 7], emb).item() == pytest.approx(per.sum().item())
    assert sampled_softmax_loss(h, [1, 2, 3, 4, 5], [6, 7], emb, "mean").item() == pytest.approx(per.mean().item())


def test_sampled_loss_gradient_central_differences():
    rng = np.random.default_rng(4)
    emb = torch.from_numpy(rng.normal(size=(9, 3))).requires_grad_()
    h = torch.from_numpy(rng.normal(size=(4, 3))).requires_grad_()
    pos, neg = [1, 2, 3, 3], [4, 3, 8]
    gh, ge = torch.autograd.grad(sampled_softmax_loss(h, pos, neg, emb), [h, emb])
    f = lambda: float(sampled_softmax_loss(h, pos, neg, emb))
    with torch.no_grad():
        np.testing.assert_allclose(gh, oracles.central_differences(f, h.data.numpy()), rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(ge, oracles.central_differences(f, emb.data.numpy()), rtol=1e-6, atol=1e-9)


def test_negatives_distinct_sorted_and_never_pad():
    counts = np.array([100, 5, 1, 0, 9, 2])
    neg = sample_negatives(counts, 3, [0, 1])
    assert len(set(neg.tolist())) == 3 and neg.tolist() == sorted(neg.tolist())
    assert 0 not in neg and 3 not in neg
    assert np.array_equal(neg, sample_negatives(counts, 3, [0, 1]))


def test_negative_frequency_proportional_to_count():
    counts = {1: 1, 2: 2, 3: 3, 4: 4}
    seen = Counter()
    for s in range(6000):
        seen.update(sample_negatives(counts, 1, s).tolist())
    observed = np.array([seen[i] for i in range(1, 5)])
    assert stats.chisquare(observed, 6000 * np.arange(1, 5) / 10).pvalue > 1e-3


def test_too_many_negatives_warns_and_returns_all():
    with pytest.warns(UserWarning):
        assert sample_negatives({1: 2, 7: 1}, 5, 0).tolist() == [1, 7]


def test_adam_nan_gradient_names_tensor():
    p = torch.zeros(2, 2, dtype=torch.float64)
    opt = SparseAdam({"w_q": p})
    with pytest.raises(FloatingPointError, match="w_q"):
        opt.step({"w_q": torch.tensor([[0.0, float("nan")], [0, 0]], dtype=torch.float64)}, {"w_q": None})
    assert opt.step_count == 0 and not p.any()


def test_adam_matches_torch_adam_closely():
    rng = np.random.default_rng(5)
    init = rng.normal(size=(3, 4))
    mine = torch.from_numpy(init.copy())
    ref = torch.nn.Parameter(torch.from_numpy(init.copy()))
    opt_ref = torch.optim.Adam([ref], lr=0.01)
    opt = SparseAdam({"p": mine}, lr=0.01)
    for _ in range(20):
        g = torch.from_numpy(rng.normal(size=(3, 4)))
        opt.step({"p": g}, {"p": None})
        ref.grad = g.clone()
        opt_ref.step()
    np.testing.assert_allclose(mine.numpy(), ref.detach().numpy(), rtol=1e-12, atol=1e-14)


def test_fuse_is_linear_in_concatenation():
    w = torch.arange(12, dtype=torch.float64).reshape(2, 6)
    a, b = torch.ones(3, dtype=torch.float64), torch.full((3,), 2.0, dtype=torch.float64)
    assert fuse(a, b, w).tolist() == (w @ torch.cat([a, b])).tolist()


def test_checkpoint_roundtrip_and_byte_stability(tmp_path, four_node):
    log, graph = four_node
    cfg = small_config()
    result = train(cfg, log, graph, out_dir=tmp_path / "a")
    model, cfg2, meta, opt = load_checkpoint(tmp_path / "a" / "checkpoint.bin")
    assert cfg2 == cfg and meta["n_items"] == 6 and meta["step"] == result.optimizer.step_count
    for (k, x), (_, y) in zip(result.model.state_dict().items(), model.state_dict().items()):
        assert torch.equal(x, y), k
    for k in opt.m:
        assert torch.equal(opt.m[k], result.optimizer.m[k])
    save_checkpoint(tmp_path / "b.bin", model, opt, cfg2, {"epoch": 0, "n_users": log.n_users})
    assert (tmp_path / "b.bin").read_bytes() == (tmp_path / "a" / "checkpoint.bin").read_bytes()


def test_container_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope" + bytes(20))
    with pytest.raises(CheckpointError):
        load_container(tmp_path / "x.bin")
    save_container(tmp_path / "y.bin", {"a": np.arange(6, dtype=np.int64).reshape(2, 3)}, {"k": 1}, {"m": 2})
    tensors, config, meta = load_container(tmp_path / "y.bin")
    assert tensors["a"].tolist() == [[0, 1, 2], [3, 4, 5]] and config == {"k": 1} and meta == {"m": 2}
    raw = (tmp_path / "y.bin").read_bytes()
    (tmp_path / "z.bin").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_container(tmp_path / "z.bin")


def test_pad_row_never_moves_and_untouched_items_frozen(four_node):
    log, graph = four_node
    cfg = small_config(epochs=3)
    sub = log.subset(log.items != 6)  # item 6 never appears, so it is never a target or negative
    init = SocialTrans(6, cfg).item_emb.detach().clone()
    result = train(cfg, sub, graph, n_items=6)
    emb = result.model.item_emb.detach()
    assert torch.all(emb[0] == 0)
    assert torch.equal(emb[6], init[6])
    assert not torch.equal(emb[1], init[1])


def test_worker_count_does_not_change_gradients(synth_small):
    _, log, graph = synth_small
    cfg = small_config(l_G=1, fanouts=(3,), dropout=0.1, shard_size=4)
    model = SocialTrans(log.n_items, cfg)
    model.train()
    pairs = build_sequences(log, cfg.m)[:16]
    seqs, targets = [p[0] for p in pairs], [p[1] for p in pairs]
    out = [batch_gradients(model, seqs, targets, np.array([1, 2, 3]), log, graph, cfg, 5, [0, 4, 0, 0], w)
           for w in (1, 3)]
    for k in out[0][0]:
        assert torch.equal(out[0][0][k], out[1][0][k]), k
    assert out[0][1] == out[1][1]


def test_sharded_gradient_equals_unsharded_sum(synth_small):
    _, log, graph = synth_small
    cfg = small_config(l_G=1, fanouts=(3,))
    model = SocialTrans(log.n_items, cfg)
    pairs = build_sequences(log, cfg.m)[:12]
    seqs, targets = [p[0] for p in pairs], [p[1] for p in pairs]
    whole, loss_w, _ = batch_gradients(model, seqs, targets, np.array([2, 4]), log, graph, cfg, 1, [0])
    sharded, loss_s, _ = batch_gradients(model, seqs, targets, np.array([2, 4]), log, graph,
                                         cfg.replace(shard_size=5), 1, [0])
    for k in whole:
        torch.testing.assert_close(whole[k], sharded[k], rtol=1e-12, atol=1e-14)
    assert loss_w == pytest.approx(loss_s, rel=1e-12)


def test_training_reduces_loss_and_writes_log(tmp_path, synth_small):
    _, log, graph = synth_small
    cfg = small_config(l_G=1, fanouts=(3,), epochs=4, lr=0.01, negatives=5)
    result = train(cfg, log, graph, out_dir=tmp_path)
    assert result.epoch_losses[-1] < result.epoch_losses[0]
    rows = (tmp_path / "train_log.tsv").read_text().splitlines()
    assert [r.split("\t")[0] for r in rows] == ["0", "1", "2", "3"]


def test_divergence_reports_last_good_checkpoint(tmp_path, four_node, monkeypatch):
    log, graph = four_node
    cfg = small_config(epochs=3)
    real = training.sampled_softmax_loss
    calls = {"n": 0}

    def flaky(h, pos, neg, emb, reduction="sum"):
        calls["n"] += 1
        out = real(h, pos, neg, emb, reduction)
        return out * float("nan") if calls["n"] > 2 else out

    monkeypatch.setattr(training, "sampled_softmax_loss", flaky)
    with pytest.raises(TrainingDiverged) as exc:
        train(cfg.replace(batch_size=100), log, graph, out_dir=tmp_path)
    assert exc.value.last_good == str(tmp_path / "checkpoint.bin")


@pytest.mark.parametrize("variant", ["transformer_only", "gat_only"])
def test_variants_only_update_their_parameters(four_node, variant):
    log, graph = four_node
    cfg = small_config(variant=variant, epochs=2)
    before = {k: v.clone() for k, v in SocialTrans(6, cfg).state_dict().items()}
    after = train(cfg, log, graph).model.state_dict()
    moved = {k for k in before if not torch.equal(before[k], after[k])}
    if variant == "transformer_only":
        assert moved and all(k.startswith("transformer.") for k in moved)
    else:
        assert "transformer.item_emb" in moved and "w_f" in moved
        assert not any(k.startswith("transformer.layers") or k == "transformer.pos_emb" for k in moved)


def test_gat_only_personal_is_mean_item_embedding(four_node):
    log, graph = four_node
    model = SocialTrans(6, small_config(variant="gat_only"))
    items = torch.tensor([[0, 0, 2, 3, 5]])
    want = model.item_emb[[2, 3, 5]].mean(0)
    assert torch.allclose(model.personal(items)[0], want, atol=1e-15)


def test_friend_windows_exclude_the_future(four_node):
    log, graph = four_node
    cfg = small_config()
    seq = log.window_before(0, 4, cfg.m)
    batch = prepare_batch([seq], log, graph, cfg, 0)
    for node, row in batch.index[0].items():
        if node != 0:
            items, times = log.history(node)
            want = items[times < 4][-cfg.m:]
            got = batch.seq_items[row].numpy()
            assert got[got != 0].tolist() == want.tolist()
