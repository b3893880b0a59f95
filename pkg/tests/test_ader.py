import math

import pytest
import torch

from mdst.ader import (DecodedAnswer, pool_tokens, rank_of_candidate,
                       score_candidates)
from mdst.encoder import pad_batch, tokenize
from mdst.errors import ContractError
from mdst.vocab import EOS

from conftest import small_vocab, tiny_model
from oracles import cross_entropy_sum, rank_with_ties_reference


def setup_decoder(seed=0, **kw):
    model = tiny_model(seed=seed, **kw)
    vocab = small_vocab()
    return model, vocab


def fused_for(model, vocab, text="what color is it ?"):
    seq = tokenize(text, vocab)
    ids, mask = pad_batch([seq])
    reps = model.text_encoder(ids, mask)
    return reps, mask


def test_forced_eos_yields_empty_answer():
    model, vocab = setup_decoder()
    dec = model.ader.decoder
    with torch.no_grad():
        dec.head.weight.zero_()
        dec.head.bias.zero_()
        dec.head.bias[EOS] = 50.0
    fused, mask = fused_for(model, vocab)
    answers = dec.greedy_decode(fused, mask, max_len=5)
    assert len(answers[0]) == 0
    assert answers[0].ids == []
    assert answers[0].reps.shape[0] == 0
    assert not answers[0].truncated
    assert len(answers[0].step_logprobs) == 1  # the EOS step


def test_uniform_logits_give_log_vocab_per_step():
    model, vocab = setup_decoder()
    dec = model.ader.decoder
    with torch.no_grad():
        dec.head.weight.zero_()
        dec.head.bias.zero_()
    fused, mask = fused_for(model, vocab)
    gold = tokenize("yes it is", vocab)
    gold_ids, gold_mask = pad_batch([gold])
    out = dec.teacher_forward(fused, mask, gold_ids, gold_mask)
    V = model.config.vocab_size  # the head distributes over the model vocab
    L = len(gold) - 1  # predicted positions: 3 content tokens + EOS
    assert L == 4
    steps = out["step_logprobs"][0][out["target_mask"][0]]
    for lp in steps.tolist():
        assert lp == pytest.approx(-math.log(V), abs=1e-12)
    assert float(out["nll_sum"][0]) == pytest.approx(L * math.log(V), abs=1e-9)


def test_forced_gold_probability_one_gives_zero_loss():
    model, vocab = setup_decoder()
    dec = model.ader.decoder
    gold = tokenize("yes", vocab)
    gold_ids, gold_mask = pad_batch([gold])
    with torch.no_grad():
        dec.head.weight.zero_()
        dec.head.bias.zero_()
        # saturate each target step: position 0 predicts "yes", position 1 EOS
        yes_id = gold.ids[1]
        dec.head.bias[yes_id] = 60.0
    fused, mask = fused_for(model, vocab)
    out = dec.teacher_forward(fused, mask, gold_ids, gold_mask)
    # step 0 hits probability ~1 for "yes"; rig EOS afterwards instead
    with torch.no_grad():
        dec.head.bias.zero_()
    # construct exact case: vocab-wide zero logits except huge on the gold
    # token of every step is not expressible with a bias alone when gold
    # tokens differ, so assert the first step only.
    assert float(out["step_logprobs"][0][0]) == pytest.approx(0.0, abs=1e-9)


def test_answer_nll_matches_loop_cross_entropy():
    model, vocab = setup_decoder(seed=3)
    dec = model.ader.decoder
    fused, mask = fused_for(model, vocab, "is there a dog ?")
    gold = tokenize("no it is blue", vocab)
    gold_ids, gold_mask = pad_batch([gold])
    out = dec.teacher_forward(fused, mask, gold_ids, gold_mask)
    logits = out["logits"][0].detach().numpy()
    targets = gold_ids[0, 1:].tolist()
    ref = cross_entropy_sum(logits, targets)
    assert float(out["nll_sum"][0]) == pytest.approx(ref, abs=1e-6)
    nll_sum, nll_mean = dec.answer_nll(fused, mask, gold_ids, gold_mask)
    assert float(nll_mean[0]) == pytest.approx(ref / len(targets), abs=1e-6)


def test_step1_teacher_and_greedy_agree():
    model, vocab = setup_decoder(seed=5)
    dec = model.ader.decoder
    fused, mask = fused_for(model, vocab)
    gold = tokenize("red", vocab)
    gold_ids, gold_mask = pad_batch([gold])
    out = dec.teacher_forward(fused, mask, gold_ids, gold_mask)
    step1_argmax = int(out["logits"][0, 0].argmax())
    answers = dec.greedy_decode(fused, mask, max_len=4)
    first = answers[0].ids[0] if answers[0].ids else EOS
    assert step1_argmax == first


def test_greedy_decode_deterministic():
    model, vocab = setup_decoder(seed=7)
    fused, mask = fused_for(model, vocab)
    a1 = model.ader.decoder.greedy_decode(fused, mask, max_len=6)
    a2 = model.ader.decoder.greedy_decode(fused, mask, max_len=6)
    assert a1[0].ids == a2[0].ids
    assert a1[0].step_logprobs == a2[0].step_logprobs


def test_truncation_flag_set_without_eos():
    model, vocab = setup_decoder()
    dec = model.ader.decoder
    content_id = 5
    with torch.no_grad():
        dec.head.weight.zero_()
        dec.head.bias.zero_()
        dec.head.bias[content_id] = 50.0
    fused, mask = fused_for(model, vocab)
    answers = dec.greedy_decode(fused, mask, max_len=4)
    assert answers[0].truncated
    assert answers[0].ids == [content_id] * 4
    assert answers[0].reps.shape == (4, model.config.d_model)


def test_decoded_answer_rep_row_contract():
    with pytest.raises(ContractError):
        DecodedAnswer(ids=[5, 6], reps=torch.zeros(1, 4))


# --- candidate scoring -------------------------------------------------------

def test_rank_of_candidate_tie_rule():
    scores = torch.tensor([1.0, 2.0, 2.0, 0.5])
    assert rank_of_candidate(scores, 1) == 1
    assert rank_of_candidate(scores, 2) == 2  # tied, higher index
    assert rank_of_candidate(scores, 0) == 3
    assert rank_of_candidate(scores, 3) == 4
    ref = [rank_with_ties_reference(scores.tolist(), i) for i in range(4)]
    assert ref == [3, 1, 2, 4]


def test_matching_vector_ranks_first():
    # one candidate vector equals the pooled question vector, the rest are
    # orthogonal with zero dot product
    q_vec = [1.0, 0.0, 0.0]
    cands = [[0.0, 1.0, 0.0]] * 50 + [[1.0, 0.0, 0.0]] + [[0.0, 0.0, 1.0]] * 49
    scores = torch.tensor([sum(a * b for a, b in zip(q_vec, c)) for c in cands])
    assert rank_of_candidate(scores, 50) == 1


def test_identical_candidates_rank_by_index():
    model, vocab = setup_decoder(seed=11)
    fused, mask = fused_for(model, vocab)
    seqs = [tokenize("yes", vocab)] * 100
    cand_ids, cand_mask = pad_batch(seqs)
    for gt in (0, 3, 99):
        result = score_candidates(fused[0], mask[0], cand_ids, cand_mask,
                                  model.ader.candidates, gt)
        assert result.gt_rank == gt + 1


def test_candidate_count_contract():
    model, vocab = setup_decoder()
    fused, mask = fused_for(model, vocab)
    seqs = [tokenize("yes", vocab)] * 99
    cand_ids, cand_mask = pad_batch(seqs)
    with pytest.raises(ContractError, match="100"):
        score_candidates(fused[0], mask[0], cand_ids, cand_mask,
                         model.ader.candidates, 0)


def test_candidate_permutation_invariance():
    vocab2 = small_vocab(extra=["answer"] + [str(i) for i in range(100)])
    model = tiny_model(seed=13, vocab_size=len(vocab2))
    fused, mask = fused_for(model, vocab2)
    texts = [f"answer {i}" for i in range(100)]
    seqs = [tokenize(t, vocab2) for t in texts]
    cand_ids, cand_mask = pad_batch(seqs)
    gt = 17
    base = score_candidates(fused[0], mask[0], cand_ids, cand_mask,
                            model.ader.candidates, gt)
    perm = torch.randperm(100, generator=torch.Generator().manual_seed(4))
    inv = torch.empty_like(perm)
    inv[perm] = torch.arange(100)
    permuted = score_candidates(fused[0], mask[0], cand_ids[perm],
                                cand_mask[perm], model.ader.candidates,
                                int(inv[gt]))
    assert torch.allclose(base.scores[perm], permuted.scores, atol=1e-9)
    assert base.gt_rank == permuted.gt_rank


def test_brute_force_rank_oracle(rng):
    for _ in range(20):
        scores = rng.integers(0, 5, size=30).astype(float).tolist()
        gt = int(rng.integers(0, 30))
        assert rank_of_candidate(torch.tensor(scores), gt) == \
            rank_with_ties_reference(scores, gt)


def test_pooling_modes():
    reps = torch.tensor([[[1.0, 2.0], [3.0, 4.0], [9.0, 9.0]]])
    mask = torch.tensor([[True, True, False]])
    mean = pool_tokens(reps, mask, "mean")
    assert torch.allclose(mean, torch.tensor([[2.0, 3.0]]))
    first = pool_tokens(reps, mask, "first")
    assert torch.allclose(first, torch.tensor([[1.0, 2.0]]))
