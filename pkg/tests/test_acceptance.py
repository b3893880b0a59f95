"""Acceptance suite.

One test per acceptance criterion; each prints a PASS/FAIL line (run with -s
to see them live). The synthetic tracking criterion trains four model
variants at the desk configuration and takes the bulk of the runtime.
"""
import math
import time
import numpy as np
import pytest
import torch

from mdst.config import ModelConfig, SynthConfig, TrainConfig
from mdst.data import write_feature_store
from mdst.encoder import pad_batch, tokenize
from mdst.generation import generate_dialogues
from mdst.judge import compute_jacc_avglen, judge_with_oracle
from mdst.metrics import compute_ndcg, ranking_metrics
from mdst.pds import PDS
from mdst.qgds import QGDS
from mdst.synth import generate_corpus
from mdst.training import lr_at, train
from mdst.vocab import build_vocabulary

from conftest import small_vocab, tiny_model
from oracles import (alignment_distribution, check_gradients_fd,
                     mean_rank_reference, mlp_params, mrr_reference,
                     ndcg_reference, qa_fusion, recall_at_k_reference,
                     state_update, switching_probability, weighted_context)


def report(name: str):
    class _Reporter:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            print(f"\nACCEPTANCE {name}: {'FAIL' if exc_type else 'PASS'}")
            return False

    return _Reporter()


# ---------------------------------------------------------------------------
# Criterion 1: shape/normalization suite, 1000 random configurations
# ---------------------------------------------------------------------------

def test_shape_normalization_suite():
    with report("shape/normalization suite (1000 configs)"):
        rng = np.random.default_rng(0)
        started = time.time()
        for trial in range(1000):
            l = int(rng.integers(1, 9))
            n_objects = int(rng.integers(1, 7))
            d = int(rng.choice([4, 8, 16]))
            n_rows = n_objects + 2
            torch.manual_seed(trial)
            qgds = QGDS(d, n_rows, dropout=0.0).double().eval()
            pds = PDS(d, dropout=0.0).double().eval()
            gen = torch.Generator().manual_seed(trial)
            q = torch.randn(l, d, generator=gen, dtype=torch.float64)
            S = torch.randn(n_rows, d, generator=gen, dtype=torch.float64)
            O = torch.randn(n_rows, d, generator=gen, dtype=torch.float64)
            a = torch.randn(int(rng.integers(1, 6)), d, generator=gen,
                            dtype=torch.float64)

            with torch.no_grad():
                g = qgds.ground(q, S, O)
                fusion = pds.fuse_qa_pair(q, g.dq_l, a)
                beta, S_next = pds.update_language_states(fusion.h, g.dq_l, S, O)
            for dist in (g.pi_l, g.pi_v):
                sums = dist.sum(dim=-1)
                assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)
            assert 0.0 < float(g.phi) < 1.0
            assert torch.equal(g.fused, g.q + g.dq_l + g.dq_v)
            sums = fusion.alpha.sum(dim=-1)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)
            sums = beta.sum(dim=-1)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)
        elapsed = time.time() - started
        assert elapsed < 60.0, f"suite took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# Criterion 2: oracle equivalence of the grounding/update equations
# ---------------------------------------------------------------------------

def test_oracle_equivalence_grounding_and_update():
    with report("oracle equivalence (100 instances per op)"):
        started = time.time()
        rng = np.random.default_rng(7)
        for trial in range(100):
            l = int(rng.integers(1, 5))
            n_rows = int(rng.integers(1, 5))
            la = int(rng.integers(1, 5))
            d = int(rng.choice([4, 8]))
            torch.manual_seed(1000 + trial)
            qgds = QGDS(d, n_rows, dropout=0.0).double().eval()
            pds = PDS(d, dropout=0.0).double().eval()
            gen = torch.Generator().manual_seed(trial)
            q = torch.randn(l, d, generator=gen, dtype=torch.float64)
            S = torch.randn(n_rows, d, generator=gen, dtype=torch.float64)
            O = torch.randn(n_rows, d, generator=gen, dtype=torch.float64)
            a = torch.randn(la, d, generator=gen, dtype=torch.float64)
            scale = math.sqrt(d)

            with torch.no_grad():
                g = qgds.ground(q, S, O)
                fusion = pds.fuse_qa_pair(q, g.dq_l, a)
                beta, S_next = pds.update_language_states(fusion.h, g.dq_l, S, O)
            pi_l_ref = alignment_distribution(
                q.numpy(), S.numpy(), mlp_params(qgds.entity_query),
                mlp_params(qgds.entity_key), scale)
            pi_v_ref = alignment_distribution(
                q.numpy(), O.numpy(), mlp_params(qgds.object_query),
                mlp_params(qgds.object_key), scale)
            phi_ref = switching_probability(
                q.numpy(), S.numpy(), mlp_params(qgds.switch_query),
                mlp_params(qgds.switch_key),
                qgds.switch_weight.detach().numpy())
            dq_l_ref = weighted_context(pi_l_ref + phi_ref * pi_v_ref, S.numpy())
            dq_v_ref = weighted_context(pi_v_ref + (1 - phi_ref) * pi_l_ref,
                                        O.numpy())
            np.testing.assert_allclose(g.pi_l.detach().numpy(), pi_l_ref, atol=1e-9)
            np.testing.assert_allclose(g.pi_v.detach().numpy(), pi_v_ref, atol=1e-9)
            assert float(g.phi) == pytest.approx(phi_ref, abs=1e-9)
            np.testing.assert_allclose(g.dq_l.detach().numpy(), dq_l_ref, atol=1e-9)
            np.testing.assert_allclose(g.dq_v.detach().numpy(), dq_v_ref, atol=1e-9)
            np.testing.assert_allclose(g.fused.detach().numpy(),
                                       q.numpy() + dq_l_ref + dq_v_ref, atol=1e-9)

            alpha_ref, h_ref = qa_fusion(q.numpy(), dq_l_ref, a.numpy(),
                                         mlp_params(pds.qa_query),
                                         mlp_params(pds.answer_key), scale)
            np.testing.assert_allclose(fusion.alpha.detach().numpy(), alpha_ref,
                                       atol=1e-9)
            np.testing.assert_allclose(fusion.h.detach().numpy(), h_ref, atol=1e-9)

            beta_ref, S_ref = state_update(h_ref, dq_l_ref, S.numpy(), O.numpy(),
                                           mlp_params(pds.write_query),
                                           mlp_params(pds.state_key), scale)
            np.testing.assert_allclose(beta.detach().numpy(), beta_ref, atol=1e-9)
            np.testing.assert_allclose(S_next.detach().numpy(), S_ref, atol=1e-9)
        elapsed = time.time() - started
        assert elapsed < 60.0, f"oracle suite took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# Criterion 3: gradient checks through QGDS -> ADer-NLL -> PDS
# ---------------------------------------------------------------------------

def test_gradient_checks_composite():
    with report("gradient checks (finite differences, d=8)"):
        started = time.time()
        model = tiny_model(d_model=8, n_heads=2, n_layers=1, ffn_dim=16,
                           vocab_size=20, d_raw=6, n_objects=2, dropout=0.0,
                           double=True, seed=0)
        model.train()  # dropout is 0; training mode only for grad flow
        vocab = small_vocab()
        assert len(vocab) == 20

        raw = torch.randn(1, 2, 6, dtype=torch.float64)
        q1 = tokenize("is there a dog ?", vocab)
        a1 = tokenize("yes", vocab)
        q2 = tokenize("what color is it ?", vocab)
        a2 = tokenize("red", vocab)
        cap = tokenize("a dog and a ball", vocab)

        def loss_fn():
            O = model.vision_rows(raw)
            S = model.zero_language_states(O)
            cap_ids, cap_mask = pad_batch([cap])
            cap_reps = model.text_encoder(cap_ids, cap_mask)
            g0 = model.qgds.ground(cap_reps, S, O, cap_mask)
            _, S = model.pds.update_language_states(cap_reps, g0.dq_l, S, O,
                                                    cap_mask)
            total = None
            for q_seq, a_seq in ((q1, a1), (q2, a2)):
                q_ids, q_mask = pad_batch([q_seq])
                q_reps = model.text_encoder(q_ids, q_mask)
                g = model.qgds.ground(q_reps, S, O, q_mask)
                a_ids, a_mask = pad_batch([a_seq])
                out = model.ader.decoder.teacher_forward(g.fused, q_mask,
                                                         a_ids, a_mask)
                loss = out["nll_sum"].sum()
                total = loss if total is None else total + loss
                fusion = model.pds.fuse_qa_pair(q_reps, g.dq_l,
                                                out["answer_reps"],
                                                out["answer_mask"], q_mask)
                _, S = model.pds.update_language_states(fusion.h, g.dq_l,
                                                        S, O, q_mask)
            return total

        loss = loss_fn()
        loss.backward()

        # every parameter group on the QGDS -> ADer-NLL -> PDS path
        path_params = []
        for group in ("text_encoder", "state_core", "qgds", "pds"):
            module = getattr(model, group)
            path_params += [(f"{group}.{n}", p)
                            for n, p in module.named_parameters()]
        path_params += [(f"ader.decoder.{n}", p)
                        for n, p in model.ader.decoder.named_parameters()
                        if "candidates" not in n]
        seen_groups = {name.split(".")[0] for name, _ in path_params}
        assert seen_groups == {"text_encoder", "state_core", "qgds", "pds",
                               "ader"}
        rng = np.random.default_rng(3)
        checked = check_gradients_fd(loss_fn, path_params, rng, n_coords=2,
                                     step=1e-5, rtol=1e-4, atol=1e-6)
        assert checked >= 2 * len(path_params) - 10
        elapsed = time.time() - started
        assert elapsed < 300.0, f"gradient suite took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# Criterion 4: state contracts over a 10-round dialog
# ---------------------------------------------------------------------------

def test_state_contracts_ten_rounds():
    with report("state contracts (10-round dialog)"):
        scfg = SynthConfig(n_objects=3, n_rounds=10, n_dialogs=2, seed=21)
        corpus, feats, _ = generate_corpus(scfg, with_candidates=False)
        vocab = build_vocabulary(corpus)
        model = tiny_model(d_model=16, n_heads=2, n_layers=1, ffn_dim=32,
                           vocab_size=len(vocab), d_raw=scfg.d_raw,
                           n_objects=3, dropout=0.0, double=True, seed=4)

        record = corpus.records[0]
        raw = torch.from_numpy(feats[record.image_id]).double().unsqueeze(0)
        with torch.no_grad():
            O = model.vision_rows(raw)
            from mdst.state import VisionStates
            vision = VisionStates(O=O[0], null_index=3, all_index=4)
            digest0 = vision.digest()
            S = model.zero_language_states(O)
            t = 0

            cap_ids, cap_mask = pad_batch([tokenize(record.caption, vocab)])
            cap_reps = model.text_encoder(cap_ids, cap_mask)
            g = model.qgds.ground(cap_reps, S, O, cap_mask)
            beta, S = model.pds.update_language_states(cap_reps, g.dq_l, S, O,
                                                       cap_mask)
            t += 1
            counters = [t]

            for rnd in record.rounds:
                q_ids, q_mask = pad_batch([tokenize(rnd.question, vocab)])
                q_reps = model.text_encoder(q_ids, q_mask)
                g = model.qgds.ground(q_reps, S, O, q_mask)
                a_ids, a_mask = pad_batch([tokenize(rnd.answer, vocab)])
                out = model.ader.decoder.teacher_forward(g.fused, q_mask,
                                                         a_ids, a_mask)
                fusion = model.pds.fuse_qa_pair(q_reps, g.dq_l,
                                                out["answer_reps"],
                                                out["answer_mask"], q_mask)
                S_prev = S.clone()
                beta, S = model.pds.update_language_states(fusion.h, g.dq_l,
                                                           S, O, q_mask)
                # strict additivity against an explicit loop recomputation
                h = fusion.h[0].numpy()
                b = beta[0].numpy()
                delta = np.zeros_like(S_prev[0].numpy())
                for j in range(b.shape[1]):
                    for k in range(h.shape[1]):
                        for i in range(b.shape[0]):
                            delta[j, k] += b[i, j] * h[i, k]
                np.testing.assert_allclose((S - S_prev)[0].numpy(), delta,
                                           atol=1e-9)
                t += 1
                counters.append(t)

            assert vision.digest() == digest0
            assert counters == list(range(1, 12))  # monotone, +1 per round


# ---------------------------------------------------------------------------
# Criterion 5: synthetic tracking task, variant ordering
# ---------------------------------------------------------------------------

TRACKING_VARIANTS = [
    ("full", {}),
    ("-QGDS-PDS", {"use_qgds_pds": False}),
    ("-switching", {"use_switching": False}),
    ("-NULL-ALL", {"use_pseudo_objects": False}),
]

DESK_EPOCHS = 16
DESK_LR = 2e-3


@pytest.mark.slow
def test_synthetic_tracking_ordering(tmp_path):
    with report("synthetic tracking ordering (4 variants, desk config)"):
        started = time.time()
        scfg = SynthConfig(n_objects=3, n_rounds=4, seed=100)
        corpus, feats, _ = generate_corpus(scfg, split="train",
                                           n_dialogs=5000, seed=100)
        val_corpus, val_feats, val_worlds = generate_corpus(
            scfg, split="val", n_dialogs=200, seed=999)
        store = write_feature_store(tmp_path / "train_features", feats)
        val_store = write_feature_store(tmp_path / "val_features", val_feats)
        worlds = {i: w for i, w in enumerate(val_worlds)}

        jacc = {}
        for name, overrides in TRACKING_VARIANTS:
            model_cfg = ModelConfig(d_model=64, n_heads=4, n_layers=2,
                                    ffn_dim=256, dropout=0.0, **overrides)
            cfg = TrainConfig(epochs=DESK_EPOCHS, batch_size=64,
                              peak_lr=DESK_LR, seed=0, model=model_cfg,
                              log_every=0)
            result = train(cfg, corpus, store)
            rows = generate_dialogues(result.model, result.vocab, val_corpus,
                                      val_store, rounds=scfg.n_rounds,
                                      batch_size=64)
            judged = judge_with_oracle(rows, worlds)
            jacc[name], _ = compute_jacc_avglen(judged)
            print(f"\n  {name}: JACC {jacc[name]:.1f} "
                  f"({time.time() - started:.0f}s elapsed)")

        full, base = jacc["full"], jacc["-QGDS-PDS"]
        assert full >= base + 10.0, (
            f"full {full:.1f} must exceed -QGDS-PDS {base:.1f} by >= 10 JACC")
        for mid in ("-switching", "-NULL-ALL"):
            assert base <= jacc[mid] <= full, (
                f"{mid} ({jacc[mid]:.1f}) must fall between "
                f"-QGDS-PDS ({base:.1f}) and full ({full:.1f})")
        elapsed = time.time() - started
        assert elapsed < 1800.0, f"tracking suite took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# Criterion 6: metric suite equivalence and published bookkeeping
# ---------------------------------------------------------------------------

def test_metric_suite_brute_force_and_bookkeeping():
    with report("metric suite (200 instances + published counts)"):
        rng = np.random.default_rng(99)
        for _ in range(200):
            n = int(rng.integers(1, 50))
            ranks = [int(r) for r in rng.integers(1, 101, size=n)]
            m = ranking_metrics(ranks)
            assert abs(m["mrr"] - mrr_reference(ranks)) < 1e-9
            for k in (1, 5, 10):
                assert abs(m[f"r@{k}"] - recall_at_k_reference(ranks, k)) < 1e-9
            assert abs(m["mean"] - mean_rank_reference(ranks)) < 1e-9

            n_cand = int(rng.integers(2, 101))
            relevance = rng.choice([0.0, 0.0, 0.0, 0.25, 0.5, 1.0],
                                   size=n_cand).tolist()
            if not any(v > 0 for v in relevance):
                relevance[int(rng.integers(n_cand))] = 1.0
            ranking = rng.permutation(n_cand).tolist()
            assert abs(compute_ndcg(ranking, relevance)
                       - ndcg_reference(ranking, relevance)) < 1e-9

        # published bookkeeping: 798 correct / 202 incorrect of 1000 -> 79.8
        from mdst.judge import JudgedDialog, JudgedRound
        rounds = [JudgedRound("q ?", "yes", "yes", True)] * 798 + \
                 [JudgedRound("q ?", "no", "yes", False)] * 202
        judged = [JudgedDialog(image_id=0, rounds=rounds)]
        jacc, avg_len = compute_jacc_avglen(judged)
        assert jacc == pytest.approx(79.8, abs=1e-12)
        assert avg_len == 1.0


# ---------------------------------------------------------------------------
# Criterion 7: learning-rate schedule trace
# ---------------------------------------------------------------------------

def test_schedule_trace_pointwise():
    with report("learning-rate schedule trace"):
        peak, final, warmup = 1e-3, 5e-5, 0.2
        total = 2001
        values = [lr_at(s, total, peak, warmup, final) for s in range(total)]
        breakpoint_idx = round(warmup * (total - 1))

        assert values[0] == 0.0
        assert values[breakpoint_idx] == pytest.approx(peak, rel=1e-9)
        assert values[-1] == pytest.approx(final, abs=1e-15)
        # pointwise linearity on both segments
        for s in range(breakpoint_idx + 1):
            expected = peak * s / breakpoint_idx if breakpoint_idx else peak
            assert values[s] == pytest.approx(expected, rel=1e-9, abs=1e-15)
        span = (total - 1) - breakpoint_idx
        for s in range(breakpoint_idx, total):
            expected = peak + (final - peak) * (s - breakpoint_idx) / span
            assert values[s] == pytest.approx(expected, rel=1e-9, abs=1e-15)
        # exactly one breakpoint: two distinct slopes
        slopes = {round(values[s + 1] - values[s], 15) for s in range(total - 1)}
        assert len(slopes) == 2
