import math

import numpy as np
import pytest
import torch

from conftest import build_model, random_unit_vectors
from textreid.alignment import (
    LossWeights,
    MaskedTokens,
    NegativePlan,
    TrainBatch,
    apply_mask,
    combined_loss,
    contrastive_loss,
    match_bce,
    mlm_loss,
    sample_hard_negative,
)
from textreid.corpus import FULL_IMAGE_BOX, BoundingBox
from textreid.synth import CLS_ID, MASK_ID, PAD_ID, closed_vocabulary, tokenize

# ---------------------------------------------------------------------------
# Scalar-loop reference implementations (kept deliberately torch-free).
# ---------------------------------------------------------------------------


def oracle_contrastive(x, y, tau):
    n = len(x)
    dot = lambda a, b: sum(float(ai) * float(bi) for ai, bi in zip(a, b))
    total = 0.0
    for i in range(n):
        row = [math.exp(dot(x[i], y[j]) / tau) for j in range(n)]
        col = [math.exp(dot(x[j], y[i]) / tau) for j in range(n)]
        total += math.log(row[i] / sum(row)) + math.log(col[i] / sum(col))
    return -0.5 * total / n


def oracle_match_bce(probs, labels, eps=1e-7):
    total = 0.0
    for p, label in zip(probs, labels):
        p = min(max(float(p), eps), 1.0 - eps)
        total += float(label) * math.log(p) + (1.0 - float(label)) * math.log(1.0 - p)
    return -total / len(probs)


def oracle_mlm(logits, targets):
    if len(targets) == 0:
        return 0.0
    total = 0.0
    for row, target in zip(logits, targets):
        row = [float(v) for v in row]
        m = max(row)
        z = sum(math.exp(v - m) for v in row)
        total += -(row[int(target)] - m - math.log(z))
    return total / len(targets)


# ---------------------------------------------------------------------------


class TestContrastiveLoss:
    def test_single_pair_is_zero(self):
        x = torch.tensor([[1.0, 0.0]])
        temp = torch.tensor(0.5)
        assert float(contrastive_loss(x, x, temp)) == pytest.approx(0.0, abs=1e-7)

    def test_uniform_two_pairs_is_log2(self):
        v = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
        temp = torch.tensor(1.0)
        assert float(contrastive_loss(v, v, temp)) == pytest.approx(math.log(2), abs=1e-6)

    def test_identity_similarity_hand_value(self):
        x = torch.eye(2)
        temp = torch.tensor(1.0)
        # diagonal softmax = e / (e + 1); loss = -log of that = 0.31326...
        assert float(contrastive_loss(x, x, temp)) == pytest.approx(0.3132617, abs=1e-6)

    def test_equal_similarities_give_log_n(self):
        rng = np.random.default_rng(0)
        for n in (2, 3, 7):
            x = torch.zeros(n, 4, dtype=torch.float64)
            x[:, 0] = 1.0
            tau = float(rng.uniform(0.05, 2.0))
            loss = contrastive_loss(x, x, torch.tensor(tau, dtype=torch.float64))
            assert float(loss) == pytest.approx(math.log(n), abs=1e-9)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(1)
        x = random_unit_vectors(rng, 5, 6).double()
        y = random_unit_vectors(rng, 5, 6).double()
        q, _ = torch.linalg.qr(torch.tensor(rng.standard_normal((6, 6))))
        temp = torch.tensor(0.3, dtype=torch.float64)
        a = contrastive_loss(x, y, temp)
        b = contrastive_loss(x @ q, y @ q, temp)
        assert float(a) == pytest.approx(float(b), rel=1e-10)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            n, d = int(rng.integers(1, 8)), int(rng.integers(2, 6))
            x = random_unit_vectors(rng, n, d).double()
            y = random_unit_vectors(rng, n, d).double()
            tau = float(rng.uniform(0.05, 2.0))
            got = float(contrastive_loss(x, y, torch.tensor(tau, dtype=torch.float64)))
            want = oracle_contrastive(x.tolist(), y.tolist(), tau)
            assert got == pytest.approx(want, rel=1e-10)
            assert got >= -1e-12

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            contrastive_loss(torch.zeros(0, 2), torch.zeros(0, 2), torch.tensor(1.0))


class TestHardNegativeSampling:
    def test_two_entries_picks_the_other(self):
        row = torch.tensor([0.9, 0.1])
        gen = torch.Generator().manual_seed(0)
        for _ in range(20):
            assert sample_hard_negative(row, 0, torch.tensor(1.0), gen) == 1

    def test_positive_never_returned(self):
        rng = np.random.default_rng(3)
        gen = torch.Generator().manual_seed(1)
        for _ in range(500):
            n = int(rng.integers(2, 9))
            row = torch.tensor(rng.standard_normal(n))
            pos = int(rng.integers(n))
            assert sample_hard_negative(row, pos, torch.tensor(0.5), gen) != pos

    def test_sampling_proportions(self):
        # negatives at softmax weights 0.9 / 0.1 (temperature 1)
        row = torch.tensor([0.0, math.log(9.0), 0.0])
        gen = torch.Generator().manual_seed(7)
        counts = {1: 0, 2: 0}
        draws = 10_000
        for _ in range(draws):
            counts[sample_hard_negative(row, 0, torch.tensor(1.0), gen)] += 1
        assert counts[1] / draws == pytest.approx(0.9, abs=0.02)
        assert counts[2] / draws == pytest.approx(0.1, abs=0.02)

    def test_single_entry_rejected(self):
        with pytest.raises(ValueError):
            sample_hard_negative(torch.tensor([1.0]), 0, torch.tensor(1.0), torch.Generator())

    def test_deterministic_given_state(self):
        row = torch.tensor([0.2, 0.5, -0.3, 0.9])
        a = [sample_hard_negative(row, 1, torch.tensor(0.2), torch.Generator().manual_seed(11))
             for _ in range(5)]
        b = [sample_hard_negative(row, 1, torch.tensor(0.2), torch.Generator().manual_seed(11))
             for _ in range(5)]
        assert a == b


class TestMatchBce:
    def test_perfect_classifier_near_zero(self):
        probs = torch.tensor([1.0, 1.0, 0.0])
        labels = torch.tensor([1.0, 1.0, 0.0])
        assert float(match_bce(probs, labels)) == pytest.approx(0.0, abs=1e-5)

    def test_half_probability_is_log2(self):
        probs = torch.full((6,), 0.5)
        labels = torch.tensor([1.0, 0, 1, 0, 1, 0])
        assert float(match_bce(probs, labels)) == pytest.approx(math.log(2), abs=1e-6)

    def test_label_flip_symmetric_at_half(self):
        probs = torch.full((3,), 0.5)
        a = match_bce(probs, torch.tensor([1.0, 0.0, 0.0]))
        b = match_bce(probs, torch.tensor([0.0, 0.0, 0.0]))
        assert float(a) == pytest.approx(float(b))

    def test_pair_order_permutation_invariant(self):
        rng = np.random.default_rng(4)
        probs = torch.tensor(rng.uniform(0.01, 0.99, size=12))
        labels = torch.tensor((rng.random(12) < 0.5).astype(float))
        perm = torch.randperm(12, generator=torch.Generator().manual_seed(2))
        assert float(match_bce(probs, labels)) == pytest.approx(
            float(match_bce(probs[perm], labels[perm])), rel=1e-12
        )

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(5)
        probs = torch.tensor(rng.uniform(0, 1, size=9))
        labels = torch.tensor((rng.random(9) < 0.5).astype(float))
        assert float(match_bce(probs, labels)) == pytest.approx(
            oracle_match_bce(probs.tolist(), labels.tolist()), rel=1e-9
        )


class TestApplyMask:
    def make_tokens(self, vocab, n_words=8, max_len=12):
        words = vocab.tokens[4:]
        rng = np.random.default_rng(0)
        text = " ".join(words[int(rng.integers(len(words)))] for _ in range(n_words))
        return tokenize(text, vocab, max_len)

    def test_zero_probability_unchanged(self):
        vocab = closed_vocabulary()
        tokens = self.make_tokens(vocab)
        out = apply_mask(tokens, vocab, 0.0, np.random.default_rng(1))
        assert out.corrupted == tokens.ids
        assert out.positions == ()

    def test_full_probability_selects_all_real_tokens(self):
        vocab = closed_vocabulary()
        tokens = self.make_tokens(vocab)
        out = apply_mask(tokens, vocab, 1.0, np.random.default_rng(2))
        maskable = [
            i for i, (tid, m) in enumerate(zip(tokens.ids, tokens.mask)) if m and tid >= 4
        ]
        assert list(out.positions) == maskable

    def test_specials_never_selected(self):
        vocab = closed_vocabulary()
        tokens = self.make_tokens(vocab)
        out = apply_mask(tokens, vocab, 1.0, np.random.default_rng(3))
        assert 0 not in out.positions  # [CLS] position
        for pos in range(tokens.num_real, len(tokens.ids)):
            assert pos not in out.positions  # [PAD] region
        assert out.corrupted[0] == CLS_ID
        assert all(out.corrupted[p] == PAD_ID for p in range(tokens.num_real, len(tokens.ids)))

    def test_statistics_at_defaults(self):
        vocab = closed_vocabulary()
        rng = np.random.default_rng(6)
        tokens = self.make_tokens(vocab, n_words=10, max_len=12)
        selected = 0
        masked = random_tok = unchanged = 0
        total_maskable = 0
        for _ in range(2_000):
            out = apply_mask(tokens, vocab, 0.25, rng)
            total_maskable += 10
            selected += len(out.positions)
            for p in out.positions:
                if out.corrupted[p] == MASK_ID:
                    masked += 1
                elif out.corrupted[p] == out.original[p]:
                    unchanged += 1
                else:
                    random_tok += 1
        assert selected / total_maskable == pytest.approx(0.25, abs=0.02)
        assert masked / selected == pytest.approx(0.80, abs=0.02)
        assert random_tok / selected == pytest.approx(0.10, abs=0.02)
        assert unchanged / selected == pytest.approx(0.10, abs=0.02)

    def test_corruption_only_at_positions(self):
        vocab = closed_vocabulary()
        tokens = self.make_tokens(vocab)
        out = apply_mask(tokens, vocab, 0.5, np.random.default_rng(8))
        for i, (orig, corr) in enumerate(zip(out.original, out.corrupted)):
            if i not in out.positions:
                assert orig == corr


class TestMlmLoss:
    def test_perfect_prediction_near_zero(self):
        targets = torch.tensor([2, 0])
        logits = torch.full((2, 5), -30.0)
        logits[0, 2] = 30.0
        logits[1, 0] = 30.0
        assert float(mlm_loss(logits, targets)) == pytest.approx(0.0, abs=1e-6)

    def test_uniform_predictor_is_log_v(self):
        v = 11
        logits = torch.zeros((4, v))
        targets = torch.tensor([0, 3, 7, 10])
        assert float(mlm_loss(logits, targets)) == pytest.approx(math.log(v), abs=1e-6)

    def test_no_positions_is_zero(self):
        assert float(mlm_loss(torch.zeros(0, 5), torch.zeros(0, dtype=torch.long))) == 0.0

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(9)
        logits = torch.tensor(rng.standard_normal((6, 13)))
        targets = torch.tensor(rng.integers(0, 13, size=6))
        assert float(mlm_loss(logits, targets)) == pytest.approx(
            oracle_mlm(logits.tolist(), targets.tolist()), rel=1e-6
        )

    def test_position_order_permutation_invariant(self):
        rng = np.random.default_rng(10)
        logits = torch.tensor(rng.standard_normal((5, 7)))
        targets = torch.tensor(rng.integers(0, 7, size=5))
        perm = torch.randperm(5, generator=torch.Generator().manual_seed(4))
        assert float(mlm_loss(logits, targets)) == pytest.approx(
            float(mlm_loss(logits[perm], targets[perm])), rel=1e-12
        )


def make_batch(vocab, config, n=4, seed=0):
    rng = np.random.default_rng(seed)
    words = vocab.tokens[4:]
    captions = [
        " ".join(words[int(rng.integers(len(words)))] for _ in range(6)) for _ in range(n)
    ]
    toks = [tokenize(c, vocab, config.max_text_len) for c in captions]
    masked = [apply_mask(t, vocab, 0.4, rng) for t in toks]
    phrases = [tokenize(" ".join(c.split()[:2]), vocab, config.max_phrase_len) for c in captions]
    boxes = []
    for _ in range(n):
        boxes.append(
            BoundingBox(
                cx=float(rng.uniform(0.2, 0.8)), cy=float(rng.uniform(0.2, 0.8)),
                w=float(rng.uniform(0.2, 0.6)), h=float(rng.uniform(0.2, 0.6)),
            )
        )
    return TrainBatch(
        images=torch.tensor(rng.random((n, 3, config.image_size, config.image_size)), dtype=torch.float32),
        caption_ids=torch.tensor([t.ids for t in toks]),
        caption_mask=torch.tensor([t.mask for t in toks]),
        mlm_ids=torch.tensor([m.corrupted for m in masked]),
        mlm_positions=torch.tensor(
            [[i in m.positions for i in range(config.max_text_len)] for m in masked]
        ),
        region_boxes=boxes,
        phrase_ids=torch.tensor([p.ids for p in phrases]),
        phrase_mask=torch.tensor([p.mask for p in phrases]),
        record_ids=[f"r{i}" for i in range(n)],
    )


class TestCombinedLoss:
    def test_breakdown_composes_total(self, micro_config):
        vocab = closed_vocabulary()
        config = micro_config(len(vocab))
        model = build_model(config)
        batch = make_batch(vocab, config)
        beta = 0.8
        gen = torch.Generator().manual_seed(5)
        total, bd = combined_loss(model, batch, LossWeights(beta), generator=gen)
        recomposed = bd["itc"] + bd["itm"] + bd["mlm"] + beta * (bd["rpc"] + bd["rpm"])
        assert bd["total"] == pytest.approx(recomposed, rel=1e-6)
        assert total.detach().item() == pytest.approx(bd["total"], rel=1e-6)

    def test_weight_formula(self):
        # five stubbed unit terms with beta = 0.8 compose to 4.6
        beta = LossWeights(0.8).beta
        assert 1 + 1 + 1 + beta * (1 + 1) == pytest.approx(4.6)

    def test_beta_zero_equals_baseline_terms(self, micro_config):
        vocab = closed_vocabulary()
        config = micro_config(len(vocab))
        model = build_model(config)
        batch = make_batch(vocab, config)
        total0, bd0 = combined_loss(
            model, batch, LossWeights(0.0), generator=torch.Generator().manual_seed(5)
        )
        total_ft, bd_ft = combined_loss(
            model, batch, LossWeights(0.0),
            generator=torch.Generator().manual_seed(5), mode="finetune",
        )
        # beta = 0 adds an exact 0.0, so the totals agree bit for bit
        assert total0.detach().item() == total_ft.detach().item()
        for key in ("itc", "itm", "mlm"):
            assert bd0[key] == bd_ft[key]
        assert "rpc" in bd0 and "rpc" not in bd_ft

    def test_finetune_mode_reports_three_terms(self, micro_config):
        vocab = closed_vocabulary()
        config = micro_config(len(vocab))
        model = build_model(config)
        batch = make_batch(vocab, config)
        _, bd = combined_loss(
            model, batch, LossWeights(0.8),
            generator=torch.Generator().manual_seed(1), mode="finetune",
        )
        assert set(bd) == {"itc", "itm", "mlm", "total"}

    def test_total_matches_scalar_oracle(self, micro_config):
        vocab = closed_vocabulary()
        config = micro_config(len(vocab))
        model = build_model(config).double()
        batch = make_batch(vocab, config)
        batch.images = batch.images.double()
        beta = 0.8
        total, bd, details = combined_loss(
            model, batch, LossWeights(beta),
            generator=torch.Generator().manual_seed(9), return_details=True,
        )
        itc = oracle_contrastive(
            details["itc"]["x"].tolist(), details["itc"]["y"].tolist(),
            float(details["itc"]["temp"]),
        )
        rpc = oracle_contrastive(
            details["rpc"]["x"].tolist(), details["rpc"]["y"].tolist(),
            float(details["rpc"]["temp"]),
        )
        itm = oracle_match_bce(details["itm"]["probs"].tolist(), details["itm"]["labels"].tolist())
        rpm = oracle_match_bce(details["rpm"]["probs"].tolist(), details["rpm"]["labels"].tolist())
        mlm = oracle_mlm(details["mlm"]["logits"].tolist(), details["mlm"]["targets"].tolist())
        want = itc + itm + mlm + beta * (rpc + rpm)
        assert total.detach().item() == pytest.approx(want, rel=1e-8)

    def test_single_pair_batch_works(self, micro_config):
        vocab = closed_vocabulary()
        config = micro_config(len(vocab))
        model = build_model(config)
        batch = make_batch(vocab, config, n=1)
        total, bd = combined_loss(
            model, batch, LossWeights(0.8), generator=torch.Generator().manual_seed(1)
        )
        assert math.isfinite(total.detach().item())
        assert bd["itc"] == pytest.approx(0.0, abs=1e-6)

    def test_plan_freezes_sampling(self, micro_config):
        vocab = closed_vocabulary()
        config = micro_config(len(vocab))
        model = build_model(config).double()
        batch = make_batch(vocab, config)
        batch.images = batch.images.double()
        _, _, details = combined_loss(
            model, batch, LossWeights(0.8),
            generator=torch.Generator().manual_seed(3), return_details=True,
        )
        plan = details["plan"]
        a, _ = combined_loss(model, batch, LossWeights(0.8), plan=plan)
        b, _ = combined_loss(model, batch, LossWeights(0.8), plan=plan)
        assert a.detach().item() == b.detach().item()


class TestGradientsAgainstFiniteDifferences:
    def test_sampled_parameters(self, micro_config):
        vocab = closed_vocabulary()
        config = micro_config(len(vocab), embed_dim=8, num_heads=2, proj_dim=4)
        model = build_model(config, seed=2).double()
        batch = make_batch(vocab, config, n=3, seed=1)
        batch.images = batch.images.double()
        weights = LossWeights(0.8)
        _, _, details = combined_loss(
            model, batch, weights,
            generator=torch.Generator().manual_seed(0), return_details=True,
        )
        plan = details["plan"]

        def loss_value():
            total, _ = combined_loss(model, batch, weights, plan=plan)
            return total

        model.zero_grad()
        loss_value().backward()

        rng = np.random.default_rng(12)
        params = dict(model.named_parameters())
        names = list(params)
        checked = 0
        h = 1e-5
        for _ in range(25):
            name = names[int(rng.integers(len(names)))]
            p = params[name]
            flat = p.detach().reshape(-1)
            idx = int(rng.integers(flat.numel()))
            with torch.no_grad():
                orig = float(flat[idx])
                flat[idx] = orig + h
                up = float(loss_value())
                flat[idx] = orig - h
                down = float(loss_value())
                flat[idx] = orig
            fd = (up - down) / (2 * h)
            analytic = float(p.grad.reshape(-1)[idx])
            assert analytic == pytest.approx(fd, rel=1e-3, abs=1e-7), name
            checked += 1
        assert checked == 25

    def test_temperature_gradients(self, micro_config):
        vocab = closed_vocabulary()
        config = micro_config(len(vocab), embed_dim=8, num_heads=2, proj_dim=4)
        model = build_model(config, seed=3).double()
        batch = make_batch(vocab, config, n=3, seed=2)
        batch.images = batch.images.double()
        weights = LossWeights(0.8)
        _, _, details = combined_loss(
            model, batch, weights,
            generator=torch.Generator().manual_seed(1), return_details=True,
        )
        plan = details["plan"]
        model.zero_grad()
        total, _ = combined_loss(model, batch, weights, plan=plan)
        total.backward()
        h = 1e-5
        for temp in (model.temp_global, model.temp_region):
            with torch.no_grad():
                orig = float(temp.log_temp)
                temp.log_temp.fill_(orig + h)
                up = float(combined_loss(model, batch, weights, plan=plan)[0])
                temp.log_temp.fill_(orig - h)
                down = float(combined_loss(model, batch, weights, plan=plan)[0])
                temp.log_temp.fill_(orig)
            fd = (up - down) / (2 * h)
            assert float(temp.log_temp.grad) == pytest.approx(fd, rel=1e-3)
