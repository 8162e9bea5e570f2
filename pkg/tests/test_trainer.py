import math

import numpy as np
import pytest

from embkit.datamodel import TextPair, ValidationError
from embkit.encoder import (
    backward_token_batch,
    copy_model,
    encode,
    forward_token_batch,
    init_model,
    load_model,
    pack_token_seqs,
    tokenize,
)
from embkit.synth import SynthConfig, generate
from embkit.trainer import (
    LabeledTaskPair,
    TrainConfig,
    attach_instruction,
    draw_masks,
    info_nce,
    init_decoder,
    load_labeled_pairs,
    mae_pretrain_step,
    mine_hard_negatives,
    run_recipe,
    train_general,
    train_pretrain,
    train_taskspecific,
    write_checkpoint,
    write_labeled_pairs,
    _mae_loss_and_grads,
)


def unit_rows(rng, b, d):
    x = rng.normal(size=(b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom


def fd_grad(fn, params, h=1e-4):
    grad = np.zeros_like(params)
    it = np.nditer(params, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = params[idx]
        params[idx] = orig + h
        fp = fn()
        params[idx] = orig - h
        fm = fn()
        params[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def info_nce_loss_oracle(q, p, tau, h=None):
    """Direct evaluation of the displayed formula, one term per row."""
    b = q.shape[0]
    terms = []
    for i in range(b):
        pos = math.exp(float(q[i] @ p[i]) / tau)
        denom = sum(math.exp(float(q[i] @ p[j]) / tau) for j in range(b))
        if h is not None:
            denom += math.exp(float(q[i] @ h[i]) / tau)
        terms.append(-math.log(pos / denom))
    return math.fsum(terms) / b


# ---------------------------------------------------------------------------
# InfoNCE closed forms and gradients
# ---------------------------------------------------------------------------

def test_info_nce_single_row_is_exactly_zero():
    rng = np.random.default_rng(0)
    q = unit_rows(rng, 1, 8)
    p = unit_rows(rng, 1, 8)
    assert info_nce(q, p, 0.05).loss == 0.0


def test_info_nce_identical_rows_ln4():
    row = np.zeros((4, 8))
    row[:, 2] = 1.0
    result = info_nce(row, row, 0.1)
    assert abs(result.loss - math.log(4.0)) < 1e-9


def test_info_nce_matches_formula_oracle():
    rng = np.random.default_rng(1)
    q = unit_rows(rng, 5, 8)
    p = unit_rows(rng, 5, 8)
    result = info_nce(q, p, 0.1)
    assert abs(result.loss - info_nce_loss_oracle(q, p, 0.1)) < 1e-12


def test_info_nce_gradients_finite_difference():
    rng = np.random.default_rng(2)
    q = unit_rows(rng, 5, 8)
    p = unit_rows(rng, 5, 8)
    result = info_nce(q, p, 0.1)
    fd_q = fd_grad(lambda: info_nce(q, p, 0.1).loss, q)
    fd_p = fd_grad(lambda: info_nce(q, p, 0.1).loss, p)
    assert rel_err(result.grad_query, fd_q) < 1e-5
    assert rel_err(result.grad_passage, fd_p) < 1e-5


def test_info_nce_hard_negative_gradients():
    rng = np.random.default_rng(3)
    q = unit_rows(rng, 4, 6)
    p = unit_rows(rng, 4, 6)
    h = unit_rows(rng, 4, 6)
    result = info_nce(q, p, 0.2, h)
    assert abs(result.loss - info_nce_loss_oracle(q, p, 0.2, h)) < 1e-12
    fd_h = fd_grad(lambda: info_nce(q, p, 0.2, h).loss, h)
    fd_q = fd_grad(lambda: info_nce(q, p, 0.2, h).loss, q)
    assert rel_err(result.grad_hard, fd_h) < 1e-5
    assert rel_err(result.grad_query, fd_q) < 1e-5


def test_info_nce_permutation_invariance():
    rng = np.random.default_rng(4)
    q = unit_rows(rng, 6, 8)
    p = unit_rows(rng, 6, 8)
    perm = rng.permutation(6)
    assert abs(info_nce(q, p, 0.07).loss - info_nce(q[perm], p[perm], 0.07).loss) < 1e-12


def test_info_nce_bounds():
    rng = np.random.default_rng(5)
    for b, with_hard in ((1, False), (4, False), (6, True)):
        q = unit_rows(rng, b, 8)
        p = unit_rows(rng, b, 8)
        h = unit_rows(rng, b, 8) if with_hard else None
        loss = info_nce(q, p, 0.5, h).loss
        extra = 1 if with_hard else 0
        assert -1e-12 <= loss <= math.log(b + extra) + 2.0 / 0.5


def test_info_nce_input_validation():
    rng = np.random.default_rng(6)
    q = unit_rows(rng, 3, 4)
    with pytest.raises(ValueError, match="temperature"):
        info_nce(q, q, 0.0)
    with pytest.raises(ValueError, match="norm"):
        info_nce(q * 1.01, q, 0.1)
    with pytest.raises(ValueError, match="shape"):
        info_nce(q, unit_rows(rng, 2, 4), 0.1)


def test_temperature_argmax_invariance():
    rng = np.random.default_rng(7)
    q = unit_rows(rng, 6, 8)
    p = unit_rows(rng, 6, 8)
    base = np.argmax(q @ p.T / 0.02, axis=1)
    for tau in (0.05, 0.5, 5.0):
        assert np.array_equal(np.argmax(q @ p.T / tau, axis=1), base)


# ---------------------------------------------------------------------------
# Gradients through the encoder
# ---------------------------------------------------------------------------

def contrastive_param_grads(model, q_seqs, p_seqs, tau):
    cq = forward_token_batch(model.token_table, model.projection, pack_token_seqs(q_seqs))
    cp = forward_token_batch(model.token_table, model.projection, pack_token_seqs(p_seqs))
    result = info_nce(cq.embeddings, cp.embeddings, tau)
    g_table = np.zeros_like(model.token_table)
    g_proj = np.zeros_like(model.projection)
    backward_token_batch(model.projection, cq, result.grad_query, g_table, g_proj)
    backward_token_batch(model.projection, cp, result.grad_passage, g_table, g_proj)
    return result.loss, g_table, g_proj


def contrastive_loss_only(model, q_seqs, p_seqs, tau):
    cq = forward_token_batch(model.token_table, model.projection, pack_token_seqs(q_seqs))
    cp = forward_token_batch(model.token_table, model.projection, pack_token_seqs(p_seqs))
    return info_nce(cq.embeddings, cp.embeddings, tau).loss


def test_contrastive_param_gradients_vs_finite_differences():
    rng = np.random.default_rng(8)
    model = init_model(64, 8, 8, seed=11)
    model.projection += rng.normal(scale=0.05, size=model.projection.shape)
    texts_q = ["alpha beta", "gamma", "delta epsilon zeta"]
    texts_p = ["beta gamma", "alpha delta", "zeta"]
    q_seqs = [tokenize(t, model.tokenizer, model.vocab_buckets) for t in texts_q]
    p_seqs = [tokenize(t, model.tokenizer, model.vocab_buckets) for t in texts_p]
    _, g_table, g_proj = contrastive_param_grads(model, q_seqs, p_seqs, 0.2)
    fn = lambda: contrastive_loss_only(model, q_seqs, p_seqs, 0.2)
    assert rel_err(g_table, fd_grad(fn, model.token_table)) < 1e-4
    assert rel_err(g_proj, fd_grad(fn, model.projection)) < 1e-4


def test_mae_param_gradients_vs_finite_differences():
    model = init_model(64, 8, 8, seed=12)
    decoder = init_decoder(model, 12)
    texts = ["one two three", "four five", "six seven eight nine"]
    seqs = [tokenize(t, model.tokenizer, model.vocab_buckets) for t in texts]
    masks = [[0, 2], [1], [0, 3]]
    loss, g_table, g_proj, g_dec = _mae_loss_and_grads(
        model.token_table, model.projection, decoder, seqs, masks
    )
    assert loss > 0
    fn = lambda: _mae_loss_and_grads(model.token_table, model.projection, decoder, seqs, masks)[0]
    assert rel_err(g_table, fd_grad(fn, model.token_table)) < 1e-4
    assert rel_err(g_proj, fd_grad(fn, model.projection)) < 1e-4
    assert rel_err(g_dec, fd_grad(fn, decoder)) < 1e-4


# ---------------------------------------------------------------------------
# Instructions
# ---------------------------------------------------------------------------

def cfg_task(**kw):
    defaults = dict(stage="taskspecific", batch_size=2, steps=1, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_attach_instruction():
    cfg = cfg_task(instructions={"retrieval": "search relevant passages for the query"})
    out = attach_instruction("what is x", "retrieval", cfg)
    assert out == "search relevant passages for the query what is x"


def test_attach_instruction_empty_and_unknown():
    cfg = cfg_task(instructions={"sts": ""})
    assert attach_instruction("q", "sts", cfg) == "q"
    with pytest.raises(ValidationError, match="nosuch"):
        attach_instruction("q", "nosuch", cfg)


def test_attach_instruction_differs_per_tag():
    cfg = cfg_task(instructions={"a": "find a", "b": "find b"})
    assert attach_instruction("q", "a", cfg) != attach_instruction("q", "b", cfg)


# ---------------------------------------------------------------------------
# Hard-negative mining
# ---------------------------------------------------------------------------

def test_mining_picks_collinear_distractor():
    model = init_model(512, 16, 16, seed=0)
    pair = LabeledTaskPair(TextPair("shared words here", "the true positive"), "t")
    corpus = ["the true positive", "shared words here", "unrelated junk text", "other filler"]
    cfg = cfg_task(instructions={"t": ""}, hard_negative_rank_window=(1, 1))
    mined, stats = mine_hard_negatives(model, [pair], corpus, cfg)
    # the distractor sharing every query token is rank 1 once the positive is excluded
    assert mined[0].hard_negative == "shared words here"
    assert stats.fallbacks == 0


def test_mining_never_selects_positive():
    model = init_model(512, 16, 16, seed=0)
    pair = LabeledTaskPair(TextPair("query words", "Positive  Passage"), "t")
    corpus = ["positive passage", "filler one", "filler two", "filler three"]
    for seed in range(100):
        cfg = cfg_task(instructions={"t": ""}, hard_negative_rank_window=(2, 10), seed=seed)
        mined, _ = mine_hard_negatives(model, [pair], corpus, cfg)
        assert mined[0].hard_negative != "positive passage"


def test_mining_fallback_flagged():
    model = init_model(512, 16, 16, seed=0)
    pair = LabeledTaskPair(TextPair("query words", "the positive"), "t")
    corpus = ["the positive", "only other text"]
    cfg = cfg_task(instructions={"t": ""}, hard_negative_rank_window=(2, 5))
    mined, stats = mine_hard_negatives(model, [pair], corpus, cfg)
    assert mined[0].hard_negative == "only other text"
    assert stats.fallbacks == 1


def test_mining_deterministic():
    model = init_model(512, 16, 16, seed=0)
    pairs = [LabeledTaskPair(TextPair(f"query {i} words", f"positive {i}"), "t") for i in range(4)]
    corpus = [f"candidate text {j}" for j in range(20)] + [f"positive {i}" for i in range(4)]
    cfg = cfg_task(instructions={"t": ""}, hard_negative_rank_window=(2, 8), seed=5)
    a, _ = mine_hard_negatives(model, pairs, corpus, cfg)
    b, _ = mine_hard_negatives(model, pairs, corpus, cfg)
    assert a == b


# ---------------------------------------------------------------------------
# Stage trainers
# ---------------------------------------------------------------------------

def test_train_general_reduces_loss_three_seeds():
    for seed in range(3):
        suite = generate(SynthConfig(seed=seed, topics=4, size=8))
        pairs = suite.unlabeled_pairs[:512]
        model = init_model(1024, 16, 16, seed=seed)
        cfg = TrainConfig("general", batch_size=64, learning_rate=0.05, steps=200, seed=seed)
        _, curve = train_general(model, pairs, cfg)
        assert curve.points[-1][1] < curve.points[0][1]
        assert len(curve.points) == 200


def test_train_general_zero_lr_is_identity():
    suite = generate(SynthConfig(seed=0, topics=4, size=4))
    model = init_model(256, 8, 8, seed=0)
    cfg = TrainConfig("general", batch_size=8, learning_rate=0.0, steps=5, seed=0)
    trained, _ = train_general(model, suite.unlabeled_pairs[:64], cfg)
    assert np.array_equal(trained.token_table, model.token_table)
    assert np.array_equal(trained.projection, model.projection)


def test_train_general_validation():
    model = init_model(64, 8, 8)
    cfg = TrainConfig("general", batch_size=4, steps=1)
    with pytest.raises(ValidationError):
        train_general(model, [], cfg)
    with pytest.raises(ValidationError):
        train_general(model, [TextPair("a b", "c d")], cfg)
    with pytest.raises(ValidationError):
        TrainConfig("general", batch_size=1)


def test_train_deterministic_checkpoints(tmp_path):
    suite = generate(SynthConfig(seed=1, topics=4, size=4))
    model = init_model(256, 8, 8, seed=3)
    cfg = TrainConfig("general", batch_size=16, learning_rate=0.05, steps=20, seed=9)
    a, _ = train_general(model, suite.unlabeled_pairs[:128], cfg)
    b, _ = train_general(model, suite.unlabeled_pairs[:128], cfg)
    write_checkpoint(a, cfg, tmp_path / "a.embm")
    write_checkpoint(b, cfg, tmp_path / "b.embm")
    assert (tmp_path / "a.embm").read_bytes() == (tmp_path / "b.embm").read_bytes()
    assert np.array_equal(a.token_table, b.token_table)


def test_taskspecific_rejects_degenerate_hard_negative():
    model = init_model(256, 8, 8)
    pairs = [
        LabeledTaskPair(TextPair("query one", "passage one"), "t", "Passage  One"),
        LabeledTaskPair(TextPair("query two", "passage two"), "t", "other text"),
    ]
    cfg = cfg_task(instructions={"t": ""})
    with pytest.raises(ValidationError, match="pair 0"):
        train_taskspecific(model, pairs, cfg)


def test_taskspecific_requires_instructions_upfront():
    model = init_model(256, 8, 8)
    pairs = [LabeledTaskPair(TextPair("q one", "p one"), "known", "neg one"),
             LabeledTaskPair(TextPair("q two", "p two"), "unknown", "neg two")]
    cfg = cfg_task(instructions={"known": "find it"})
    with pytest.raises(ValidationError, match="unknown"):
        train_taskspecific(model, pairs, cfg)


def test_taskspecific_zero_steps_unchanged():
    model = init_model(256, 8, 8)
    pairs = [LabeledTaskPair(TextPair(f"q {i}", f"p {i}"), "t", f"n {i}") for i in range(4)]
    cfg = cfg_task(instructions={"t": "find"}, steps=0, batch_size=2)
    trained, curve = train_taskspecific(model, pairs, cfg)
    assert np.array_equal(trained.token_table, model.token_table)
    assert curve.points == []


def test_taskspecific_mines_when_negatives_missing():
    model = init_model(512, 16, 16, seed=0)
    pairs = [LabeledTaskPair(TextPair(f"query {i} words", f"positive {i} text"), "t") for i in range(4)]
    corpus = [f"candidate {j} text" for j in range(12)] + [f"positive {i} text" for i in range(4)]
    cfg = cfg_task(instructions={"t": ""}, batch_size=4, steps=3,
                   hard_negative_rank_window=(1, 6), learning_rate=0.05)
    trained, curve = train_taskspecific(model, pairs, cfg, corpus)
    assert len(curve.points) == 3
    with pytest.raises(ValidationError, match="mining corpus"):
        train_taskspecific(model, pairs, cfg)


# ---------------------------------------------------------------------------
# Masked-reconstruction pre-training
# ---------------------------------------------------------------------------

def test_mae_degenerate_corpus_converges():
    model = init_model(64, 8, 8, seed=1)
    cfg = TrainConfig("pretrain", batch_size=1, learning_rate=2.0, steps=500, seed=0, mask_ratio=0.3)
    _, curve = train_pretrain(model, ["t t t"], cfg)
    assert curve.points[-1][1] < 0.05


def test_mae_zero_lr_constant_loss():
    model = init_model(64, 8, 8, seed=1)
    cfg = TrainConfig("pretrain", batch_size=1, learning_rate=0.0, steps=5, seed=0, mask_ratio=0.3)
    trained, curve = train_pretrain(model, ["t t t"], cfg)
    losses = {loss for _, loss in curve.points}
    assert len(losses) == 1
    assert np.array_equal(trained.token_table, model.token_table)


def test_mae_short_texts_skipped():
    model = init_model(64, 8, 8, seed=1)
    decoder = init_decoder(model, 1)
    rng = np.random.default_rng(0)
    cfg = TrainConfig("pretrain", batch_size=4, mask_ratio=0.3)
    loss, skipped = mae_pretrain_step(model, decoder, ["x", "two tokens", "y"], cfg, rng)
    assert skipped == 2
    assert loss > 0
    with pytest.raises(ValidationError):
        mae_pretrain_step(model, decoder, ["x"], cfg, rng)


def test_draw_masks_at_least_one():
    rng = np.random.default_rng(0)
    masks = draw_masks([[5, 6], [1, 2, 3, 4, 5, 6, 7, 8, 9, 10]], 0.3, rng)
    assert len(masks[0]) == 1
    assert len(masks[1]) == 3
    assert all(0 <= p < 10 for p in masks[1])


# ---------------------------------------------------------------------------
# Full recipe
# ---------------------------------------------------------------------------

def test_run_recipe_zero_steps_identical_checkpoints(tmp_path):
    suite = generate(SynthConfig(seed=0, topics=4, size=4))
    model = init_model(256, 8, 8, seed=0)
    cfgs = (
        TrainConfig("pretrain", steps=0),
        TrainConfig("general", steps=0),
        TrainConfig("taskspecific", steps=0, instructions=suite.instructions),
    )
    m1, m2, m3 = run_recipe(
        suite.pretrain_texts, suite.unlabeled_pairs, suite.labeled_pairs, cfgs, model,
        out_dir=tmp_path,
    )
    for m in (m1, m2, m3):
        assert np.array_equal(m.token_table, model.token_table)
    blobs = {name: (tmp_path / f"model_{name}.embm").read_bytes()
             for name in ("pretrain", "general", "finetune")}
    assert blobs["pretrain"] == blobs["general"] == blobs["finetune"]


def test_run_recipe_without_stage_one_still_trains():
    suite = generate(SynthConfig(seed=2, topics=4, size=4))
    model = init_model(512, 16, 16, seed=2)
    cfgs = (
        TrainConfig("pretrain", steps=0),
        TrainConfig("general", batch_size=16, learning_rate=0.05, steps=10, seed=2),
        TrainConfig("taskspecific", batch_size=8, learning_rate=0.05, steps=5, seed=2,
                    instructions=suite.instructions),
    )
    m1, m2, m3 = run_recipe(
        suite.pretrain_texts, suite.unlabeled_pairs, suite.labeled_pairs, cfgs, model)
    assert np.array_equal(m1.token_table, model.token_table)
    assert not np.array_equal(m2.token_table, m1.token_table)
    assert not np.array_equal(m3.token_table, m2.token_table)


def test_run_recipe_preserves_checkpoints_on_stage_failure(tmp_path):
    suite = generate(SynthConfig(seed=0, topics=4, size=4))
    model = init_model(256, 8, 8, seed=0)
    cfgs = (
        TrainConfig("pretrain", steps=0),
        TrainConfig("general", batch_size=16, learning_rate=0.05, steps=5),
        TrainConfig("taskspecific", steps=5, instructions={}),  # missing instructions
    )
    with pytest.raises(ValidationError):
        run_recipe(suite.pretrain_texts, suite.unlabeled_pairs, suite.labeled_pairs,
                   cfgs, model, out_dir=tmp_path)
    assert (tmp_path / "model_pretrain.embm").exists()
    assert (tmp_path / "model_general.embm").exists()
    assert not (tmp_path / "model_finetune.embm").exists()


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def test_labeled_pairs_roundtrip(tmp_path):
    pairs = [
        LabeledTaskPair(TextPair("q1", "p1", "qa", 0.9), "retrieval", "n1"),
        LabeledTaskPair(TextPair("q2", "p2"), "sts", None),
    ]
    write_labeled_pairs(pairs, tmp_path / "pairs.jsonl")
    assert load_labeled_pairs(tmp_path / "pairs.jsonl") == pairs


def test_loss_curve_csv(tmp_path):
    suite = generate(SynthConfig(seed=0, topics=4, size=4))
    model = init_model(256, 8, 8, seed=0)
    cfg = TrainConfig("general", batch_size=8, learning_rate=0.05, steps=3, seed=0)
    _, curve = train_general(model, suite.unlabeled_pairs[:64], cfg)
    curve.write_csv(tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text(encoding="utf-8").strip().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == 4
    assert lines[1].startswith("0,")


def test_checkpoint_sidecar(tmp_path):
    import json

    model = init_model(64, 8, 8)
    cfg = TrainConfig("general", batch_size=4, steps=2, seed=7)
    write_checkpoint(model, cfg, tmp_path / "model.embm")
    sidecar = json.loads((tmp_path / "model.config.json").read_text(encoding="utf-8"))
    assert sidecar["stage"] == "general"
    assert sidecar["seed"] == 7
    assert np.array_equal(load_model(tmp_path / "model.embm").token_table, model.token_table)
