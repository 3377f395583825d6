import math

import numpy as np
import pytest

from promptparse.prompt_lm import autograd as ag
from promptparse.prompt_lm.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from promptparse.prompt_lm.gradcheck import grad_check, random_example, tiny_config
from promptparse.prompt_lm.model import (
    PROMPT,
    ModelConfig,
    ModelScorer,
    SequenceTooLong,
    batch_loss,
    forward_logprobs,
    greedy_decode,
    init_model,
    loss_and_gradients,
    source_batch,
    teacher_forcing_batch,
)
from promptparse.prompt_lm.train import TrainConfig, train


def _expected_count(V, d, L, K, n_enc, n_dec):
    f = 4 * d
    attn = 4 * d * d + 3 * d  # no key bias
    ln = 2 * d
    ffn = 2 * d * f + f + d
    enc = n_enc * (2 * ln + attn + ffn) + ln
    dec = n_dec * (3 * ln + 2 * attn + ffn) + ln
    return V * d + 2 * L * d + enc + dec + V + K * d


def test_parameter_count_oracle():
    model = init_model(tiny_config())
    assert model.num_parameters() == _expected_count(16, 8, 8, 4, 1, 1) == 2360
    assert model.num_parameters("prompt") == 4 * 8
    assert model.num_parameters() <= 5000
    cfg = ModelConfig(vocab_size=100)
    assert init_model(cfg).num_parameters() == _expected_count(100, 64, 64, 20, 2, 2)


# -- reference forward pass ---------------------------------------------------

def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def _attn(P, pre, xq, xkv, keep, h):
    d = xq.shape[-1]
    dh = d // h
    q = xq @ P[pre + ".wq"] + P[pre + ".bq"]
    k = xkv @ P[pre + ".wk"]
    v = xkv @ P[pre + ".wv"] + P[pre + ".bv"]
    out = np.zeros_like(q)
    for j in range(h):
        sl = slice(j * dh, (j + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        s = np.where(keep, s, -np.inf)
        w = np.exp(s - s.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        out[:, sl] = w @ v[:, sl]
    return out @ P[pre + ".wo"] + P[pre + ".bo"]


def _ffn(P, pre, x):
    return _gelu(x @ P[pre + ".w1"] + P[pre + ".b1"]) @ P[pre + ".w2"] + P[pre + ".b2"]


def reference_logits(P, cfg, src, tgt_in):
    """Single-example forward written out step by step."""
    h = cfg.n_heads
    src = list(src) + [2]
    x = P["embed.tokens"][src] + P["embed.enc_pos"][: len(src)]
    if cfg.prompt_len:
        x = np.vstack([P[PROMPT], x])
    for i in range(cfg.n_enc_layers):
        p = f"encoder.{i}"
        a = _ln(x, P[p + ".ln_attn.gain"], P[p + ".ln_attn.bias"])
        x = x + _attn(P, p + ".self_attn", a, a, np.ones((len(x), len(x)), bool), h)
        x = x + _ffn(P, p + ".ffn", _ln(x, P[p + ".ln_ffn.gain"], P[p + ".ln_ffn.bias"]))
    mem = _ln(x, P["encoder.ln_out.gain"], P["encoder.ln_out.bias"])
    T = len(tgt_in)
    y = P["embed.tokens"][tgt_in] + P["embed.dec_pos"][:T]
    causal = np.tril(np.ones((T, T), bool))
    for i in range(cfg.n_dec_layers):
        p = f"decoder.{i}"
        a = _ln(y, P[p + ".ln_self.gain"], P[p + ".ln_self.bias"])
        y = y + _attn(P, p + ".self_attn", a, a, causal, h)
        a = _ln(y, P[p + ".ln_cross.gain"], P[p + ".ln_cross.bias"])
        y = y + _attn(P, p + ".cross_attn", a, mem, np.ones((T, len(mem)), bool), h)
        y = y + _ffn(P, p + ".ffn", _ln(y, P[p + ".ln_ffn.gain"], P[p + ".ln_ffn.bias"]))
    y = _ln(y, P["decoder.ln_out.gain"], P["decoder.ln_out.bias"])
    return y @ P["embed.tokens"].T + P["output.b"]


@pytest.mark.parametrize("prompt_len", [0, 3])
def test_forward_matches_reference(prompt_len):
    cfg = tiny_config(vocab_size=12, prompt_len=prompt_len, d_model=4, n_heads=2, n_enc_layers=2, n_dec_layers=2, init_std=0.5)
    model = init_model(cfg)
    P = model.state()
    rng = np.random.default_rng(0)
    for P_key in ("output.b", "encoder.0.self_attn.bq", "decoder.1.ln_ffn.bias"):
        P[P_key] = rng.normal(0, 0.3, P[P_key].shape)
    model.load_state(P)
    src, tgt = random_example(cfg, seed=1, src_len=4, tgt_len=3)
    tgt_in = [1] + tgt
    with ag.no_grad():
        s, keep = source_batch([src])
        mem, mkeep = model.encode(s, keep)
        logits = model.decode(np.array([tgt_in]), mem, mkeep).data[0]
    np.testing.assert_allclose(logits, reference_logits(P, cfg, src, tgt_in), rtol=0, atol=1e-12)


def test_padding_does_not_change_scores():
    cfg = tiny_config()
    model = init_model(cfg)
    short = random_example(cfg, seed=1, src_len=2, tgt_len=2)
    long = random_example(cfg, seed=2, src_len=6, tgt_len=5)
    alone = float(batch_loss(model, [short]).data)
    other = float(batch_loss(model, [long]).data)
    both = float(batch_loss(model, [short, long]).data)
    n_short, n_long = len(short[1]) + 1, len(long[1]) + 1
    assert both == pytest.approx((alone * n_short + other * n_long) / (n_short + n_long), abs=1e-12)


def test_next_token_distribution_normalized():
    model = init_model(tiny_config())
    lp = forward_logprobs(model, [4, 5, 6], [7])
    assert lp.shape == (16,)
    assert math.fsum(np.exp(lp)) == pytest.approx(1.0, abs=1e-12)


def test_scorer_batch_agrees_with_single_calls():
    model = init_model(tiny_config())
    scorer = ModelScorer(model)
    prefixes = [[4], [5], [9]]
    batch = scorer.score_batch([6, 7], prefixes)
    for row, p in zip(batch, prefixes):
        np.testing.assert_allclose(row, forward_logprobs(model, [6, 7], p), atol=1e-12)


def test_zero_prompt_length_matches_prompt_removed():
    with_prompt = init_model(tiny_config(prompt_len=4))
    plain = init_model(tiny_config(prompt_len=0))
    stripped = with_prompt.without_prompt()
    assert stripped.config.prompt_len == 0
    assert set(stripped.state()) == set(plain.state())
    for name, value in plain.state().items():
        assert np.array_equal(stripped.state()[name], value)
    np.testing.assert_array_equal(forward_logprobs(stripped, [4, 5], []), forward_logprobs(plain, [4, 5], []))


def test_prompt_influences_output():
    model = init_model(tiny_config())
    before = forward_logprobs(model, [4, 5], [6])
    # a constant shift per row would vanish under layer norm, so perturb randomly
    noise = np.random.default_rng(0).normal(0, 0.5, model.params[PROMPT].shape)
    model.params[PROMPT].data = model.params[PROMPT].data + noise
    assert not np.allclose(before, forward_logprobs(model, [4, 5], [6]))


def test_prompt_initialized_from_token_rows():
    model = init_model(tiny_config())
    emb = model.params["embed.tokens"].data[4:]
    for row in model.params[PROMPT].data:
        assert any(np.array_equal(row, e) for e in emb)


def test_zero_output_weights_give_uniform_loss():
    cfg = tiny_config()
    model = init_model(cfg)
    model.params["embed.tokens"].data[:] = 0.0
    model.params["output.b"].data[:] = 0.0
    loss = float(batch_loss(model, [random_example(cfg)]).data)
    assert loss == pytest.approx(math.log(cfg.vocab_size), abs=1e-12)


def test_initial_loss_near_uniform():
    cfg = ModelConfig(vocab_size=80, d_model=32, n_enc_layers=1, n_dec_layers=1, prompt_len=5)
    model = init_model(cfg)
    batch = [random_example(cfg, seed=s, src_len=8, tgt_len=8) for s in range(8)]
    loss = float(batch_loss(model, batch).data)
    assert abs(loss - math.log(80)) / math.log(80) < 0.05


def test_sequence_too_long():
    cfg = tiny_config()
    model = init_model(cfg)
    with pytest.raises(SequenceTooLong):
        batch_loss(model, [([4] * 8, [5])])


def test_init_is_seeded():
    a = init_model(tiny_config(seed=3)).state()
    b = init_model(tiny_config(seed=3)).state()
    c = init_model(tiny_config(seed=4)).state()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["embed.tokens"], c["embed.tokens"])


# -- gradients ----------------------------------------------------------------

@pytest.mark.parametrize("partition", ["all", "prompt"])
def test_gradient_check(partition):
    cfg = tiny_config()
    report = grad_check(init_model(cfg), random_example(cfg), partition=partition)
    assert report.passed, (report.worst, report.max_error)
    assert report.max_error <= 1e-4
    assert set(report.per_parameter) == set(init_model(cfg).names(partition))


def test_gradient_check_catches_a_wrong_rule(monkeypatch):
    good = ag.BACKWARD_RULES["gelu"]

    def flipped(ctx, g, needs):
        return tuple(-x for x in good(ctx, g, needs))

    monkeypatch.setitem(ag.BACKWARD_RULES, "gelu", flipped)
    cfg = tiny_config()
    report = grad_check(init_model(cfg), random_example(cfg), partition="all")
    assert not report.passed
    assert any(".ffn." in name for name in report.offenders())
    assert "embed.enc_pos" in report.offenders() or "encoder.0.ffn.w1" in report.offenders()


def test_gradients_cover_only_the_partition():
    cfg = tiny_config()
    model = init_model(cfg)
    _, grads = loss_and_gradients(model, [random_example(cfg)], "prompt")
    assert list(grads) == [PROMPT]
    _, grads = loss_and_gradients(model, [random_example(cfg)], "all")
    assert set(grads) == set(model.names())


# -- training -----------------------------------------------------------------

def _toy_pairs(n, seed, V=16):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        src = rng.integers(4, V, size=int(rng.integers(2, 5))).tolist()
        pairs.append((src, list(reversed(src))))
    return pairs


def test_prompt_tuning_freezes_backbone():
    cfg = tiny_config(init_std=0.02)
    model = init_model(cfg)
    before = {k: v.tobytes() for k, v in model.state().items()}
    data = _toy_pairs(32, 0)
    # train() updates the model in place; its return value is the best snapshot
    train(model, data, data[:4], TrainConfig(mode="prompt", max_epochs=1000, eval_interval=1000), max_steps=100)
    for name, value in model.state().items():
        if name == PROMPT:
            assert value.tobytes() != before[name]
        else:
            assert value.tobytes() == before[name], name


def test_zero_learning_rate_changes_nothing():
    cfg = tiny_config(init_std=0.02)
    model = init_model(cfg)
    before = model.state()
    data = _toy_pairs(16, 1)
    tuned, _ = train(model, data, data[:4], TrainConfig(mode="finetune", lr=0.0, max_epochs=3, eval_interval=3))
    assert all(np.array_equal(before[k], v) for k, v in tuned.state().items())


def test_training_reduces_loss_and_is_deterministic():
    cfg = tiny_config(init_std=0.02, dropout=0.1)
    data = _toy_pairs(32, 2)
    runs = []
    for _ in range(2):
        model = init_model(cfg)
        start = float(batch_loss(model, data).data)
        _, hist = train(model, data, data[:8], TrainConfig(mode="finetune", lr=1e-2, max_epochs=20, eval_interval=10))
        runs.append((model.state(), hist))
    assert float(batch_loss(model, data).data) < start
    assert runs[0][1] == runs[1][1]
    assert all(np.array_equal(runs[0][0][k], runs[1][0][k]) for k in runs[0][0])


def test_dropout_only_with_a_generator():
    cfg = tiny_config(dropout=0.3)
    model = init_model(cfg)
    batch = [random_example(cfg)]
    plain = float(batch_loss(model, batch).data)
    assert float(batch_loss(model, batch).data) == plain
    a = float(batch_loss(model, batch, np.random.default_rng(0)).data)
    b = float(batch_loss(model, batch, np.random.default_rng(0)).data)
    assert a == b != plain
    with pytest.raises(ValueError):
        tiny_config(dropout=1.0)


def test_greedy_decode_matches_scorer_argmax():
    cfg = tiny_config()
    model = init_model(cfg)
    (out,) = greedy_decode(model, [[4, 5, 6]], max_len=5)
    prefix = []
    scorer = ModelScorer(model)
    while len(prefix) < 5:
        tok = int(np.argmax(scorer([4, 5, 6], prefix)))
        if tok == 2:
            break
        prefix.append(tok)
    assert prefix == out


def test_teacher_forcing_layout():
    tgt_in, labels, weights = teacher_forcing_batch([[5, 6], [7]])
    assert tgt_in.tolist() == [[1, 5, 6], [1, 7, 0]]
    assert labels.tolist() == [[5, 6, 2], [7, 2, 0]]
    assert weights.tolist() == [[1, 1, 1], [1, 1, 0]]


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = init_model(tiny_config())
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, extra={"note": "x"})
    again, extra = load_checkpoint(path, with_extra=True)
    assert extra == {"note": "x"}
    assert again.config == model.config
    for k, v in model.state().items():
        assert again.state()[k].tobytes() == v.tobytes()
    save_checkpoint(again, tmp_path / "again.ckpt", extra={"note": "x"})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_model(tiny_config()), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
