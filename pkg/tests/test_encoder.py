import numpy as np
import pytest

from napgen import autodiff as ad
from napgen.autodiff import Tensor, finite_difference_gradient
from napgen.data import Example, GenSpec, generate_dataset
from napgen.dsl import CONSTANT_NAMES, parse_program
from napgen.encoder import (
    CLS_TOKEN,
    EncoderConfig,
    EncoderParams,
    InputError,
    NUM_TOKEN,
    Vocab,
    align_operand,
    align_program,
    build_input,
    build_vocab,
    encode,
    encoder_layer_forward,
    sinusoidal_positions,
    step_token,
)


def tiny_example(n_numbers=3, step_count=1, program="add(10.5,20.25)"):
    question = ["what", "is", "the", "sum", "of", "cost", "and", "margin", "?"]
    sentences = []
    numbers = {}
    values = [10.5, 20.25, 7.75][:n_numbers]
    names = ["cost", "margin", "debt"]
    for name, value in zip(names[:n_numbers], values):
        base = len(question) + len(sentences)
        sentences.extend([name, "was"])
        numbers[base + 2] = value
        sentences.append(repr(value))
        sentences.append(".")
    return Example(
        id="t-0",
        question_tokens=question,
        sentence_tokens=sentences,
        numbers=numbers,
        answer="30.75",
        step_count=step_count,
        gold_program=parse_program(program),
    )


@pytest.fixture()
def vocab():
    return build_vocab([tiny_example()], n_max_steps=4)


class TestVocab:
    def test_specials_constants_steps_present(self, vocab):
        for token in (CLS_TOKEN, NUM_TOKEN, "#0", "#3", "const_2", "const_100"):
            assert token in vocab.token_to_id

    def test_number_surfaces_not_in_vocab(self, vocab):
        assert "10.5" not in vocab.token_to_id

    def test_unknown_maps_to_unk(self, vocab):
        assert vocab.id("zzz-never-seen") == vocab.id("[UNK]")

    def test_deterministic(self):
        a = build_vocab([tiny_example()], 4)
        b = build_vocab([tiny_example()], 4)
        assert a.token_to_id == b.token_to_id

    def test_round_trip(self, vocab):
        again = Vocab.from_dict(vocab.to_dict())
        assert again.token_to_id == vocab.token_to_id
        assert again.n_max_steps == vocab.n_max_steps


class TestLayout:
    def test_prefix_layout(self, vocab):
        ex = tiny_example()
        mi = build_input(ex, vocab)
        # [CLS], constants, step slots, then context
        assert mi.tokens[0] == CLS_TOKEN
        assert mi.tokens[1:1 + len(CONSTANT_NAMES)] == list(CONSTANT_NAMES)
        n = vocab.n_max_steps
        steps = mi.tokens[1 + len(CONSTANT_NAMES):1 + len(CONSTANT_NAMES) + n]
        assert steps == [step_token(k) for k in range(n)]
        assert mi.context_start == 1 + len(CONSTANT_NAMES) + n
        assert mi.tokens[mi.context_start] == "what"

    def test_candidate_counts(self, vocab):
        ex = tiny_example(n_numbers=3)
        mi = build_input(ex, vocab)
        assert len(mi.const_positions) == len(CONSTANT_NAMES)
        assert len(mi.step_positions) == vocab.n_max_steps
        assert len(mi.number_values) == 3
        expected = len(CONSTANT_NAMES) + vocab.n_max_steps + 3
        assert int(mi.candidate_mask.sum()) == expected

    def test_numbers_share_placeholder_id(self, vocab):
        ex = tiny_example(n_numbers=2)
        mi = build_input(ex, vocab)
        ids = {int(mi.token_ids[pos]) for pos in mi.number_values}
        assert ids == {vocab.id(NUM_TOKEN)}

    def test_number_surface_kept_for_rendering(self, vocab):
        ex = tiny_example()
        mi = build_input(ex, vocab)
        surfaces = {mi.tokens[pos] for pos in mi.number_values}
        assert "10.5" in surfaces

    def test_local_to_model_round_trip(self, vocab):
        ex = tiny_example()
        mi = build_input(ex, vocab)
        local = ex.question_tokens + ex.sentence_tokens
        for local_pos, model_pos in mi.local_to_model.items():
            if local_pos in ex.numbers:
                assert model_pos in mi.number_values
            else:
                assert mi.tokens[model_pos] == local[local_pos]

    def test_too_long_rejected(self, vocab):
        ex = tiny_example()
        with pytest.raises(InputError):
            build_input(ex, vocab, max_len=16)

    def test_digit_tokens_mode(self, vocab):
        ex = tiny_example(n_numbers=1, program="add(10.5,const_1)")
        mi = build_input(ex, vocab, digit_tokens=True)
        pos = next(iter(mi.number_values))
        assert mi.tokens[pos] == "1"
        assert mi.tokens[pos + 1] == "0"
        assert mi.tokens[pos + 2] == "."
        assert mi.tokens[pos + 3] == "5"
        assert len(mi.number_values) == 1


class TestAlignment:
    def test_literal_alignment(self, vocab):
        ex = tiny_example()
        mi = build_input(ex, vocab)
        pairs = align_program(ex.gold_program, mi)
        assert len(pairs) == 1
        first, second = pairs[0]
        assert mi.number_values[first] == 10.5
        assert mi.number_values[second] == 20.25

    def test_constant_and_step_alignment(self, vocab):
        ex = tiny_example(step_count=2, program="add(10.5,20.25), divide(#0,const_2)")
        mi = build_input(ex, vocab)
        pairs = align_program(ex.gold_program, mi)
        assert mi.step_positions[pairs[1][0]] == 0
        assert mi.const_positions[pairs[1][1]] == "const_2"

    def test_unmatched_literal_rejected(self, vocab):
        ex = tiny_example(program="add(999.0,20.25)")
        with pytest.raises(InputError):
            build_input(ex, vocab)

    def test_too_many_steps_rejected(self, vocab):
        ex = tiny_example(
            step_count=5,
            program="add(10.5,20.25), add(#0,7.75), add(#1,const_1), "
                    "add(#2,const_1), add(#3,const_1)",
        )
        with pytest.raises(InputError):
            build_input(ex, vocab)


class TestPositions:
    def test_shape_and_range(self):
        pos = sinusoidal_positions(32, 8)
        assert pos.shape == (32, 8)
        assert np.max(np.abs(pos)) <= 1.0

    def test_first_row_alternates_zero_one(self):
        pos = sinusoidal_positions(4, 6)
        np.testing.assert_allclose(pos[0], [0, 1, 0, 1, 0, 1])

    def test_rows_distinct(self):
        pos = sinusoidal_positions(64, 16)
        assert len({tuple(np.round(row, 9)) for row in pos}) == 64


class TestEncode:
    def test_output_shapes(self, vocab):
        ex = tiny_example()
        mi = build_input(ex, vocab)
        config = EncoderConfig(d_model=16, n_layers=1, n_heads=2, ffn_hidden=32)
        params = EncoderParams.create(np.random.default_rng(0), vocab.size, config)
        out = encode(mi, params)
        assert out.hidden.shape == (len(mi), 16)
        assert out.cls.shape == (1, 16)
        np.testing.assert_array_equal(out.cls.data, out.hidden.data[:1])

    def test_deterministic(self, vocab):
        ex = tiny_example()
        mi = build_input(ex, vocab)
        config = EncoderConfig(d_model=16, n_layers=2, n_heads=2, ffn_hidden=32)
        params = EncoderParams.create(np.random.default_rng(1), vocab.size, config)
        a = encode(mi, params).hidden.data
        b = encode(mi, params).hidden.data
        np.testing.assert_array_equal(a, b)

    def test_heads_must_divide_d_model(self):
        with pytest.raises(ValueError):
            EncoderConfig(d_model=16, n_heads=3)

    def test_layer_gradients_match_finite_differences(self):
        config = EncoderConfig(d_model=8, n_layers=1, n_heads=2, ffn_hidden=16)
        params = EncoderParams.create(np.random.default_rng(2), 11, config)
        layer = params.layers[0]
        x_data = np.random.default_rng(3).normal(size=(5, 8))
        pick = np.random.default_rng(4).normal(size=(5, 8))

        def loss():
            out = encoder_layer_forward(Tensor(x_data), layer, config)
            return ad.mul(out, Tensor(pick)).sum()

        for name, p in (("w_qkv", layer.w_qkv), ("w_out", layer.w_out),
                        ("ln1_g", layer.ln1_g), ("ffn.w1", layer.ffn.w1)):
            p.grad = None
            loss().backward()
            idx = np.arange(0, p.data.size, max(1, p.data.size // 16))
            _, fd = finite_difference_gradient(loss, p, indices=idx)
            auto = p.grad.ravel()[idx]
            denom = np.maximum(np.abs(fd), 1.0)
            assert np.max(np.abs(auto - fd) / denom) < 1e-6, name

    def test_named_parameter_count_stable(self):
        config = EncoderConfig(d_model=8, n_layers=2, n_heads=2, ffn_hidden=16)
        params = EncoderParams.create(np.random.default_rng(0), 7, config)
        named = params.named()
        assert len(named) == 3 + 2 * 12
        assert "encoder.tok_emb" in named
        assert "encoder.layer1.ffn.w1" in named


class TestGeneratedDataFitsLayout:
    def test_generated_examples_build(self):
        spec = GenSpec(n_examples=40, step_dist={1: 0.5, 2: 0.3, 3: 0.2},
                       span_fraction=0.1, numbers_range=(4, 6), seed=5,
                       splits=(1.0, 0.0, 0.0))
        examples = generate_dataset(spec)["train"]
        vocab = build_vocab(examples, n_max_steps=5)
        for ex in examples:
            mi = build_input(ex, vocab)
            assert len(mi) <= 256
            if ex.gold_program is not None:
                pairs = align_program(ex.gold_program, mi)
                assert len(pairs) == ex.step_count
