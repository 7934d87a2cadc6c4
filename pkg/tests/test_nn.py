import math

import numpy as np
import pytest

from roundcast.errors import (
    CapacityError,
    ContractError,
    DataError,
    DimensionError,
    NumericError,
    ParameterError,
)
from roundcast.nn import (
    EncoderLayer,
    LayerNorm,
    Linear,
    LstmLayer,
    MultiHeadAttention,
    ParamSet,
    SequenceClassifier,
    dropout,
    gradient_check,
    masked_mean_pool,
    positional_encoding,
)
from roundcast.tensor import SeededRng, sigmoid


def _zero(params: ParamSet) -> None:
    params.load({name: np.zeros(p.shape) for name, p in params})


def _layer_norm(x: np.ndarray) -> np.ndarray:
    return (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)


@pytest.fixture
def small_rounds(random_round):
    """Two rounds of lengths 4 and 3 (B=2, T=4 once padded)."""
    return [random_round(4, seed=1, winner=1), random_round(3, seed=2, round_index=1)]


# -------------------------
# Gradients
# -------------------------
def test_linear_gradients():
    layer = Linear(3, 2, SeededRng(0))
    x = SeededRng(1).uniform((2, 3), -1.0, 1.0)
    # The map is linear in its parameters, so a wide step is exact.
    assert gradient_check(layer, x, eps=1e-3) < 1e-8


def test_layer_norm_gradients():
    norm = LayerNorm(4)
    norm.gamma.value[:] = [0.5, 1.5, -1.0, 2.0]
    x = SeededRng(2).uniform((3, 4), -1.0, 1.0)
    assert gradient_check(norm, x) < 1e-6


def test_lstm_layer_gradients():
    layer = LstmLayer(2, 8, SeededRng(0))
    x = SeededRng(3).uniform((2, 3, 2), 0.0, 1.0)
    assert gradient_check(layer, x, np.array([3, 2])) < 1e-6


def test_encoder_layer_gradients():
    layer = EncoderLayer(8, 4, 8, 0.3, SeededRng(0))
    x = SeededRng(4).uniform((2, 4, 8), -1.0, 1.0)
    mask = np.array([[True] * 4, [True, True, True, False]])
    assert gradient_check(layer, x, mask) < 1e-6


@pytest.mark.parametrize("architecture", ["lstm", "transformer"])
def test_classifier_gradients(architecture, make_model, make_batch, small_rounds):
    model = make_model(architecture)
    batch = make_batch(model, small_rounds)
    assert batch.features.shape == (2, 4, 2)
    assert gradient_check(model, batch) < 1e-6


def test_gradient_check_needs_inference_mode(make_model, make_batch, small_rounds):
    model = make_model("lstm")
    with pytest.raises(ContractError):
        gradient_check(
            model,
            make_batch(model, small_rounds),
            forward_kwargs={"training": True, "rng": SeededRng(0)},
        )


def test_lstm_backward_is_linear_in_upstream_gradient():
    layer = LstmLayer(2, 8, SeededRng(0))
    x = SeededRng(5).uniform((2, 3, 2), 0.0, 1.0)
    _, cache = layer.forward(x, [3, 3])
    layer.backward(cache, np.zeros((2, 3, 8)))
    assert all(not p.grad.any() for _, p in layer.params)
    grad = SeededRng(6).uniform((2, 3, 8), -1.0, 1.0)
    layer.backward(cache, grad)
    once = {name: p.grad.copy() for name, p in layer.params}
    layer.params.zero_grad()
    layer.backward(cache, 2.0 * grad)
    for name, p in layer.params:
        assert np.array_equal(p.grad, 2.0 * once[name])


# -------------------------
# Forward semantics
# -------------------------
def test_zero_lstm_outputs_zero():
    layer = LstmLayer(2, 8, SeededRng(0))
    _zero(layer.params)
    hidden, _ = layer.forward(np.ones((4, 320, 2)), [320] * 4)
    assert hidden.shape == (4, 320, 8)
    assert not hidden.any()


def test_lstm_single_step_matches_hand_recurrence():
    layer = LstmLayer(2, 1, SeededRng(0))
    layer.params.load(
        {
            "lstm.W": np.array([[0.1, 0.2, 0.3, 0.4], [0.5, -0.6, 0.7, -0.8]]),
            "lstm.U": np.array([[0.9, 0.9, 0.9, 0.9]]),
            "lstm.b": np.array([0.01, 0.02, 0.03, 0.04]),
        }
    )
    x = np.array([[[0.3, 0.7]]])
    hidden, _ = layer.forward(x, [1])
    z = np.array(
        [
            0.3 * 0.1 + 0.7 * 0.5,
            0.3 * 0.2 - 0.7 * 0.6,
            0.3 * 0.3 + 0.7 * 0.7,
            0.3 * 0.4 - 0.7 * 0.8,
        ]
    )
    z += [0.01, 0.02, 0.03, 0.04]
    i, g, o = sigmoid(z[0]), math.tanh(z[2]), sigmoid(z[3])
    assert abs(hidden[0, 0, 0] - o * math.tanh(i * g)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_lstm_hidden_state_stays_in_unit_range(seed):
    rng = SeededRng(seed)
    layer = LstmLayer(2, 8, rng)
    layer.params.load({name: 10.0 * p.value for name, p in layer.params})
    layer.b.value[:] = rng.uniform(32, -5.0, 5.0)
    hidden, _ = layer.forward(rng.uniform((3, 200, 2), -50.0, 50.0), [200, 120, 7])
    assert np.abs(hidden).max() <= 1.0


def test_lstm_rejects_non_finite_input():
    layer = LstmLayer(2, 8, SeededRng(0))
    x = np.zeros((1, 2, 2))
    x[0, 1, 0] = np.nan
    with pytest.raises(NumericError):
        layer.forward(x, [2])


def test_positional_encoding_table():
    table = positional_encoding(722, 8)
    assert table.shape == (722, 8)
    assert np.array_equal(table[0], [0, 1, 0, 1, 0, 1, 0, 1])
    assert abs(table[1, 0] - 0.841471) < 1e-6
    with pytest.raises(ParameterError):
        positional_encoding(10, 7)


def test_attention_with_zero_scores_averages_valid_values():
    attention = MultiHeadAttention(8, 4, SeededRng(0))
    _zero(attention.params)
    attention.value.weight.value[:] = np.eye(8)
    attention.output.weight.value[:] = np.eye(8)
    x = SeededRng(1).uniform((1, 3, 8), -1.0, 1.0)
    mask = np.array([[True, True, False]])
    out, cache = attention.forward(x, mask)
    expected = x[0, :2].mean(axis=0)
    assert np.allclose(out[0], expected, atol=1e-12)
    assert np.all(cache.weights[:, :, 2] == 0.0)


def test_attention_heads_must_divide_width():
    with pytest.raises(DimensionError):
        MultiHeadAttention(8, 3, SeededRng(0))


def test_encoder_with_zero_sublayers_normalizes_twice():
    layer = EncoderLayer(8, 4, 8, 0.3, SeededRng(0))
    for name, p in layer.params:
        if not name.endswith(("gamma", "beta")):
            p.value[...] = 0.0
    x = SeededRng(2).uniform((2, 5, 8), -3.0, 3.0)
    out, _ = layer.forward(x, np.ones((2, 5), bool))
    assert out.shape == x.shape
    assert np.allclose(out, _layer_norm(_layer_norm(x)), atol=1e-12)


def test_dropout_modes():
    x = np.ones(1_000_000)
    assert dropout(x, 0.3, SeededRng(0), training=False) is x
    assert dropout(x, 0.0, SeededRng(0), training=True) is x
    dropped = dropout(x, 0.3, SeededRng(0), training=True)
    assert abs(dropped.mean() - 1.0) < 0.005
    assert set(np.unique(dropped)) <= {0.0, 1.0 / 0.7}
    with pytest.raises(ParameterError):
        dropout(x, 1.0)
    with pytest.raises(ContractError):
        dropout(x, 0.3, None, training=True)


def test_masked_mean_pool():
    assert np.array_equal(
        masked_mean_pool(np.array([[[1.0, 3.0]], [[5.0, 7.0]]]), np.ones((2, 1), bool)),
        [[1.0, 3.0], [5.0, 7.0]],
    )
    padded = np.array([[[2.0, 2.0], [9.0, 9.0]]])
    pooled = masked_mean_pool(padded, np.array([[True, False]]))
    assert np.array_equal(pooled, [[2.0, 2.0]])
    with pytest.raises(DataError):
        masked_mean_pool(padded, np.zeros((1, 2), bool))


def test_masked_mean_pool_ignores_extra_masked_steps():
    x = SeededRng(9).uniform((1, 5, 3), -1.0, 1.0)
    mask = np.array([[True, True, True, False, False]])
    longer = np.concatenate([x, SeededRng(10).uniform((1, 20, 3), -9.0, 9.0)], axis=1)
    longer_mask = np.concatenate([mask, np.zeros((1, 20), bool)], axis=1)
    pooled = masked_mean_pool(x, mask)
    assert np.array_equal(pooled, masked_mean_pool(longer, longer_mask))


# -------------------------
# Classifiers
# -------------------------
def test_parameter_names_and_init(make_model):
    model = make_model("lstm")
    assert model.params.names() == [
        "lstm.W",
        "lstm.U",
        "lstm.b",
        "head.weight",
        "head.bias",
    ]
    assert np.abs(model.params["lstm.W"].value).max() <= 1 / math.sqrt(2)
    assert np.abs(model.params["lstm.U"].value).max() <= 1 / math.sqrt(8)
    assert not model.params["lstm.b"].value.any()
    with pytest.raises(ContractError):
        model.params.add("head.bias", np.zeros(1))


def test_transformer_parameter_layout(make_model):
    model = make_model("transformer")
    names = model.params.names()
    assert names[:2] == ["embed.weight", "embed.bias"]
    assert "encoder.0.attn.query.weight" in names
    assert "encoder.0.norm2.gamma" in names
    assert names[-2:] == ["head.weight", "head.bias"]
    head = np.abs(model.params["head.weight"].value).max()
    assert 0.0 < head <= 0.1 / math.sqrt(model.config.d_model)


def test_zero_network_logits_equal_head_bias(make_model, make_batch, small_rounds):
    model = make_model("lstm")
    _zero(model.params)
    model.params["head.bias"].value[:] = 0.25
    logits = model.predict_logits(make_batch(model, small_rounds))
    assert np.array_equal(logits, [0.25, 0.25])


@pytest.mark.parametrize("architecture", ["lstm", "transformer"])
def test_padding_does_not_change_logits(
    architecture, make_model, make_batch, random_round
):
    model = make_model(architecture)
    short = random_round(6, seed=1)
    alone = model.predict_logits(make_batch(model, [short]))
    longer = random_round(16, seed=2)
    padded = model.predict_logits(make_batch(model, [short, longer]))
    assert abs(alone[0] - padded[0]) < 1e-9


@pytest.mark.parametrize("architecture", ["lstm", "transformer"])
def test_batch_order_does_not_matter(
    architecture, make_model, make_batch, random_round
):
    model = make_model(architecture)
    rounds = [random_round(5, seed=1), random_round(8, seed=2), random_round(5, seed=1)]
    logits = model.predict_logits(make_batch(model, rounds))
    reordered = model.predict_logits(make_batch(model, rounds[::-1]))
    assert np.allclose(logits, reordered[::-1], rtol=0, atol=1e-12)
    assert abs(logits[0] - logits[2]) < 1e-12


def test_batch_shapes(make_model, make_batch, random_round):
    lstm = make_model("lstm")
    rounds = [random_round(4, seed=i) for i in range(64)]
    assert lstm.predict_logits(make_batch(lstm, rounds)).shape == (64,)
    transformer = make_model("transformer")
    probabilities = transformer.predict_proba(make_batch(transformer, rounds[:28]))
    assert probabilities.shape == (28,)
    assert np.all((probabilities > 0) & (probabilities < 1))


def test_transformer_capacity(make_model, make_batch, random_round):
    model = make_model("transformer")
    with pytest.raises(CapacityError):
        model.forward(make_batch(model, [random_round(723)]))


def test_pad_value_must_match_architecture(make_model, make_batch, small_rounds):
    lstm = make_model("lstm")
    transformer = make_model("transformer")
    with pytest.raises(ContractError):
        lstm.forward(make_batch(transformer, small_rounds))


def test_training_forward_is_reproducible(make_model, make_batch, small_rounds):
    model = make_model("transformer")
    batch = make_batch(model, small_rounds)
    first, _ = model.forward(batch, training=True, rng=SeededRng(4))
    second, _ = model.forward(batch, training=True, rng=SeededRng(4))
    assert np.array_equal(first, second)


@pytest.mark.parametrize("architecture", ["lstm", "transformer"])
def test_padding_never_changes_logits(
    architecture, make_model, make_batch, random_round
):
    model = make_model(architecture)
    for trial in range(100):
        rng = SeededRng(11, trial)
        length = int(rng.integers(1, 41, 1)[0])
        pads = int(rng.integers(1, 51, 1)[0])
        short = random_round(length, seed=trial)
        longer = random_round(length + pads, seed=1000 + trial)
        alone = model.predict_logits(make_batch(model, [short]))
        padded = model.predict_logits(make_batch(model, [longer, short]))
        assert abs(alone[0] - padded[1]) < 1e-9, (trial, length, pads)


def test_classifier_needs_forward_and_backward(make_model):
    class ForwardOnly(SequenceClassifier):
        def forward(self, batch, training=False, rng=None):
            return np.zeros(batch.size), None

    with pytest.raises(TypeError):
        ForwardOnly(make_model("lstm").config)
