"""
Sequence classifiers built from layers with hand-written backward passes.

Every layer follows one protocol:

    out, cache = layer.forward(...)
    grad_in = layer.backward(cache, grad_out)

`backward` accumulates parameter gradients into the layer's `Parameter.grad`
and returns the gradient with respect to the layer input. Layers register
their parameters in a shared, ordered `ParamSet` under dotted names
(`encoder.0.attn.query.weight`), which is also the order used for
initialization, optimizer state and checkpoints.

Initialization: weights uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)), biases
zero, LayerNorm scale one. The Transformer head draws from a bound shrunk by
`TRANSFORMER_HEAD_INIT_SCALE`: it reads LayerNorm outputs of unit scale, and
fresh logits should sit near zero (loss near ln 2).
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import RoundBatch
from .errors import (
    CapacityError,
    ContractError,
    DataError,
    DimensionError,
    ParameterError,
)
from .models import Architecture, ModelConfig
from .tensor import (
    Mask,
    SeededRng,
    Tensor,
    as_tensor,
    check_shape,
    masked_softmax,
    matmul,
    require_finite,
    rng_uniform,
    sigmoid,
)

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
TRANSFORMER_HEAD_INIT_SCALE = 0.1


# -------------------------
# Parameters
# -------------------------
@dataclass
class Parameter:
    value: Tensor
    grad: Tensor = field(init=False)

    def __post_init__(self) -> None:
        self.value = as_tensor(self.value).copy()
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.value.shape)


class ParamSet:
    """Ordered, uniquely named parameters with gradients of matching shape."""

    def __init__(self) -> None:
        self._entries: "OrderedDict[str, Parameter]" = OrderedDict()

    def add(self, name: str, value: Tensor) -> Parameter:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        param = Parameter(value)
        self._entries[name] = param
        return param

    def __iter__(self) -> Iterator[Tuple[str, Parameter]]:
        return iter(self._entries.items())

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, name: str) -> Parameter:
        return self._entries[name]

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def names(self) -> List[str]:
        return list(self._entries)

    def size(self) -> int:
        return sum(p.value.size for p in self._entries.values())

    def zero_grad(self) -> None:
        for param in self._entries.values():
            param.grad.fill(0.0)

    def state(self) -> Dict[str, Tensor]:
        return {name: p.value.copy() for name, p in self._entries.items()}

    def load(self, values: Mapping[str, Tensor]) -> None:
        missing = [name for name in self._entries if name not in values]
        extra = [name for name in values if name not in self._entries]
        if missing or extra:
            raise ContractError(
                f"parameter names differ: missing {missing}, unexpected {extra}"
            )
        for name, param in self._entries.items():
            incoming = as_tensor(values[name])
            check_shape(name, incoming, param.shape)
            param.value[...] = incoming
        self.zero_grad()


def _uniform_init(
    rng: SeededRng, fan_in: int, shape: Tuple[int, ...], scale: float = 1.0
) -> Tensor:
    bound = scale / math.sqrt(fan_in)
    return rng_uniform(rng, shape, -bound, bound)


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


# -------------------------
# Layers
# -------------------------
class Linear:
    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: SeededRng,
        params: Optional[ParamSet] = None,
        name: str = "linear",
        init_scale: float = 1.0,
    ) -> None:
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.params = params if params is not None else ParamSet()
        self.weight = self.params.add(
            _join(name, "weight"),
            _uniform_init(rng, in_dim, (in_dim, out_dim), init_scale),
        )
        self.bias = self.params.add(_join(name, "bias"), np.zeros(out_dim))

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(
                f"linear layer expects last dim {self.in_dim}, got shape {x.shape}"
            )
        flat = x.reshape(-1, self.in_dim)
        out = matmul(flat, self.weight.value) + self.bias.value
        return out.reshape(*x.shape[:-1], self.out_dim), x

    def backward(self, cache: Tensor, grad: Tensor) -> Tensor:
        x = cache
        check_shape("linear grad_out", grad, (*x.shape[:-1], self.out_dim))
        flat_x = x.reshape(-1, self.in_dim)
        flat_g = grad.reshape(-1, self.out_dim)
        self.weight.grad += matmul(flat_x.T, flat_g)
        self.bias.grad += flat_g.sum(axis=0)
        return matmul(flat_g, self.weight.value.T).reshape(x.shape)


@dataclass
class LstmCache:
    x: Tensor
    gates: Tensor  # (B, T, 4H): activated i, f, g, o
    cells: Tensor  # (B, T+1, H), cells[:, 0] = c0
    hidden: Tensor  # (B, T+1, H), hidden[:, 0] = h0
    tanh_cells: Tensor  # (B, T, H)


class LstmLayer:
    """Single unidirectional LSTM layer; gate blocks are ordered i, f, g, o."""

    def __init__(
        self,
        input_dim: int,
        hidden_dim: int,
        rng: SeededRng,
        params: Optional[ParamSet] = None,
        name: str = "lstm",
    ) -> None:
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.params = params if params is not None else ParamSet()
        four_h = 4 * hidden_dim
        self.W = self.params.add(
            _join(name, "W"), _uniform_init(rng, input_dim, (input_dim, four_h))
        )
        self.U = self.params.add(
            _join(name, "U"), _uniform_init(rng, hidden_dim, (hidden_dim, four_h))
        )
        self.b = self.params.add(_join(name, "b"), np.zeros(four_h))

    def forward(self, x: Tensor, lengths: Sequence[int]) -> Tuple[Tensor, LstmCache]:
        if x.ndim != 3 or x.shape[2] != self.input_dim:
            raise DimensionError(
                f"LSTM expects (B, T, {self.input_dim}) input, got {x.shape}"
            )
        require_finite("LSTM input", x)
        batch, steps, _ = x.shape
        lengths = np.asarray(lengths)
        if lengths.shape != (batch,):
            raise DimensionError(f"expected {batch} lengths, got shape {lengths.shape}")
        if np.any(lengths > steps) or np.any(lengths < 0):
            raise DimensionError(
                f"lengths must lie in [0, {steps}], got {lengths.tolist()}"
            )

        H = self.hidden_dim
        projected = matmul(x.reshape(batch * steps, self.input_dim), self.W.value)
        projected = projected.reshape(batch, steps, 4 * H) + self.b.value
        gates = np.empty((batch, steps, 4 * H))
        cells = np.zeros((batch, steps + 1, H))
        hidden = np.zeros((batch, steps + 1, H))
        tanh_cells = np.empty((batch, steps, H))
        # Padded steps run through the recurrence too; pooling drops them.
        for t in range(steps):
            z = projected[:, t] + matmul(hidden[:, t], self.U.value)
            i = sigmoid(z[:, :H])
            f = sigmoid(z[:, H : 2 * H])
            g = np.tanh(z[:, 2 * H : 3 * H])
            o = sigmoid(z[:, 3 * H :])
            cells[:, t + 1] = f * cells[:, t] + i * g
            tanh_cells[:, t] = np.tanh(cells[:, t + 1])
            hidden[:, t + 1] = o * tanh_cells[:, t]
            gates[:, t] = np.concatenate([i, f, g, o], axis=1)
        return hidden[:, 1:].copy(), LstmCache(x, gates, cells, hidden, tanh_cells)

    def backward(self, cache: LstmCache, grad_out: Tensor) -> Tensor:
        batch, steps, _ = cache.x.shape
        H = self.hidden_dim
        check_shape("LSTM grad_out", grad_out, (batch, steps, H))
        dz = np.empty((batch, steps, 4 * H))
        dh_next = np.zeros((batch, H))
        dc_next = np.zeros((batch, H))
        for t in reversed(range(steps)):
            gate = cache.gates[:, t]
            i, f, g, o = np.split(gate, 4, axis=1)
            tc = cache.tanh_cells[:, t]
            dh = grad_out[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz[:, t, :H] = dc * g * i * (1.0 - i)
            dz[:, t, H : 2 * H] = dc * cache.cells[:, t] * f * (1.0 - f)
            dz[:, t, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
            dz[:, t, 3 * H :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = matmul(dz[:, t], self.U.value.T)
        flat_dz = dz.reshape(batch * steps, 4 * H)
        flat_x = cache.x.reshape(batch * steps, self.input_dim)
        flat_h = cache.hidden[:, :-1].reshape(batch * steps, H)
        self.W.grad += matmul(flat_x.T, flat_dz)
        self.U.grad += matmul(flat_h.T, flat_dz)
        self.b.grad += flat_dz.sum(axis=0)
        return matmul(flat_dz, self.W.value.T).reshape(cache.x.shape)


def dropout_mask(
    shape: Tuple[int, ...], p: float, rng: Optional[SeededRng], training: bool
) -> Optional[Tensor]:
    """Inverted-dropout scale (0 or 1/(1-p) per element), or None for a no-op."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return None
    if rng is None:
        raise ContractError("training-mode dropout needs a random stream")
    keep = ~rng.bernoulli(shape, p)
    return keep / (1.0 - p)


def dropout(
    x: Tensor,
    p: float = 0.30,
    rng: Optional[SeededRng] = None,
    training: bool = False,
) -> Tensor:
    scale = dropout_mask(x.shape, p, rng, training)
    return x if scale is None else x * scale


def positional_encoding(max_positions: int = 722, d_model: int = 8) -> Tensor:
    if d_model % 2 != 0:
        raise ParameterError(
            f"d_model must be even for the sinusoidal table, got {d_model}"
        )
    if max_positions < 1:
        raise ParameterError(f"max_positions must be positive, got {max_positions}")
    positions = np.arange(max_positions, dtype=np.float64)[:, None]
    rates = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.empty((max_positions, d_model))
    table[:, 0::2] = np.sin(positions / rates)
    table[:, 1::2] = np.cos(positions / rates)
    return table


def masked_mean_pool(x: Tensor, mask: Mask) -> Tensor:
    """Per-sample mean over the timesteps where `mask` is true."""
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise DimensionError(f"mask shape {mask.shape} does not match input {x.shape}")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0).tolist()
        raise DataError(f"cannot pool an empty sequence (rows {empty})")
    # Row by row so extra masked steps cannot change the summation order.
    return np.stack([x[i][mask[i]].sum(axis=0) / counts[i] for i in range(x.shape[0])])


def masked_mean_pool_backward(mask: Mask, grad: Tensor) -> Tensor:
    counts = mask.sum(axis=1).astype(np.float64)
    return mask[:, :, None] * (grad / counts[:, None])[:, None, :]


class LayerNorm:
    def __init__(
        self, dim: int, params: Optional[ParamSet] = None, name: str = "norm"
    ) -> None:
        self.dim = dim
        self.params = params if params is not None else ParamSet()
        self.gamma = self.params.add(_join(name, "gamma"), np.ones(dim))
        self.beta = self.params.add(_join(name, "beta"), np.zeros(dim))

    def forward(self, x: Tensor) -> Tuple[Tensor, Tuple[Tensor, Tensor]]:
        if x.shape[-1] != self.dim:
            raise DimensionError(
                f"LayerNorm expects last dim {self.dim}, got {x.shape}"
            )
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
        normed = (x - mean) * inv_std
        return normed * self.gamma.value + self.beta.value, (normed, inv_std)

    def backward(self, cache: Tuple[Tensor, Tensor], grad: Tensor) -> Tensor:
        normed, inv_std = cache
        check_shape("LayerNorm grad_out", grad, normed.shape)
        self.gamma.grad += (grad * normed).reshape(-1, self.dim).sum(axis=0)
        self.beta.grad += grad.reshape(-1, self.dim).sum(axis=0)
        dnormed = grad * self.gamma.value
        return (
            inv_std
            / self.dim
            * (
                self.dim * dnormed
                - dnormed.sum(axis=-1, keepdims=True)
                - normed * (dnormed * normed).sum(axis=-1, keepdims=True)
            )
        )


@dataclass
class AttentionCache:
    query: Tuple[Any, Tensor]
    key: Tuple[Any, Tensor]
    value: Tuple[Any, Tensor]
    output: Tensor
    weights: Tensor  # (B*heads, T, T)
    shape: Tuple[int, int, int]


class MultiHeadAttention:
    """Scaled dot-product attention over `heads` heads; padded keys get zero weight."""

    def __init__(
        self,
        d_model: int,
        heads: int,
        rng: SeededRng,
        params: Optional[ParamSet] = None,
        name: str = "attn",
    ) -> None:
        if heads < 1 or d_model % heads != 0:
            raise DimensionError(f"d_model {d_model} is not divisible by {heads} heads")
        self.d_model = d_model
        self.heads = heads
        self.head_dim = d_model // heads
        self.params = params if params is not None else ParamSet()
        self.query = Linear(d_model, d_model, rng, self.params, _join(name, "query"))
        self.key = Linear(d_model, d_model, rng, self.params, _join(name, "key"))
        self.value = Linear(d_model, d_model, rng, self.params, _join(name, "value"))
        self.output = Linear(d_model, d_model, rng, self.params, _join(name, "output"))

    def _split(self, x: Tensor) -> Tensor:
        batch, steps, _ = x.shape
        heads = x.reshape(batch, steps, self.heads, self.head_dim).transpose(0, 2, 1, 3)
        return np.ascontiguousarray(heads).reshape(
            batch * self.heads, steps, self.head_dim
        )

    def _merge(self, x: Tensor, batch: int, steps: int) -> Tensor:
        heads = x.reshape(batch, self.heads, steps, self.head_dim).transpose(0, 2, 1, 3)
        return np.ascontiguousarray(heads).reshape(batch, steps, self.d_model)

    def forward(self, x: Tensor, mask: Mask) -> Tuple[Tensor, AttentionCache]:
        if x.ndim != 3 or x.shape[2] != self.d_model:
            raise DimensionError(
                f"attention expects (B, T, {self.d_model}) input, got {x.shape}"
            )
        batch, steps, _ = x.shape
        if mask.shape != (batch, steps):
            raise DimensionError(
                f"mask shape {mask.shape} does not match input {x.shape}"
            )
        q, cq = self.query.forward(x)
        k, ck = self.key.forward(x)
        v, cv = self.value.forward(x)
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        scores = matmul(qh, kh.transpose(0, 2, 1)) / math.sqrt(self.head_dim)
        key_mask = np.repeat(mask, self.heads, axis=0)[:, None, :]
        weights = masked_softmax(scores, key_mask)
        context = self._merge(matmul(weights, vh), batch, steps)
        out, co = self.output.forward(context)
        cache = AttentionCache(
            (cq, qh), (ck, kh), (cv, vh), co, weights, (batch, steps, self.d_model)
        )
        return out, cache

    def backward(self, cache: AttentionCache, grad: Tensor) -> Tensor:
        batch, steps, _ = cache.shape
        check_shape("attention grad_out", grad, cache.shape)
        (cq, qh), (ck, kh), (cv, vh) = cache.query, cache.key, cache.value
        dcontext = self._split(self.output.backward(cache.output, grad))
        weights = cache.weights
        dweights = matmul(dcontext, vh.transpose(0, 2, 1))
        dvh = matmul(weights.transpose(0, 2, 1), dcontext)
        row_dot = np.sum(dweights * weights, axis=-1, keepdims=True)
        dscores = weights * (dweights - row_dot)
        dscores /= math.sqrt(self.head_dim)
        dqh = matmul(dscores, kh)
        dkh = matmul(dscores.transpose(0, 2, 1), qh)
        dx = self.query.backward(cq, self._merge(dqh, batch, steps))
        dx += self.key.backward(ck, self._merge(dkh, batch, steps))
        dx += self.value.backward(cv, self._merge(dvh, batch, steps))
        return dx


@dataclass
class EncoderCache:
    attention: AttentionCache
    attention_drop: Optional[Tensor]
    norm1: Tuple[Tensor, Tensor]
    ff_in: Tensor
    ff_hidden: Tensor
    ff_out: Tensor
    ff_drop: Optional[Tensor]
    norm2: Tuple[Tensor, Tensor]


class EncoderLayer:
    """Post-norm encoder block: LN(x + Drop(Attn(x))), then LN(y + Drop(FFN(y)))."""

    def __init__(
        self,
        d_model: int,
        heads: int,
        ff_dim: int,
        dropout_rate: float,
        rng: SeededRng,
        params: Optional[ParamSet] = None,
        name: str = "encoder",
    ) -> None:
        if not 0.0 <= dropout_rate < 1.0:
            raise ParameterError(f"dropout rate must be in [0, 1), got {dropout_rate}")
        self.dropout_rate = dropout_rate
        self.params = params if params is not None else ParamSet()
        self.attention = MultiHeadAttention(
            d_model, heads, rng, self.params, _join(name, "attn")
        )
        self.norm1 = LayerNorm(d_model, self.params, _join(name, "norm1"))
        self.ff1 = Linear(d_model, ff_dim, rng, self.params, _join(name, "ff1"))
        self.ff2 = Linear(ff_dim, d_model, rng, self.params, _join(name, "ff2"))
        self.norm2 = LayerNorm(d_model, self.params, _join(name, "norm2"))

    def forward(
        self,
        x: Tensor,
        mask: Mask,
        training: bool = False,
        rng: Optional[SeededRng] = None,
    ) -> Tuple[Tensor, EncoderCache]:
        attended, attention_cache = self.attention.forward(x, mask)
        drop1 = dropout_mask(attended.shape, self.dropout_rate, rng, training)
        if drop1 is not None:
            attended = attended * drop1
        y, norm1_cache = self.norm1.forward(x + attended)
        pre, ff_in = self.ff1.forward(y)
        hidden = np.maximum(pre, 0.0)
        ff, ff_out = self.ff2.forward(hidden)
        drop2 = dropout_mask(ff.shape, self.dropout_rate, rng, training)
        if drop2 is not None:
            ff = ff * drop2
        out, norm2_cache = self.norm2.forward(y + ff)
        return out, EncoderCache(
            attention_cache, drop1, norm1_cache, ff_in, pre, ff_out, drop2, norm2_cache
        )

    def backward(self, cache: EncoderCache, grad: Tensor) -> Tensor:
        dsum2 = self.norm2.backward(cache.norm2, grad)
        dff = dsum2 if cache.ff_drop is None else dsum2 * cache.ff_drop
        dhidden = self.ff2.backward(cache.ff_out, dff)
        dy = dsum2 + self.ff1.backward(cache.ff_in, dhidden * (cache.ff_hidden > 0))
        dsum1 = self.norm1.backward(cache.norm1, dy)
        dattended = dsum1
        if cache.attention_drop is not None:
            dattended = dsum1 * cache.attention_drop
        return dsum1 + self.attention.backward(cache.attention, dattended)


# -------------------------
# Classifiers
# -------------------------
class SequenceClassifier(ABC):
    """
    Common surface of both architectures.

    `forward(batch, training, rng)` returns one logit per round plus a cache;
    `backward(cache, dlogits)` fills parameter gradients.
    """

    architecture: Architecture

    def __init__(self, config: ModelConfig) -> None:
        self.config = config
        self.params = ParamSet()

    @property
    def pad_value(self) -> float:
        return self.config.pad_value

    def _check_batch(self, batch: RoundBatch) -> None:
        if batch.pad_value != self.pad_value:
            raise ContractError(
                f"{self.architecture.value} model expects pad value {self.pad_value}, "
                f"batch was padded with {batch.pad_value}"
            )
        if batch.features.ndim != 3 or batch.features.shape[2] != self.config.input_dim:
            raise DimensionError(f"batch features have shape {batch.features.shape}")

    @abstractmethod
    def forward(
        self, batch: RoundBatch, training: bool = False, rng: Optional[SeededRng] = None
    ) -> Tuple[Tensor, Any]: ...

    @abstractmethod
    def backward(self, cache: Any, dlogits: Tensor) -> None: ...

    def predict_logits(self, batch: RoundBatch) -> Tensor:
        logits, _ = self.forward(batch, training=False)
        return logits

    def predict_proba(self, batch: RoundBatch) -> Tensor:
        return sigmoid(self.predict_logits(batch))


class LstmClassifier(SequenceClassifier):
    """LSTM -> dropout -> masked mean over time -> linear head."""

    architecture = Architecture.LSTM

    def __init__(self, config: ModelConfig, rng: SeededRng) -> None:
        super().__init__(config)
        self.lstm = LstmLayer(
            config.input_dim, config.hidden_dim, rng, self.params, "lstm"
        )
        self.head = Linear(config.hidden_dim, 1, rng, self.params, "head")

    def forward(
        self, batch: RoundBatch, training: bool = False, rng: Optional[SeededRng] = None
    ) -> Tuple[Tensor, Any]:
        self._check_batch(batch)
        hidden, lstm_cache = self.lstm.forward(batch.features, batch.lengths)
        drop = dropout_mask(hidden.shape, self.config.dropout, rng, training)
        if drop is not None:
            hidden = hidden * drop
        pooled = masked_mean_pool(hidden, batch.mask)
        logits, head_cache = self.head.forward(pooled)
        return logits[:, 0], (lstm_cache, drop, batch.mask, head_cache)

    def backward(self, cache: Any, dlogits: Tensor) -> None:
        lstm_cache, drop, mask, head_cache = cache
        dpooled = self.head.backward(head_cache, dlogits.reshape(-1, 1))
        dhidden = masked_mean_pool_backward(mask, dpooled)
        if drop is not None:
            dhidden = dhidden * drop
        self.lstm.backward(lstm_cache, dhidden)


class TransformerClassifier(SequenceClassifier):
    """Input projection + positions -> encoder stack -> masked mean -> linear head."""

    architecture = Architecture.TRANSFORMER

    def __init__(self, config: ModelConfig, rng: SeededRng) -> None:
        super().__init__(config)
        self.embed = Linear(config.input_dim, config.d_model, rng, self.params, "embed")
        self.positions = positional_encoding(config.max_positions, config.d_model)
        self.layers = [
            EncoderLayer(
                config.d_model,
                config.heads,
                config.ff_dim,
                config.dropout,
                rng,
                self.params,
                f"encoder.{index}",
            )
            for index in range(config.encoder_layers)
        ]
        self.head = Linear(
            config.d_model,
            1,
            rng,
            self.params,
            "head",
            init_scale=TRANSFORMER_HEAD_INIT_SCALE,
        )

    def forward(
        self, batch: RoundBatch, training: bool = False, rng: Optional[SeededRng] = None
    ) -> Tuple[Tensor, Any]:
        self._check_batch(batch)
        steps = batch.max_len
        if steps > self.config.max_positions:
            raise CapacityError(
                f"sequence length {steps} exceeds the positional table "
                f"({self.config.max_positions})"
            )
        x, embed_cache = self.embed.forward(batch.features)
        x = x + self.positions[:steps]
        drop = dropout_mask(x.shape, self.config.dropout, rng, training)
        if drop is not None:
            x = x * drop
        layer_caches = []
        for layer in self.layers:
            x, layer_cache = layer.forward(x, batch.mask, training, rng)
            layer_caches.append(layer_cache)
        pooled = masked_mean_pool(x, batch.mask)
        logits, head_cache = self.head.forward(pooled)
        return logits[:, 0], (embed_cache, drop, layer_caches, batch.mask, head_cache)

    def backward(self, cache: Any, dlogits: Tensor) -> None:
        embed_cache, drop, layer_caches, mask, head_cache = cache
        dpooled = self.head.backward(head_cache, dlogits.reshape(-1, 1))
        grad = masked_mean_pool_backward(mask, dpooled)
        for layer, layer_cache in zip(reversed(self.layers), reversed(layer_caches)):
            grad = layer.backward(layer_cache, grad)
        if drop is not None:
            grad = grad * drop
        self.embed.backward(embed_cache, grad)


def build_model(config: ModelConfig, rng: SeededRng) -> SequenceClassifier:
    model: SequenceClassifier
    if config.architecture is Architecture.TRANSFORMER:
        model = TransformerClassifier(config, rng)
    else:
        model = LstmClassifier(config, rng)
    logger.debug(
        "Built %s classifier with %d parameters",
        config.architecture.value,
        model.params.size(),
    )
    return model


# -------------------------
# Finite-difference check
# -------------------------
def gradient_check(
    module: Any,
    *inputs: Any,
    eps: float = 1e-5,
    forward_kwargs: Optional[Dict[str, Any]] = None,
    seed: int = 0,
) -> float:
    """
    Worst relative error between analytic and central-difference gradients.

    `module` is any layer or classifier with `forward`, `backward` and
    `params`. The scalar loss is sum(output * R) for a fixed random R. Per
    entry the error is |a - n| / max(|a| + |n|, 1e-3).
    """
    kwargs = dict(forward_kwargs or {})
    if kwargs.get("training"):
        raise ContractError("gradient_check needs inference mode (training=False)")

    def forward() -> Tuple[Tensor, Any]:
        return module.forward(*inputs, **kwargs)

    out, cache = forward()
    if not np.array_equal(out, forward()[0]):
        raise ContractError(
            "module output is not deterministic; cannot check gradients"
        )
    projection = SeededRng(seed).uniform(np.shape(out), -1.0, 1.0)

    params: ParamSet = module.params
    params.zero_grad()
    module.backward(cache, projection)

    worst = 0.0
    for _, param in params:
        analytic = param.grad.copy()
        for index in np.ndindex(*param.shape):
            original = param.value[index]
            param.value[index] = original + eps
            loss_plus = float(np.sum(forward()[0] * projection))
            param.value[index] = original - eps
            loss_minus = float(np.sum(forward()[0] * projection))
            param.value[index] = original
            numeric = (loss_plus - loss_minus) / (2.0 * eps)
            scale = max(abs(analytic[index]) + abs(numeric), 1e-3)
            error = abs(analytic[index] - numeric) / scale
            worst = max(worst, float(error))
    params.zero_grad()
    return worst
