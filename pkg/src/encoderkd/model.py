"""BERT-style post-LN transformer encoder that exposes its internals.

A forward pass returns a :class:`ForwardTrace` holding, per layer, the hidden
states, the raw (pre-softmax, pre-mask) attention scores, the attention
distributions and the per-head value matrices. Traces always carry a leading
batch axis; a 1-D token sequence is treated as a batch of one.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (
    ConfigInvalid,
    MissingHead,
    PositionOutOfRange,
    SequenceTooLong,
    UnknownTokenId,
)
from .tensor import Tensor

PAD_ID, UNK_ID, CLS_ID, MASK_ID, SEP_ID = 0, 1, 2, 3, 4
MASK_PENALTY = -1e9
INIT_STD = 0.02

# Parameter names inside one encoder layer, in checkpoint order.
LAYER_BLOCKS = (
    "attn.q.weight", "attn.q.bias",
    "attn.k.weight", "attn.k.bias",
    "attn.v.weight", "attn.v.bias",
    "attn.o.weight", "attn.o.bias",
    "ln1.gamma", "ln1.beta",
    "ffn.in.weight", "ffn.in.bias",
    "ffn.out.weight", "ffn.out.bias",
    "ln2.gamma", "ln2.beta",
)  # fmt: skip
EMBEDDING_BLOCKS = ("emb.token", "emb.position", "emb.ln.gamma", "emb.ln.beta")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_dim: int
    vocab_size: int
    max_seq_len: int
    num_labels: int = 2
    cls_head: bool = True
    mlm_head: bool = True
    tie_mlm_head: bool = False
    ln_eps: float = 1e-12
    init_std: float = INIT_STD

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "max_seq_len", "num_labels"):
            if int(getattr(self, name)) < 1:
                raise ConfigInvalid(f"{name} must be a positive integer")
        if self.hidden_dim % self.num_heads:
            raise ConfigInvalid(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.vocab_size < 4:
            raise ConfigInvalid("vocab_size must be >= 4 (PAD, UNK, CLS, MASK are reserved)")
        if self.ln_eps <= 0:
            raise ConfigInvalid("ln_eps must be positive")
        if self.init_std <= 0:
            raise ConfigInvalid("init_std must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


def _layer_prefix(j: int) -> str:
    """Parameter prefix for 1-based layer ``j``."""
    return f"layers.{j}."


@dataclass
class ForwardTrace:
    hidden_states: list[Tensor]
    attention_scores: list[Tensor]
    attention_probs: list[Tensor]
    values: list[Tensor]
    mask: np.ndarray
    embeddings: Tensor
    logits: Tensor | None = None

    @property
    def num_layers(self) -> int:
        return len(self.hidden_states)

    @property
    def num_heads(self) -> int:
        return self.attention_scores[0].shape[1]

    @property
    def seq_len(self) -> int:
        return self.mask.shape[1]

    @property
    def batch_size(self) -> int:
        return self.mask.shape[0]


@dataclass
class EncoderModel:
    config: ModelConfig
    seed: int = 0
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            self.reset_parameters(self.seed)

    # -- parameters -------------------------------------------------------

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        d, f = c.hidden_dim, c.ffn_dim
        shapes = {
            "emb.token": (c.vocab_size, d),
            "emb.position": (c.max_seq_len, d),
            "emb.ln.gamma": (d,),
            "emb.ln.beta": (d,),
        }
        per_layer = {
            "attn.q.weight": (d, d), "attn.q.bias": (d,),
            "attn.k.weight": (d, d), "attn.k.bias": (d,),
            "attn.v.weight": (d, d), "attn.v.bias": (d,),
            "attn.o.weight": (d, d), "attn.o.bias": (d,),
            "ln1.gamma": (d,), "ln1.beta": (d,),
            "ffn.in.weight": (d, f), "ffn.in.bias": (f,),
            "ffn.out.weight": (f, d), "ffn.out.bias": (d,),
            "ln2.gamma": (d,), "ln2.beta": (d,),
        }  # fmt: skip
        for j in range(1, c.num_layers + 1):
            for block in LAYER_BLOCKS:
                shapes[_layer_prefix(j) + block] = per_layer[block]
        if c.cls_head:
            shapes["cls.weight"] = (d, c.num_labels)
            shapes["cls.bias"] = (c.num_labels,)
        if c.mlm_head:
            if not c.tie_mlm_head:
                shapes["mlm.weight"] = (d, c.vocab_size)
            shapes["mlm.bias"] = (c.vocab_size,)
        return shapes

    def reset_parameters(self, seed: int) -> None:
        """Normal(0, init_std) weights and embeddings, zero biases, unit LN gains."""
        rng = np.random.default_rng(seed)
        self.params = {}
        for name, shape in self.parameter_shapes().items():
            value = init_value(name, shape, rng, self.config.init_std)
            self.params[name] = Tensor(value, requires_grad=True, name=name)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def head_parameter_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(("cls.", "mlm."))]

    def layer_parameter_names(self, j: int) -> list[str]:
        return [_layer_prefix(j) + b for b in LAYER_BLOCKS]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.parameter_shapes()
        if set(state) != set(expected):
            raise ConfigInvalid(f"state keys differ from model: {sorted(set(state) ^ set(expected))}")
        for name, shape in expected.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != shape:
                raise ConfigInvalid(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = Tensor(arr, requires_grad=True, name=name)

    def copy(self) -> EncoderModel:
        clone = EncoderModel(self.config, self.seed)
        clone.load_state_dict(self.state_dict())
        return clone

    # -- forward ----------------------------------------------------------

    def embed(self, tokens: np.ndarray) -> Tensor:
        p = self.params
        l = tokens.shape[1]
        x = T.getitem(p["emb.token"], tokens) + T.getitem(p["emb.position"], slice(0, l))
        return T.layer_norm(x, p["emb.ln.gamma"], p["emb.ln.beta"], self.config.ln_eps)

    def layer_forward(self, j: int, x: Tensor, mask: np.ndarray):
        """Run 1-based layer ``j``; returns (hidden, scores, probs, values)."""
        c = self.config
        p = self.params
        pre = _layer_prefix(j)
        B, l, d = x.shape
        h, dh = c.num_heads, c.head_dim

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, l, h, dh).transpose(0, 2, 1, 3)

        q = heads(x @ p[pre + "attn.q.weight"] + p[pre + "attn.q.bias"])
        k = heads(x @ p[pre + "attn.k.weight"] + p[pre + "attn.k.bias"])
        v = heads(x @ p[pre + "attn.v.weight"] + p[pre + "attn.v.bias"])
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        probs = T.softmax(scores + additive_mask(mask), axis=-1)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, l, d)
        attn_out = ctx @ p[pre + "attn.o.weight"] + p[pre + "attn.o.bias"]
        x1 = T.layer_norm(x + attn_out, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], c.ln_eps)
        ff = T.gelu(x1 @ p[pre + "ffn.in.weight"] + p[pre + "ffn.in.bias"])
        ff = ff @ p[pre + "ffn.out.weight"] + p[pre + "ffn.out.bias"]
        x2 = T.layer_norm(x1 + ff, p[pre + "ln2.gamma"], p[pre + "ln2.beta"], c.ln_eps)
        return x2, scores, probs, v


def init_value(name: str, shape: tuple[int, ...], rng: np.random.Generator, std: float = INIT_STD) -> np.ndarray:
    if name.endswith("gamma"):
        return np.ones(shape)
    if name.endswith(("bias", "beta")):
        return np.zeros(shape)
    return rng.normal(0.0, std, size=shape)


def additive_mask(mask: np.ndarray) -> np.ndarray:
    """[B, l] keep-mask -> [B, 1, 1, l] additive key penalty."""
    return np.where(mask, 0.0, MASK_PENALTY)[:, None, None, :]


def _prepare(model: EncoderModel, tokens, pad_mask) -> tuple[np.ndarray, np.ndarray]:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    c = model.config
    if tokens.shape[1] > c.max_seq_len:
        raise SequenceTooLong(f"length {tokens.shape[1]} exceeds max_seq_len {c.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab_size):
        raise UnknownTokenId(f"token ids must lie in [0, {c.vocab_size})")
    if tokens.size and np.any(tokens[:, 0] != CLS_ID):
        raise ValueError("every sequence must start with the CLS id")
    if pad_mask is None:
        mask = tokens != PAD_ID
    else:
        mask = np.asarray(pad_mask, dtype=bool)
        if mask.ndim == 1:
            mask = mask[None, :]
        if mask.shape != tokens.shape:
            raise ValueError(f"pad_mask shape {mask.shape} does not match tokens {tokens.shape}")
    return tokens, mask


def forward_with_trace(model: EncoderModel, tokens, pad_mask=None) -> ForwardTrace:
    """Encode ``tokens`` ([l] or [B, l] ids) and capture every layer's internals.

    ``pad_mask`` is True at real tokens; by default every non-PAD id is real.
    """
    tokens, mask = _prepare(model, tokens, pad_mask)
    x = emb = model.embed(tokens)
    hidden, scores, probs, values = [], [], [], []
    for j in range(1, model.config.num_layers + 1):
        x, s, a, v = model.layer_forward(j, x, mask)
        hidden.append(x)
        scores.append(s)
        probs.append(a)
        values.append(v)
    return ForwardTrace(hidden, scores, probs, values, mask, emb)


def classify(model: EncoderModel, trace: ForwardTrace) -> Tensor:
    """[B, num_labels] logits from the final CLS hidden state; also stored on the trace."""
    if not model.config.cls_head:
        raise MissingHead("model has no classification head")
    cls_state = trace.hidden_states[-1][:, 0, :]
    trace.logits = cls_state @ model.params["cls.weight"] + model.params["cls.bias"]
    return trace.logits


def mlm_logits(model: EncoderModel, trace: ForwardTrace, masked_positions) -> Tensor:
    """Vocabulary logits at ``masked_positions``.

    Positions are sequence indices for a single-sequence trace, or
    ``(batch_index, position)`` pairs. Returns ``[len(positions), vocab_size]``.
    """
    c = model.config
    if not c.mlm_head:
        raise MissingHead("model has no MLM head")
    pos = np.asarray(masked_positions, dtype=np.int64)
    if pos.size == 0:
        pos = pos.reshape(0, 2)
    elif pos.ndim == 1:
        if trace.batch_size != 1:
            raise ValueError("bare positions need a single-sequence trace; pass (batch, position) pairs")
        pos = np.stack([np.zeros_like(pos), pos], axis=1)
    if pos.size and (
        pos[:, 1].min() < 0
        or pos[:, 1].max() >= trace.seq_len
        or pos[:, 0].min() < 0
        or pos[:, 0].max() >= trace.batch_size
    ):
        raise PositionOutOfRange(f"masked positions outside sequence length {trace.seq_len}")
    states = T.getitem(trace.hidden_states[-1], (pos[:, 0], pos[:, 1]))
    weight = model.params["emb.token"].transpose() if c.tie_mlm_head else model.params["mlm.weight"]
    return states @ weight + model.params["mlm.bias"]


def count_params(model: EncoderModel) -> int:
    return int(sum(p.size for p in model.params.values()))


# -- checkpoints ------------------------------------------------------------
#
# A checkpoint is a numpy .npz archive: entry "__config__" holds the ModelConfig
# as a JSON string, followed by one float64 array per named parameter block in
# model order. Round-trips are bit-exact.


def save_checkpoint(model: EncoderModel, path) -> Path:
    path = Path(path)
    arrays = {"__config__": np.array(json.dumps(asdict(model.config), sort_keys=True))}
    arrays.update(model.state_dict())
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> EncoderModel:
    with np.load(Path(path), allow_pickle=False) as archive:
        config = ModelConfig(**json.loads(str(archive["__config__"])))
        state = {k: archive[k] for k in archive.files if k != "__config__"}
    model = EncoderModel(config)
    model.load_state_dict(state)
    return model
