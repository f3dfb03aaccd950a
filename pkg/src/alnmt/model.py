"""The encoder-decoder translation model.

Per attention head the encoder computes H = softmax(X A Bᵀ Xᵀ) X C over the
stacked source embeddings X; heads are concatenated, normalized and combined
with residuals as H' = layer-norm(H) + X and then H_enc = ffn(H') + H'. The
decoder runs causally masked self-attention over the target embeddings Y
(H' = H + Y), cross-attention Z = softmax(H' A Bᵀ H_encᵀ) H_enc C, and
H_dec = ffn(layer-norm(H' + Z)). Logits are H_dec W_out, with W_out sharing
the target embedding matrix when weight tying is on.

Attention logits are scaled by 1/sqrt(d_a) by default; set
scaled_attention=False for the unscaled literal formula.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, asdict

import numpy as np

from . import numerics as nm
from .bpe import PAD, BOS, EOS

CHECKPOINT_MAGIC = b"ALNMTCK1"
CHECKPOINT_VERSION = 1


class ShapeError(Exception):
    pass


@dataclass
class ModelConfig:
    src_vocab: int
    trg_vocab: int
    d: int = 64
    heads: int = 4
    layers: int = 2
    ffn_width: int = 256
    max_length: int = 60
    dropout: float = 0.3
    tie_weights: bool = True
    scaled_attention: bool = True
    use_positions: bool = True
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ShapeError(f"model width {self.d} not divisible by {self.heads} heads")
        for name in ("src_vocab", "trg_vocab", "d", "heads", "layers", "ffn_width", "max_length"):
            if getattr(self, name) <= 0:
                raise ShapeError(f"{name} must be positive")

    @property
    def d_a(self) -> int:
        return self.d // self.heads

    @property
    def d_o(self) -> int:
        return self.d // self.heads


@dataclass
class EncodedSentence:
    ids: np.ndarray
    truncated: bool = False

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])


def encode_source_ids(token_ids: list[int], config: ModelConfig) -> EncodedSentence:
    """Source side: tokens plus a trailing eos, truncated at max_length."""
    ids = list(token_ids) + [EOS]
    truncated = len(ids) > config.max_length
    if truncated:
        ids = ids[: config.max_length - 1] + [EOS]
    return EncodedSentence(np.asarray(ids, dtype=np.int64), truncated)


def encode_target_ids(token_ids: list[int], config: ModelConfig) -> EncodedSentence:
    """Target side: bos + tokens + eos, truncated at max_length."""
    ids = [BOS] + list(token_ids) + [EOS]
    truncated = len(ids) > config.max_length
    if truncated:
        ids = ids[: config.max_length - 1] + [EOS]
    return EncodedSentence(np.asarray(ids, dtype=np.int64), truncated)


def _xavier(rng, fan_in, fan_out, shape, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ParamSet:
    """All learnable tensors, in a fixed named order."""

    def __init__(self, tensors: "OrderedDict[str, nm.Tensor]"):
        self.tensors = tensors

    def __getitem__(self, name: str) -> nm.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def items(self):
        return self.tensors.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def clone(self) -> "ParamSet":
        out = OrderedDict()
        for k, t in self.tensors.items():
            out[k] = nm.Tensor(t.data.copy(), requires_grad=True)
        return ParamSet(out)

    def astype(self, dtype) -> "ParamSet":
        out = OrderedDict()
        for k, t in self.tensors.items():
            out[k] = nm.Tensor(t.data.astype(dtype), requires_grad=True)
        return ParamSet(out)

    def num_values(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ParamSet:
    rng = np.random.default_rng(seed)
    d, da, do, ffn = config.d, config.d_a, config.d_o, config.ffn_width
    t = OrderedDict()

    def mat(name, fan_in, fan_out, shape=None):
        t[name] = nm.Tensor(_xavier(rng, fan_in, fan_out, shape or (fan_in, fan_out), dtype),
                            requires_grad=True)

    def zeros(name, shape):
        t[name] = nm.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(name, shape):
        t[name] = nm.Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    mat("src_embed", config.src_vocab, d)
    mat("trg_embed", config.trg_vocab, d)
    for i in range(config.layers):
        for h in range(config.heads):
            mat(f"enc{i}.self{h}.A", d, da)
            mat(f"enc{i}.self{h}.B", d, da)
            mat(f"enc{i}.self{h}.C", d, do)
        ones(f"enc{i}.ln.gamma", (d,))
        zeros(f"enc{i}.ln.beta", (d,))
        mat(f"enc{i}.ffn.W1", d, ffn)
        zeros(f"enc{i}.ffn.b1", (ffn,))
        mat(f"enc{i}.ffn.W2", ffn, d)
        zeros(f"enc{i}.ffn.b2", (d,))
    for i in range(config.layers):
        for h in range(config.heads):
            mat(f"dec{i}.self{h}.A", d, da)
            mat(f"dec{i}.self{h}.B", d, da)
            mat(f"dec{i}.self{h}.C", d, do)
        for h in range(config.heads):
            mat(f"dec{i}.cross{h}.A", d, da)
            mat(f"dec{i}.cross{h}.B", d, da)
            mat(f"dec{i}.cross{h}.C", d, do)
        ones(f"dec{i}.ln.gamma", (d,))
        zeros(f"dec{i}.ln.beta", (d,))
        mat(f"dec{i}.ffn.W1", d, ffn)
        zeros(f"dec{i}.ffn.b1", (ffn,))
        mat(f"dec{i}.ffn.W2", ffn, d)
        zeros(f"dec{i}.ffn.b2", (d,))
    if not config.tie_weights:
        mat("w_out", d, config.trg_vocab)
    return ParamSet(t)


_pe_cache: dict = {}


def positional_encoding(max_len: int, d: int, dtype=np.float32) -> np.ndarray:
    key = (max_len, d, np.dtype(dtype).str)
    cached = _pe_cache.get(key)
    if cached is not None:
        return cached
    pos = np.arange(max_len)[:, None].astype(np.float64)
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((max_len, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: d // 2])
    out = pe.astype(dtype)
    _pe_cache[key] = out
    return out


def _dropout(x: nm.Tensor, p: float, training: bool, rng):
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    return nm.mul(x, nm.Tensor(keep))


def _embed(ids: np.ndarray, table: nm.Tensor, config: ModelConfig, training, rng) -> nm.Tensor:
    x = nm.scale(nm.embedding_lookup(table, ids), math.sqrt(config.d))
    if config.use_positions:
        pe = positional_encoding(ids.shape[-1], config.d, table.dtype)
        x = nm.add(x, nm.Tensor(pe))
    return _dropout(x, config.dropout, training, rng)


def _multi_head(params, prefix, q_input, kv_input, mask, config: ModelConfig,
                training, rng) -> nm.Tensor:
    heads = []
    for h in range(config.heads):
        a = params[f"{prefix}{h}.A"]
        b = params[f"{prefix}{h}.B"]
        c = params[f"{prefix}{h}.C"]
        q = nm.matmul(q_input, a)
        k = nm.matmul(kv_input, b)
        v = nm.matmul(kv_input, c)
        scores = nm.matmul(q, nm.transpose(k))
        if config.scaled_attention:
            scores = nm.scale(scores, 1.0 / math.sqrt(config.d_a))
        if mask is not None:
            scores = nm.masked_fill(scores, mask)
        weights = nm.rowwise_softmax(scores)
        weights = _dropout(weights, config.dropout, training, rng)
        heads.append(nm.matmul(weights, v))
    return nm.concat(heads, axis=-1)


def _ffn(params, prefix, x, config: ModelConfig, training, rng) -> nm.Tensor:
    inner = nm.relu(nm.add(nm.matmul(x, params[f"{prefix}.W1"]), params[f"{prefix}.b1"]))
    inner = _dropout(inner, config.dropout, training, rng)
    return nm.add(nm.matmul(inner, params[f"{prefix}.W2"]), params[f"{prefix}.b2"])


def encode_batch(src_ids: np.ndarray, src_nonpad: np.ndarray | None, params: ParamSet,
                 config: ModelConfig, training=False, rng=None) -> nm.Tensor:
    """Run the encoder stack over (B, l_x) token ids; returns (B, l_x, d)."""
    x = _embed(src_ids, params["src_embed"], config, training, rng)
    mask = None
    if src_nonpad is not None and not src_nonpad.all():
        mask = ~src_nonpad[:, None, :]   # block attention to pad keys
    for i in range(config.layers):
        h = _multi_head(params, f"enc{i}.self", x, x, mask, config, training, rng)
        normed = nm.layer_norm(h, params[f"enc{i}.ln.gamma"], params[f"enc{i}.ln.beta"],
                               config.ln_eps)
        hprime = nm.add(normed, x)
        x = nm.add(_ffn(params, f"enc{i}.ffn", hprime, config, training, rng), hprime)
    return x


def decode_batch(trg_in: np.ndarray, trg_nonpad: np.ndarray | None, h_enc: nm.Tensor,
                 src_nonpad: np.ndarray | None, params: ParamSet, config: ModelConfig,
                 training=False, rng=None) -> nm.Tensor:
    """Teacher-forced decoder pass over (B, l_y) target-input ids; returns
    logits of shape (B, l_y, trg_vocab)."""
    t = trg_in.shape[-1]
    y = _embed(trg_in, params["trg_embed"], config, training, rng)
    causal = np.triu(np.ones((t, t), dtype=bool), k=1)[None, :, :]
    self_mask = causal
    if trg_nonpad is not None and not trg_nonpad.all():
        self_mask = causal | ~trg_nonpad[:, None, :]
    cross_mask = None
    if src_nonpad is not None and not src_nonpad.all():
        cross_mask = ~src_nonpad[:, None, :]
    for i in range(config.layers):
        h = _multi_head(params, f"dec{i}.self", y, y, self_mask, config, training, rng)
        hprime = nm.add(h, y)
        z = _multi_head(params, f"dec{i}.cross", hprime, h_enc, cross_mask, config,
                        training, rng)
        normed = nm.layer_norm(nm.add(hprime, z), params[f"dec{i}.ln.gamma"],
                               params[f"dec{i}.ln.beta"], config.ln_eps)
        y = _ffn(params, f"dec{i}.ffn", normed, config, training, rng)
    w_out = nm.transpose(params["trg_embed"]) if config.tie_weights else params["w_out"]
    return nm.matmul(y, w_out)


def encode(sentence: EncodedSentence, params: ParamSet, config: ModelConfig) -> nm.Tensor:
    """Encoder output for one sentence, shape (l_x, d)."""
    with nm.no_grad():
        out = encode_batch(sentence.ids[None, :], None, params, config)
    return nm.Tensor(out.data[0])


def decode_step(prefix: EncodedSentence, h_enc: nm.Tensor, params: ParamSet,
                config: ModelConfig) -> np.ndarray:
    """Next-token distribution over the target vocabulary given a bos-prefixed
    target prefix and the encoder output for one sentence."""
    ids = prefix.ids
    if ids.shape[0] == 0 or ids[0] != BOS:
        raise ValueError("decode prefix must start with bos")
    if ids.shape[0] > config.max_length:
        raise ValueError(f"prefix length {ids.shape[0]} exceeds max_length {config.max_length}")
    h = h_enc.data
    if h.ndim == 2:
        h = h[None, :, :]
    with nm.no_grad():
        logits = decode_batch(ids[None, :], None, nm.Tensor(h), None, params, config)
        probs = nm.rowwise_softmax(nm.Tensor(logits.data[0, -1]))
    return probs.data


@dataclass
class Batch:
    src: np.ndarray
    src_nonpad: np.ndarray
    trg_in: np.ndarray
    trg_out: np.ndarray
    trg_nonpad: np.ndarray

    @property
    def num_target_tokens(self) -> int:
        return int(self.trg_nonpad.sum())


def make_batch(examples: list[tuple[list[int], list[int]]], config: ModelConfig) -> Batch:
    """Pad a list of (source token ids, target token ids) to a dense batch.

    Sources get a trailing eos, target inputs a leading bos, target outputs a
    trailing eos; everything is right-padded with the pad id.
    """
    srcs = [encode_source_ids(s, config).ids for s, _ in examples]
    trgs = [encode_target_ids(tgt, config).ids for _, tgt in examples]
    ls = max(len(s) for s in srcs)
    lt = max(len(t) for t in trgs) - 1
    b = len(examples)
    src = np.full((b, ls), PAD, dtype=np.int64)
    trg_in = np.full((b, lt), PAD, dtype=np.int64)
    trg_out = np.full((b, lt), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(zip(srcs, trgs)):
        src[i, :len(s)] = s
        trg_in[i, :len(t) - 1] = t[:-1]
        trg_out[i, :len(t) - 1] = t[1:]
    return Batch(src, src != PAD, trg_in, trg_out, trg_out != PAD)


def smoothed_cross_entropy(logits: nm.Tensor, trg_out: np.ndarray,
                           trg_nonpad: np.ndarray, vocab: int,
                           eps_ls: float) -> nm.Tensor:
    """Label-smoothed cross entropy over (B, T, vocab) logits, averaged over
    non-pad target tokens. The smoothing mass eps_ls is spread uniformly over
    all target tokens except the gold one and pad."""
    n_tokens = int(trg_nonpad.sum())
    if n_tokens == 0:
        raise ValueError("batch contains no non-pad target tokens")
    logp = nm.log_softmax(logits)
    gold = nm.gather_last(logp, trg_out)
    if eps_ls > 0.0:
        if vocab <= 2:
            raise ValueError("label smoothing needs a vocabulary larger than 2")
        total = nm.reduce_sum(logp, axis=-1)
        pad_col = nm.gather_last(logp, np.full_like(trg_out, PAD))
        rest = nm.add(total, nm.scale(nm.add(pad_col, gold), -1.0))
        per_pos = nm.add(nm.scale(gold, 1.0 - eps_ls), nm.scale(rest, eps_ls / (vocab - 2)))
    else:
        per_pos = gold
    nonpad = trg_nonpad.astype(logp.dtype)
    masked = nm.mul(per_pos, nm.Tensor(nonpad))
    return nm.scale(nm.reduce_sum(masked), -1.0 / n_tokens)


def sequence_loss(batch: Batch, params: ParamSet, config: ModelConfig,
                  eps_ls: float = 0.1, training=False, rng=None) -> tuple[nm.Tensor, int]:
    """Teacher-forced forward pass plus label-smoothed cross entropy."""
    h_enc = encode_batch(batch.src, batch.src_nonpad, params, config, training, rng)
    logits = decode_batch(batch.trg_in, batch.trg_nonpad, h_enc, batch.src_nonpad,
                          params, config, training, rng)
    loss = smoothed_cross_entropy(logits, batch.trg_out, batch.trg_nonpad,
                                  config.trg_vocab, eps_ls)
    return loss, batch.num_target_tokens


def save_checkpoint(params: ParamSet, config: ModelConfig, path) -> None:
    """Binary checkpoint: magic, version, config header, then named tensors as
    little-endian float32. Layout documented in docs/checkpoint-format.md."""
    cfg_json = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg_json)))
        f.write(cfg_json)
        f.write(struct.pack("<I", len(params.tensors)))
        for name, tensor in params.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            arr = tensor.data.astype("<f4", copy=False)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> tuple[ParamSet, ModelConfig]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", f.read(4))
        config = ModelConfig(**json.loads(f.read(cfg_len).decode("utf-8")))
        (count,) = struct.unpack("<I", f.read(4))
        tensors = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape).copy()
            tensors[name] = nm.Tensor(data, requires_grad=True)
    return ParamSet(tensors), config
