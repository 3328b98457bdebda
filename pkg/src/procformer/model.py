"""Transformer network for prefix-based process prediction.

Pipeline: activity embedding + sinusoidal positions -> attention block(s)
-> masked global max-pool -> dropout -> dense(32, relu) -> dense(128, relu)
-> output layer. Time tasks concatenate the three scaled temporal features
to the pooled vector before the dense stack.
"""
import hashlib
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import CorruptFile, PrefixLongerThanMaxLen, ShapeMismatch, VersionMismatch
from .features import check_task

MAGIC = b"PFMR"
FORMAT_VERSION = 1
LAYER_NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int  # number of real activities; the embedding adds PAD and UNK
    max_len: int
    task: str = "next_activity"
    embed_dim: int = 36
    num_heads: int = 4
    num_blocks: int = 1
    ff_hidden: int = 64
    dropout_rate: float = 0.1
    dense_units: tuple = (32, 128)
    seed: int = 0

    def __post_init__(self):
        check_task(self.task)
        object.__setattr__(self, "dense_units", tuple(self.dense_units))
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim={self.embed_dim} is not divisible by num_heads={self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.vocab_size < 1 or self.max_len < 1:
            raise ValueError("vocab_size and max_len must be positive")

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    @property
    def num_tokens(self):
        return self.vocab_size + 2

    @property
    def output_dim(self):
        return self.num_tokens if self.task == "next_activity" else 1

    def to_dict(self):
        d = asdict(self)
        d["dense_units"] = list(self.dense_units)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ModelParams:
    """Ordered mapping of parameter name to trainable :class:`Tensor`."""

    def __init__(self, items=()):
        self._params = {}
        for name, value in items:
            self[name] = value

    def __setitem__(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, T.Tensor) else T.Tensor(value)
        t.requires_grad = True
        self._params[name] = t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def parameters(self):
        return [T.Parameter(n, t) for n, t in self._params.items()]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def snapshot(self):
        return {n: t.data.copy() for n, t in self._params.items()}

    def restore(self, snapshot):
        for n, t in self._params.items():
            t.data = snapshot[n].copy()

    def num_parameters(self):
        return sum(t.data.size for t in self._params.values())


def positional_encoding(max_len, embed_dim):
    """Fixed sinusoidal table; column 2i is sin, 2i+1 is cos of p / 10000^(2i/d)."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    pair = (np.arange(embed_dim) // 2) * 2
    angle = pos / np.power(10000.0, pair / embed_dim)
    return np.where(np.arange(embed_dim) % 2 == 0, np.sin(angle), np.cos(angle))


def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(config):
    rng = T.make_rng(config.seed, 0)
    d, dk = config.embed_dim, config.head_dim
    p = ModelParams()
    p["embedding"] = _glorot(rng, config.num_tokens, d)
    for b in range(config.num_blocks):
        pre = f"block{b}"
        for h in range(config.num_heads):
            for w in ("Wq", "Wk", "Wv"):
                p[f"{pre}.mha.head{h}.{w}"] = _glorot(rng, d, dk)
        p[f"{pre}.mha.Wo"] = _glorot(rng, d, d)
        p[f"{pre}.ln1.gain"] = np.ones(d)
        p[f"{pre}.ln1.bias"] = np.zeros(d)
        p[f"{pre}.ffn.W1"] = _glorot(rng, d, config.ff_hidden)
        p[f"{pre}.ffn.b1"] = np.zeros(config.ff_hidden)
        p[f"{pre}.ffn.W2"] = _glorot(rng, config.ff_hidden, d)
        p[f"{pre}.ffn.b2"] = np.zeros(d)
        p[f"{pre}.ln2.gain"] = np.ones(d)
        p[f"{pre}.ln2.bias"] = np.zeros(d)
    fan_in = d if config.task == "next_activity" else d + 3
    for i, units in enumerate(config.dense_units):
        p[f"dense{i}.W"] = _glorot(rng, fan_in, units)
        p[f"dense{i}.b"] = np.zeros(units)
        fan_in = units
    p["out.W"] = _glorot(rng, fan_in, config.output_dim)
    p["out.b"] = np.zeros(config.output_dim)
    return p


def scaled_dot_product_attention(Q, K, V, keep_mask):
    """softmax(Q K^T / sqrt(d_k)) V with padded keys masked out.

    ``keep_mask`` is boolean over key positions, shape ``[..., len]``.
    """
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ShapeMismatch(f"attention: Q {Q.shape}, K {K.shape}, V {V.shape}")
    scores = T.mul_scalar(T.matmul(Q, T.transpose_last_two(K)), 1.0 / math.sqrt(Q.shape[-1]))
    key_mask = np.asarray(keep_mask, dtype=bool)[..., None, :]
    return T.matmul(T.softmax_last_axis(scores, key_mask), V)


def multi_head_attention(x, params, keep_mask, prefix="block0.mha", num_heads=None):
    if num_heads is None:
        num_heads = sum(1 for n in params if n.startswith(prefix + ".head") and n.endswith(".Wq"))
    heads = []
    for h in range(num_heads):
        hp = f"{prefix}.head{h}"
        heads.append(scaled_dot_product_attention(
            T.matmul(x, params[hp + ".Wq"]),
            T.matmul(x, params[hp + ".Wk"]),
            T.matmul(x, params[hp + ".Wv"]),
            keep_mask,
        ))
    z = heads[0] if num_heads == 1 else T.concat_last_axis(*heads)
    return T.matmul(z, params[prefix + ".Wo"])


def attention_block(x, params, keep_mask, training=False, rng=None, prefix="block0",
                    num_heads=None, dropout_rate=0.1):
    p = params
    attn = multi_head_attention(x, p, keep_mask, prefix + ".mha", num_heads)
    attn = T.dropout(attn, dropout_rate, training, rng)
    y1 = T.layer_norm_last_axis(T.add(x, attn), p[prefix + ".ln1.gain"],
                                p[prefix + ".ln1.bias"], LAYER_NORM_EPS)
    hidden = T.relu(T.add(T.matmul(y1, p[prefix + ".ffn.W1"]), p[prefix + ".ffn.b1"]))
    ff = T.add(T.matmul(hidden, p[prefix + ".ffn.W2"]), p[prefix + ".ffn.b2"])
    ff = T.dropout(ff, dropout_rate, training, rng)
    return T.layer_norm_last_axis(T.add(y1, ff), p[prefix + ".ln2.gain"],
                                  p[prefix + ".ln2.bias"], LAYER_NORM_EPS)


def forward(ids, fv, params, config, training=False, rng=None):
    """Batched forward pass.

    ``ids`` is ``[batch, width]`` (PAD = 0, prefixes left-aligned); ``fv`` is
    ``[batch, 3]`` scaled temporal features, ignored for next_activity.
    Returns logits ``[batch, num_tokens]`` or scaled predictions ``[batch]``.
    """
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    keep = ids != 0
    lengths = keep.sum(axis=1)
    if lengths.max(initial=0) > config.max_len:
        raise PrefixLongerThanMaxLen(
            f"prefix of length {lengths.max()} exceeds max_len={config.max_len}")
    if (lengths == 0).any():
        raise ValueError("every prefix needs at least one event")
    if training and rng is None:
        raise ValueError("training mode needs an rng for dropout")
    rate = config.dropout_rate
    width = ids.shape[1]
    x = T.add(T.embedding_lookup(params["embedding"], ids),
              T.Tensor(positional_encoding(width, config.embed_dim)))
    for b in range(config.num_blocks):
        x = attention_block(x, params, keep, training, rng, f"block{b}",
                            config.num_heads, rate)
    h = T.max_over_axis(x, axis=1, mask=keep[:, :, None])
    h = T.dropout(h, rate, training, rng)
    if config.task != "next_activity":
        fv = np.asarray(fv, dtype=np.float64).reshape(len(ids), 3)
        h = T.concat_last_axis(h, T.Tensor(fv))
    for i in range(len(config.dense_units)):
        h = T.relu(T.add(T.matmul(h, params[f"dense{i}.W"]), params[f"dense{i}.b"]))
    out = T.add(T.matmul(h, params["out.W"]), params["out.b"])
    if config.task != "next_activity":
        out = T.reshape(out, (len(ids),))
    return out


# -- model file --------------------------------------------------------------

def config_hash(config, vocabulary_labels):
    payload = json.dumps({"config": config.to_dict(), "vocabulary": list(vocabulary_labels)},
                         sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class ModelFile:
    config: ModelConfig
    params: ModelParams
    vocabulary: list
    scaler: dict = None
    extra: dict = field(default_factory=dict)


def save_params(params, path, config, vocabulary=(), scaler=None, extra=None):
    """Write magic, version, JSON header, f64 parameter blobs and a CRC-32."""
    vocabulary = list(vocabulary)
    header = {
        "config": config.to_dict(),
        "config_hash": config_hash(config, vocabulary),
        "vocabulary": vocabulary,
        "scaler": scaler,
        "params": [{"name": n, "shape": list(t.shape)} for n, t in params.items()],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head]
    chunks.extend(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in params.items())
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_params(path, expected_vocabulary=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptFile(f"{path}: not a procformer model file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFile(f"{path}: checksum mismatch")
    version, head_len = struct.unpack("<II", body[4:12])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(body[12:12 + head_len])
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFile(f"{path}: unreadable header ({exc})") from None
    vocabulary = header["vocabulary"]
    if header["config_hash"] != config_hash(config, vocabulary):
        raise VersionMismatch(f"{path}: config hash does not match header contents")
    if expected_vocabulary is not None and list(expected_vocabulary) != vocabulary:
        raise VersionMismatch(f"{path}: model was trained with a different activity vocabulary")
    params = ModelParams()
    offset = 12 + head_len
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * n
        if end > len(body):
            raise CorruptFile(f"{path}: truncated parameter data")
        params[entry["name"]] = np.frombuffer(body[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(body):
        raise CorruptFile(f"{path}: trailing bytes after parameters")
    return ModelFile(config, params, vocabulary, header.get("scaler"), header.get("extra", {}))
