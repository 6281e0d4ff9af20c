"""Post-norm transformer encoder with tied output projection.

``Transformer.loss_and_grads`` runs the full forward/backward pass over a
collated batch; ``forward`` returns per-position vocabulary logits for a
single example.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from herbgen import compute
from herbgen.encoding import Batch, EncodedExample, collate
from herbgen.errors import DataError

MAGIC = b"HGCK"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_size: int = 768
    num_layers: int = 6
    num_heads: int = 12
    ff_multiplier: int = 4
    max_len: int = 256
    tie_output: bool = True
    init_std: float = 0.02
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")
        if min(self.vocab_size, self.hidden_size, self.num_heads, self.max_len, self.ff_multiplier) < 1:
            raise ValueError("model dimensions must be positive")
        if self.num_layers < 0:
            raise ValueError("num_layers must be non-negative")

    @property
    def d_k(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def ff_size(self) -> int:
        return self.hidden_size * self.ff_multiplier


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.hidden_size, cfg.ff_size
    shapes = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_len, d),
        "seg_emb": (2, d),
    }
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d), p + "bo": (d,),
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "w1": (d, f), p + "b1": (f,), p + "w2": (f, d), p + "b2": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
        })
    if not cfg.tie_output:
        shapes["out_proj"] = (cfg.vocab_size, d)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, meta: dict | None = None) -> "ModelParams":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("_g"):
                tensors[name] = np.ones(shape)
            elif leaf.startswith("b") or leaf.endswith("_b"):
                tensors[name] = np.zeros(shape)
            else:
                tensors[name] = rng.normal(0.0, config.init_std, size=shape)
        return cls(config, tensors, dict(meta or {}))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, json.loads(json.dumps(self.meta)))

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.tensors.items())

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


class Transformer:
    """Forward/backward over ``ModelParams``. Parameters are shared, not copied."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.cfg = params.config

    @property
    def output_matrix(self) -> np.ndarray:
        t = self.params.tensors
        return t["tok_emb"] if self.cfg.tie_output else t["out_proj"]

    # -- forward ---------------------------------------------------------

    def embed(self, token_ids, segment_ids, position_ids) -> np.ndarray:
        t = self.params.tensors
        token_ids = np.asarray(token_ids)
        position_ids = np.asarray(position_ids)
        if token_ids.size and (token_ids.max() >= self.cfg.vocab_size or token_ids.min() < 0):
            raise DataError("token id outside the model vocabulary")
        if position_ids.size and position_ids.max() >= self.cfg.max_len:
            raise DataError(f"position {int(position_ids.max())} exceeds max_len {self.cfg.max_len}")
        return t["tok_emb"][token_ids] + t["pos_emb"][position_ids] + t["seg_emb"][np.asarray(segment_ids)]

    def _layer_forward(self, i: int, x: np.ndarray, mask: np.ndarray):
        t = self.params.tensors
        p = f"layers.{i}."
        b, n, d = x.shape
        h, dk = self.cfg.num_heads, self.cfg.d_k
        scale = 1.0 / math.sqrt(dk)

        def heads(a):
            return a.reshape(b, n, h, dk).transpose(0, 2, 1, 3)

        q, k, v = heads(x @ t[p + "wq"]), heads(x @ t[p + "wk"]), heads(x @ t[p + "wv"])
        probs = compute.masked_softmax(q @ k.transpose(0, 1, 3, 2) * scale, mask[:, None])
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        r1 = x + ctx @ t[p + "wo"] + t[p + "bo"]
        h1, ln1 = compute.layer_norm(r1, t[p + "ln1_g"], t[p + "ln1_b"], self.cfg.ln_eps)
        f1 = h1 @ t[p + "w1"] + t[p + "b1"]
        g = compute.gelu(f1)
        r2 = h1 + g @ t[p + "w2"] + t[p + "b2"]
        out, ln2 = compute.layer_norm(r2, t[p + "ln2_g"], t[p + "ln2_b"], self.cfg.ln_eps)
        compute.check_finite(f"layer {i} output", out)
        cache = (x, q, k, v, probs, ctx, h1, ln1, f1, g, ln2)
        return out, cache

    def encode_batch(self, batch: Batch, keep: bool = False):
        """Final hidden states (B, N, D); with ``keep`` also the per-layer caches."""
        x = self.embed(batch.token_ids, batch.segment_ids, batch.position_ids)
        caches = []
        for i in range(self.cfg.num_layers):
            x, cache = self._layer_forward(i, x, batch.mask)
            if keep:
                caches.append(cache)
        return (x, caches) if keep else x

    def attention_probs(self, example: EncodedExample) -> list[np.ndarray]:
        """Per-layer attention probabilities, each (heads, N, N)."""
        batch = collate([example])
        _, caches = self.encode_batch(batch, keep=True)
        return [c[4][0] for c in caches]

    def forward(self, example: EncodedExample) -> np.ndarray:
        """Vocabulary logits at every position, shape (N, V)."""
        hidden = self.encode_batch(collate([example]))[0]
        return compute.check_finite("logits", hidden @ self.output_matrix.T)

    def next_token_logits(self, example: EncodedExample) -> np.ndarray:
        if example.query_row is None:
            raise ValueError("example has no query row")
        hidden = self.encode_batch(collate([example]))[0]
        return compute.check_finite("logits", hidden[example.query_row] @ self.output_matrix.T)

    def loss(self, batch: Batch) -> float:
        hidden = self.encode_batch(batch)
        logits = hidden[batch.row_batch, batch.row_pos] @ self.output_matrix.T
        loss, _ = compute.cross_entropy(logits, batch.row_targets, batch.row_weights)
        return loss

    # -- backward --------------------------------------------------------

    def _layer_backward(self, i: int, dout: np.ndarray, cache, grads: dict) -> np.ndarray:
        t = self.params.tensors
        p = f"layers.{i}."
        x, q, k, v, probs, ctx, h1, ln1, f1, g, ln2 = cache
        b, n, d = x.shape
        h, dk = self.cfg.num_heads, self.cfg.d_k
        f = f1.shape[-1]
        scale = 1.0 / math.sqrt(dk)

        dr2, grads[p + "ln2_g"], grads[p + "ln2_b"] = compute.layer_norm_backward(dout, ln2, t[p + "ln2_g"])
        grads[p + "w2"] = g.reshape(-1, f).T @ dr2.reshape(-1, d)
        grads[p + "b2"] = dr2.sum(axis=(0, 1))
        df1 = compute.gelu_backward(f1, dr2 @ t[p + "w2"].T)
        grads[p + "w1"] = h1.reshape(-1, d).T @ df1.reshape(-1, f)
        grads[p + "b1"] = df1.sum(axis=(0, 1))
        dh1 = dr2 + df1 @ t[p + "w1"].T

        dr1, grads[p + "ln1_g"], grads[p + "ln1_b"] = compute.layer_norm_backward(dh1, ln1, t[p + "ln1_g"])
        grads[p + "wo"] = ctx.reshape(-1, d).T @ dr1.reshape(-1, d)
        grads[p + "bo"] = dr1.sum(axis=(0, 1))
        dctx = (dr1 @ t[p + "wo"].T).reshape(b, n, h, dk).transpose(0, 2, 1, 3)
        dprobs = dctx @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dctx
        ds = compute.softmax_backward(probs, dprobs) * scale
        dq = ds @ k
        dkk = ds.transpose(0, 1, 3, 2) @ q

        def merge(a):
            return a.transpose(0, 2, 1, 3).reshape(b, n, d)

        dq, dkk, dv = merge(dq), merge(dkk), merge(dv)
        xf = x.reshape(-1, d)
        grads[p + "wq"] = xf.T @ dq.reshape(-1, d)
        grads[p + "wk"] = xf.T @ dkk.reshape(-1, d)
        grads[p + "wv"] = xf.T @ dv.reshape(-1, d)
        return dr1 + dq @ t[p + "wq"].T + dkk @ t[p + "wk"].T + dv @ t[p + "wv"].T

    def loss_and_grads(self, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
        """Batch loss (mean of per-example mean NLL) and gradients for every parameter."""
        t = self.params.tensors
        hidden, caches = self.encode_batch(batch, keep=True)
        out_w = self.output_matrix
        hq = hidden[batch.row_batch, batch.row_pos]
        logits = compute.check_finite("logits", hq @ out_w.T)
        loss, dlogits = compute.cross_entropy(logits, batch.row_targets, batch.row_weights)

        grads: dict[str, np.ndarray] = {}
        d_out_w = dlogits.T @ hq
        dx = np.zeros_like(hidden)
        np.add.at(dx, (batch.row_batch, batch.row_pos), dlogits @ out_w)
        for i in reversed(range(self.cfg.num_layers)):
            dx = self._layer_backward(i, dx, caches[i], grads)

        d = self.cfg.hidden_size
        flat = dx.reshape(-1, d)
        dtok = np.zeros_like(t["tok_emb"])
        np.add.at(dtok, batch.token_ids.reshape(-1), flat)
        dpos = np.zeros_like(t["pos_emb"])
        np.add.at(dpos, batch.position_ids.reshape(-1), flat)
        dseg = np.zeros_like(t["seg_emb"])
        np.add.at(dseg, batch.segment_ids.reshape(-1), flat)
        if self.cfg.tie_output:
            dtok += d_out_w
        else:
            grads["out_proj"] = d_out_w
        grads["tok_emb"], grads["pos_emb"], grads["seg_emb"] = dtok, dpos, dseg
        return loss, {name: grads[name] for name in t}


def init_from_pretrained(
    pre: ModelParams, config: ModelConfig, vocab_tokens=None, seed: int = 0
) -> ModelParams:
    """Fine-tune initialization: copy embeddings and the lowest ``num_layers`` layers."""
    stored = pre.meta.get("vocab")
    if pre.config.vocab_size != config.vocab_size or (
        vocab_tokens is not None and stored is not None and list(stored) != list(vocab_tokens)
    ):
        raise DataError("pretrained checkpoint vocabulary does not match the fine-tune vocabulary")
    if pre.config.hidden_size != config.hidden_size:
        raise DataError(
            f"pretrained hidden_size {pre.config.hidden_size} != fine-tune hidden_size {config.hidden_size}"
        )
    if pre.config.num_heads != config.num_heads or pre.config.ff_multiplier != config.ff_multiplier:
        raise DataError("pretrained head count / feed-forward width differ from the fine-tune config")
    if pre.config.num_layers < config.num_layers:
        raise DataError("pretrained model is shallower than the fine-tune model")
    out = ModelParams.init(config, seed, meta=pre.meta)
    for name, arr in out.tensors.items():
        if name == "pos_emb":
            rows = min(arr.shape[0], pre.tensors[name].shape[0])
            arr[:rows] = pre.tensors[name][:rows]
        elif name in pre.tensors:
            arr[...] = pre.tensors[name]
    return out


# -- checkpoint container --------------------------------------------------

def _header(params: ModelParams) -> bytes:
    header = {
        "config": asdict(params.config),
        "meta": params.meta,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
    }
    return json.dumps(header, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def save_checkpoint(params: ModelParams, path: str | Path) -> str:
    """Write the checkpoint; returns its SHA-256 hex digest."""
    header = _header(params)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    for arr in params.tensors.values():
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    blob = b"".join(chunks)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> ModelParams:
    try:
        return _load_checkpoint(path, expected)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError, KeyError) as exc:
        raise DataError(f"{path}: corrupted checkpoint ({exc})") from exc


def _load_checkpoint(path, expected):
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic bytes)")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(blob[off : off + hlen].decode("utf-8"))
    off += hlen
    config = ModelConfig(**header["config"])
    if expected is not None and expected != config:
        diffs = [f"{k}: checkpoint {getattr(config, k)!r} vs expected {getattr(expected, k)!r}"
                 for k in asdict(config) if getattr(config, k) != getattr(expected, k)]
        raise DataError(f"{path}: config mismatch ({'; '.join(diffs)})")
    shapes = param_shapes(config)
    tensors = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if shapes.get(name) != shape:
            raise DataError(f"{path}: tensor {name} has shape {shape}, config implies {shapes.get(name)}")
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        stored = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        if tuple(stored) != shape:
            raise DataError(f"{path}: tensor {name} data shape {stored} disagrees with header {shape}")
        count = int(np.prod(shape))
        if off + 8 * count > len(blob):
            raise DataError(f"{path}: truncated data for tensor {name}")
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 8 * count
    if set(tensors) != set(shapes):
        raise DataError(f"{path}: missing tensors {sorted(set(shapes) - set(tensors))}")
    if off != len(blob):
        raise DataError(f"{path}: trailing bytes after tensor data")
    return ModelParams(config, tensors, header.get("meta", {}))
