"""Parametric stacks: speech encoder, text embedding extractor, shared encoder,
refiner, duration predictor and the transducer decoder (prediction + joint).

All stacks work on padded batches ``(B, T, d_model)`` with integer lengths;
padded rows are zeroed after every block and excluded from attention, so a
batched forward equals the per-item forward.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Parameters = dict  # ordered name -> Tensor


class EncoderError(ValueError):
    pass


@dataclass
class ModelConfig:
    feature_dim: int = 16
    vocab_size: int = 16  # real tokens; blank (0) is extra
    d_model: int = 32
    n_heads: int = 4
    ff_dim: int = 64
    n_speech_layers: int = 2
    n_shared_layers: int = 6
    n_text_conv_layers: int = 2
    n_text_transformer_layers: int = 2
    text_conv_kernel: int = 5
    n_refiner_layers: int = 2
    refiner_kernel: int = 17
    n_duration_blocks: int = 2
    duration_kernel: int = 3
    decoder_hidden: int = 32
    joint_dim: int = 32
    codebook_size: int = 64
    subsampling: int = 1  # reserved; only 1 is supported

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value < 1:
                raise EncoderError(f"model.{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise EncoderError("d_model must be divisible by n_heads")
        if self.subsampling != 1:
            raise EncoderError("frame subsampling is not implemented")
        for k in ("text_conv_kernel", "refiner_kernel", "duration_kernel"):
            if getattr(self, k) % 2 == 0:
                raise EncoderError(f"{k} must be odd")


def sinusoid(positions, dim: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freq = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = positions[..., None] * freq
    out = np.zeros(positions.shape + (dim,))
    out[..., 0:2 * half:2] = np.sin(ang)
    out[..., 1:2 * half:2] = np.cos(ang)
    return out


def pad_batch(seqs: Sequence[np.ndarray], dtype=None) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    first = np.asarray(seqs[0])
    out = np.zeros((len(seqs), int(lengths.max())) + first.shape[1:], dtype=dtype or first.dtype)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def length_mask(lengths, t: int) -> np.ndarray:
    return np.arange(t)[None, :] < np.asarray(lengths)[:, None]


# ---------------------------------------------------------------------------
# initialisation


class _Init:
    def __init__(self, seed: int, dtype):
        self.rng = np.random.Generator(np.random.Philox(seed))
        self.dtype = dtype
        self.params: Parameters = {}

    def add(self, name, arr):
        self.params[name] = ad.parameter(np.asarray(arr, dtype=self.dtype), name=name)

    def linear(self, name, n_in, n_out, bias=True):
        bound = np.sqrt(3.0 / n_in)
        self.add(f"{name}.w", self.rng.uniform(-bound, bound, size=(n_in, n_out)))
        if bias:
            self.add(f"{name}.b", np.zeros(n_out))

    def norm(self, name, d):
        self.add(f"{name}.g", np.ones(d))
        self.add(f"{name}.b", np.zeros(d))

    def attention(self, name, d):
        self.norm(f"{name}.ln", d)
        self.linear(f"{name}.qkv", d, 3 * d)
        self.linear(f"{name}.out", d, d)

    def ffn(self, name, d, ff):
        self.norm(f"{name}.ln", d)
        self.linear(f"{name}.in", d, ff)
        self.linear(f"{name}.out", ff, d)

    def lightconv(self, name, d, heads, k):
        self.norm(f"{name}.ln", d)
        bound = np.sqrt(3.0 / k)
        self.add(f"{name}.kernel", self.rng.uniform(-bound, bound, size=(heads, k)))
        self.linear(f"{name}.out", d, d)

    def transformer(self, name, d, ff):
        self.attention(f"{name}.attn", d)
        self.ffn(f"{name}.ffn", d, ff)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64, zero_joint_out: bool = True) -> Parameters:
    """Fresh parameters in a stable, documented order.

    The joint output projection starts at zero so an untrained decoder ties every
    symbol and greedy search emits nothing (chance-level TER of exactly 1).
    ``zero_joint_out=False`` keeps the random draw, which gradient checks need to
    see non-trivial gradients through the joint network.
    """
    it = _Init(seed, dtype)
    d, ff = cfg.d_model, cfg.ff_dim
    it.linear("speech.proj", cfg.feature_dim, d)
    for i in range(cfg.n_speech_layers):
        it.transformer(f"speech.layer{i}", d, ff)
    it.norm("speech.ln_out", d)

    it.add("text.embed", it.rng.standard_normal((cfg.vocab_size + 1, d)))
    for i in range(cfg.n_text_conv_layers):
        it.norm(f"text.conv{i}.ln", d)
        bound = np.sqrt(3.0 / (d * cfg.text_conv_kernel))
        it.add(f"text.conv{i}.w", it.rng.uniform(-bound, bound, size=(d, d, cfg.text_conv_kernel)))
        it.add(f"text.conv{i}.b", np.zeros(d))
    for i in range(cfg.n_text_transformer_layers):
        it.transformer(f"text.layer{i}", d, ff)
    it.norm("text.ln_out", d)

    for i in range(cfg.n_shared_layers):
        it.transformer(f"shared.layer{i}", d, ff)
    it.norm("shared.ln_out", d)

    for i in range(cfg.n_refiner_layers):
        it.attention(f"refiner.layer{i}.attn", d)
        it.lightconv(f"refiner.layer{i}.conv", d, cfg.n_heads, cfg.refiner_kernel)
        it.ffn(f"refiner.layer{i}.ffn", d, ff)
    it.norm("refiner.ln_out", d)

    for i in range(cfg.n_duration_blocks):
        it.lightconv(f"duration.block{i}", d, cfg.n_heads, cfg.duration_kernel)
    it.norm("duration.ln_out", d)
    it.linear("duration.proj", d, 1)

    h, j = cfg.decoder_hidden, cfg.joint_dim
    it.add("decoder.embed", it.rng.standard_normal((cfg.vocab_size + 1, h)))
    it.linear("decoder.in", h, h)
    it.linear("decoder.rec", h, h, bias=False)
    it.linear("joint.enc", d, j)
    it.linear("joint.pred", h, j, bias=False)
    it.linear("joint.out", j, cfg.vocab_size + 1)
    if zero_joint_out:
        it.params["joint.out.w"].data[:] = 0.0
    it.linear("speech_mlm", d, cfg.codebook_size)
    return it.params


def copy_params(params: Parameters, requires_grad: bool = False) -> Parameters:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad, name=k) for k, v in params.items()}


# ---------------------------------------------------------------------------
# building blocks


def _linear(p, name, x):
    y = x @ p[f"{name}.w"]
    b = p.get(f"{name}.b")
    return y if b is None else y + b


def _norm(p, name, x):
    return ad.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def _zero_pad(x: Tensor, mask: np.ndarray) -> Tensor:
    return x * mask[:, :, None].astype(x.dtype)


def _attention(p, name, x, mask, n_heads):
    bsz, t, d = x.shape
    dh = d // n_heads
    h = _norm(p, f"{name}.ln", x)
    qkv = _linear(p, f"{name}.qkv", h).reshape(bsz, t, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    bias = np.where(mask, 0.0, -1e9).astype(x.dtype)[:, None, None, :]
    att = ad.softmax(scores + bias, axis=-1)
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, t, d)
    return x + _linear(p, f"{name}.out", ctx)


def _ffn(p, name, x):
    h = _norm(p, f"{name}.ln", x)
    return x + _linear(p, f"{name}.out", ad.swish(_linear(p, f"{name}.in", h)))


def _transformer(p, name, x, mask, n_heads):
    x = _attention(p, f"{name}.attn", x, mask, n_heads)
    x = _ffn(p, f"{name}.ffn", x)
    return _zero_pad(x, mask)


def _lightconv(p, name, x, mask, n_heads):
    """Depthwise conv with a softmax-normalised kernel shared within each head."""
    d = x.shape[-1]
    kernel = ad.softmax(p[f"{name}.kernel"], axis=-1)  # (H, K)
    per_channel = ad.gather(kernel, np.arange(d) // (d // n_heads))  # (d, K)
    h = _zero_pad(_norm(p, f"{name}.ln", x), mask)
    y = ad.conv1d(h, per_channel)
    return _zero_pad(x + _linear(p, f"{name}.out", ad.swish(y)), mask)


def _positional(x: Tensor) -> Tensor:
    return x + sinusoid(np.arange(x.shape[1]), x.shape[2]).astype(x.dtype)[None]


# ---------------------------------------------------------------------------
# stacks


class Model:
    """Forward functions for every stack; parameters are passed explicitly so
    the same code serves the student and the EMA teacher."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    def _check_len(self, lengths, what):
        if len(lengths) == 0 or np.min(lengths) < 1:
            raise EncoderError(f"{what}: zero-length input")

    def speech_latents(self, p, frames, lengths) -> Tensor:
        """Feature projection of raw frames (the pre-mask latents)."""
        self._check_len(lengths, "speech_encode")
        x = _linear(p, "speech.proj", ad.as_tensor(frames, p["speech.proj.w"].dtype))
        return _zero_pad(x, length_mask(lengths, x.shape[1]))

    def speech_encode(self, p, frames, lengths, latents: Tensor | None = None) -> Tensor:
        """e_s for a padded batch of frames (B, T, D); ``latents`` overrides the
        projected input (used to feed time-masked latents)."""
        x = self.speech_latents(p, frames, lengths) if latents is None else latents
        mask = length_mask(lengths, x.shape[1])
        x = _zero_pad(_positional(x), mask)
        for i in range(self.cfg.n_speech_layers):
            x = _transformer(p, f"speech.layer{i}", x, mask, self.cfg.n_heads)
        return _zero_pad(_norm(p, "speech.ln_out", x), mask)

    def text_embed(self, p, tokens, lengths) -> Tensor:
        self._check_len(lengths, "text_embed")
        tokens = np.asarray(tokens)
        mask = length_mask(lengths, tokens.shape[1])
        if np.any(tokens[mask] < 1) or np.any(tokens[mask] > self.cfg.vocab_size):
            raise EncoderError(f"text_embed: token ids must lie in [1, {self.cfg.vocab_size}] (blank is 0)")
        x = _zero_pad(ad.gather(p["text.embed"], np.where(mask, tokens, 0)), mask)
        for i in range(self.cfg.n_text_conv_layers):
            h = _zero_pad(_norm(p, f"text.conv{i}.ln", x), mask)
            y = ad.conv1d(h, p[f"text.conv{i}.w"]) + p[f"text.conv{i}.b"]
            x = _zero_pad(x + ad.swish(y), mask)
        x = _zero_pad(_positional(x), mask)
        for i in range(self.cfg.n_text_transformer_layers):
            x = _transformer(p, f"text.layer{i}", x, mask, self.cfg.n_heads)
        return _zero_pad(_norm(p, "text.ln_out", x), mask)

    def shared_encode(self, p, x: Tensor, lengths) -> Tensor:
        self._check_len(lengths, "shared_encode")
        mask = length_mask(lengths, x.shape[1])
        x = _zero_pad(_positional(x), mask)
        for i in range(self.cfg.n_shared_layers):
            x = _transformer(p, f"shared.layer{i}", x, mask, self.cfg.n_heads)
        return _zero_pad(_norm(p, "shared.ln_out", x), mask)

    def refine(self, p, x: Tensor, lengths) -> Tensor:
        self._check_len(lengths, "refine")
        mask = length_mask(lengths, x.shape[1])
        for i in range(self.cfg.n_refiner_layers):
            x = _attention(p, f"refiner.layer{i}.attn", x, mask, self.cfg.n_heads)
            x = _lightconv(p, f"refiner.layer{i}.conv", x, mask, self.cfg.n_heads)
            x = _zero_pad(_ffn(p, f"refiner.layer{i}.ffn", x), mask)
        return _zero_pad(_norm(p, "refiner.ln_out", x), mask)

    def duration_log(self, p, e_t: Tensor, lengths) -> Tensor:
        """Log-domain duration predictions (B, U); padded entries are zero."""
        self._check_len(lengths, "predict_durations")
        mask = length_mask(lengths, e_t.shape[1])
        x = e_t
        for i in range(self.cfg.n_duration_blocks):
            x = _lightconv(p, f"duration.block{i}", x, mask, self.cfg.n_heads)
        h = _norm(p, "duration.ln_out", x)
        out = _linear(p, "duration.proj", h).reshape(x.shape[0], x.shape[1])
        return out * mask.astype(out.dtype)

    def predict_durations(self, p, e_t: Tensor, lengths) -> np.ndarray:
        return np.exp(self.duration_log(p, e_t, lengths).data)

    # -- transducer decoder -------------------------------------------------

    def _check_tokens(self, tokens):
        tokens = np.asarray(tokens)
        if np.any(tokens < 0) or np.any(tokens > self.cfg.vocab_size):
            raise EncoderError(f"decoder: token ids must lie in [0, {self.cfg.vocab_size}]")
        return tokens

    def decode_step(self, p, prev_token: int, state):
        """One prediction-network step. ``state`` is the hidden vector or None at start."""
        self._check_tokens([prev_token])
        x = _linear(p, "decoder.in", ad.gather(p["decoder.embed"], np.array([prev_token])))
        if state is not None:
            x = x + ad.as_tensor(state) @ p["decoder.rec.w"]
        h = ad.tanh(x)
        return h, h

    def predict(self, p, tokens, lengths) -> Tensor:
        """Prediction vectors for u = 0..U_max: (B, U_max+1, H)."""
        tokens = self._check_tokens(tokens)
        bsz = tokens.shape[0]
        inputs = np.concatenate([np.zeros((bsz, 1), dtype=np.int64), tokens], axis=1)
        mask = length_mask(np.asarray(lengths) + 1, inputs.shape[1])
        x = _linear(p, "decoder.in", ad.gather(p["decoder.embed"], np.where(mask, inputs, 0)))
        hs = []
        h = None
        for u in range(inputs.shape[1]):
            z = x[:, u]
            if h is not None:
                z = z + h @ p["decoder.rec.w"]
            h = ad.tanh(z)
            hs.append(h.reshape(bsz, 1, -1))
        return ad.concat(hs, axis=1)

    def joint(self, p, enc: Tensor, pred: Tensor) -> Tensor:
        """Joint logits. enc (..., d) and pred (..., H) broadcast against each other."""
        z = ad.tanh(_linear(p, "joint.enc", enc) + _linear(p, "joint.pred", pred))
        return _linear(p, "joint.out", z)

    def lattice(self, p, enc: Tensor, tokens, u_lens) -> Tensor:
        """Full (B, T, U+1, V+1) joint lattice."""
        pred = self.predict(p, tokens, u_lens)
        bsz, t, d = enc.shape
        return self.joint(p, enc.reshape(bsz, t, 1, d), pred.reshape(bsz, 1, pred.shape[1], pred.shape[2]))


# ---------------------------------------------------------------------------
# checkpoint container

MAGIC = b"MSCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, header: dict, sections: dict[str, dict[str, np.ndarray]]) -> None:
    """Binary container: magic, version, JSON header, then named sections of
    (path, dtype, shape, raw little-endian data) records."""
    buf = bytearray()
    buf += MAGIC + struct.pack("<I", VERSION)
    hdr = json.dumps(header, sort_keys=True).encode()
    buf += struct.pack("<I", len(hdr)) + hdr
    buf += struct.pack("<I", len(sections))
    for sname, records in sections.items():
        sb = sname.encode()
        buf += struct.pack("<H", len(sb)) + sb + struct.pack("<I", len(records))
        for rname, arr in records.items():
            arr = np.asarray(arr)
            dt = arr.dtype.newbyteorder("<")
            if dt not in _CODES:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {rname}")
            rb = rname.encode()
            raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
            buf += struct.pack("<H", len(rb)) + rb
            buf += struct.pack("<BB", _CODES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
            buf += struct.pack("<Q", len(raw)) + raw
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen))
    sections = {}
    (nsec,) = struct.unpack("<I", take(4))
    for _ in range(nsec):
        (sl,) = struct.unpack("<H", take(2))
        sname = take(sl).decode()
        (nrec,) = struct.unpack("<I", take(4))
        records = {}
        for _ in range(nrec):
            (rl,) = struct.unpack("<H", take(2))
            rname = take(rl).decode()
            code, ndim = struct.unpack("<BB", take(2))
            if code not in _DTYPES:
                raise CheckpointError(f"unknown dtype code {code} at byte {pos}")
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            (nbytes,) = struct.unpack("<Q", take(8))
            arr = np.frombuffer(take(nbytes), dtype=_DTYPES[code]).reshape(shape)
            records[rname] = arr.astype(_DTYPES[code].newbyteorder("="))
        sections[sname] = records
    return header, sections


def params_to_arrays(params: Parameters) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def arrays_to_params(arrays: dict[str, np.ndarray], requires_grad=True) -> Parameters:
    return {k: Tensor(np.array(v), requires_grad=requires_grad, name=k) for k, v in arrays.items()}
