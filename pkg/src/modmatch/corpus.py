"""Synthetic speech/text/paired corpora with known ground truth.

Each token k has a prototype vector p_k and a characteristic duration. A
paired utterance is a token sequence (no immediate repeats) whose token u is
rendered as ``durations[u]`` noisy copies of its prototype. Speech-only and
text-only streams draw from the same law and keep only one modality.

Randomness comes from numpy's Philox counter-based generator keyed by
``(seed, stream)``, so corpora are reproducible across platforms.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"MSTC"
VERSION = 1

KINDS = ("speech", "text", "paired")
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}
STREAMS = ("speech", "text", "paired", "eval_paired", "eval_text")
_STREAM_KIND = {"speech": "speech", "text": "text", "paired": "paired", "eval_paired": "paired", "eval_text": "text"}


class CorpusError(ValueError):
    pass


@dataclass
class CorpusSpec:
    vocab_size: int = 16
    feature_dim: int = 16
    utt_len: tuple[int, int] = (2, 12)
    duration_range: tuple[int, int] = (2, 6)
    duration_jitter: float = 0.5  # probability of a +-1 deviation from the token's base duration
    noise_sigma: float = 0.1
    channel_transform: bool = False
    counts: dict = field(
        default_factory=lambda: {"speech": 2000, "text": 4000, "paired": 1000, "eval_paired": 200, "eval_text": 200}
    )
    seed: int = 0

    def __post_init__(self):
        self.utt_len = tuple(int(x) for x in self.utt_len)
        self.duration_range = tuple(int(x) for x in self.duration_range)
        lo, hi = self.utt_len
        if not 1 <= lo <= hi:
            raise CorpusError(f"bad utterance length range {self.utt_len}")
        dlo, dhi = self.duration_range
        if not 1 <= dlo <= dhi:
            raise CorpusError(f"bad duration range {self.duration_range}")
        if self.vocab_size < 2 or self.feature_dim < 1:
            raise CorpusError("vocab_size must be >= 2 and feature_dim >= 1")
        if not 0.0 <= self.duration_jitter <= 1.0:
            raise CorpusError("duration_jitter must be a probability")
        unknown = set(self.counts) - set(STREAMS)
        if unknown:
            raise CorpusError(f"unknown corpus streams {sorted(unknown)}")
        self.counts = {s: int(self.counts.get(s, 0)) for s in STREAMS}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["utt_len"] = list(self.utt_len)
        d["duration_range"] = list(self.duration_range)
        return d


@dataclass
class CorpusItem:
    kind: str
    item_id: int
    frames: np.ndarray | None = None  # (T, D) float32
    tokens: np.ndarray | None = None  # (U,) int64
    durations: np.ndarray | None = None  # gold, evaluation only

    def __eq__(self, other):
        if not isinstance(other, CorpusItem):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            self.kind == other.kind
            and self.item_id == other.item_id
            and same(self.frames, other.frames)
            and same(self.tokens, other.tokens)
            and same(self.durations, other.durations)
        )


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *keys])))


class Language:
    """Prototypes and token-duration law derived from a spec."""

    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        rng = make_rng(spec.seed, 0)
        min_dist = 2 * spec.noise_sigma * np.sqrt(spec.feature_dim)
        for _ in range(100):
            protos = rng.standard_normal((spec.vocab_size, spec.feature_dim))
            diff = protos[:, None, :] - protos[None, :, :]
            dist = np.where(np.eye(spec.vocab_size, dtype=bool), np.inf, np.sqrt((diff**2).sum(-1)))
            if dist.min() >= min_dist:
                break
        else:
            raise CorpusError("prototype separation not reached in 100 attempts")
        self.prototypes = protos
        # spread base durations symmetrically over the range so their mean is the range midpoint
        lo, hi = spec.duration_range
        n_vals = hi - lo + 1
        ranks = rng.permutation(spec.vocab_size)
        pos = (ranks + 0.5) * n_vals / spec.vocab_size - 0.5
        base = lo + np.clip(np.floor(pos + 0.5), 0, n_vals - 1).astype(np.int64)
        self.base_duration = np.concatenate([[0], base])  # index by token id

    def sample_tokens(self, rng) -> np.ndarray:
        lo, hi = self.spec.utt_len
        n = int(rng.integers(lo, hi + 1))
        v = self.spec.vocab_size
        toks = [int(rng.integers(1, v + 1))]
        for _ in range(n - 1):
            nxt = int(rng.integers(1, v))  # v - 1 choices, skipping the previous token
            toks.append(nxt + (nxt >= toks[-1]))
        return np.array(toks, dtype=np.int64)

    def sample_durations(self, tokens, rng) -> np.ndarray:
        lo, hi = self.spec.duration_range
        jitter = np.where(rng.random(len(tokens)) < self.spec.duration_jitter, rng.choice([-1, 1], len(tokens)), 0)
        return np.clip(self.base_duration[tokens] + jitter, lo, hi).astype(np.int64)

    def render(self, tokens, durations, rng) -> np.ndarray:
        rows = np.repeat(self.prototypes[tokens - 1], durations, axis=0)
        frames = rows + self.spec.noise_sigma * rng.standard_normal(rows.shape)
        if self.spec.channel_transform:
            q, r = np.linalg.qr(rng.standard_normal((self.spec.feature_dim, self.spec.feature_dim)))
            frames = frames @ (q * np.sign(np.diag(r)))
        return frames.astype(np.float32)


def generate(spec: CorpusSpec) -> dict[str, list[CorpusItem]]:
    lang = Language(spec)
    out = {}
    for sid, stream in enumerate(STREAMS):
        rng = make_rng(spec.seed, 1, sid)
        kind = _STREAM_KIND[stream]
        items = []
        for i in range(spec.counts[stream]):
            toks = lang.sample_tokens(rng)
            durs = lang.sample_durations(toks, rng)
            frames = lang.render(toks, durs, rng)
            if kind == "speech":
                items.append(CorpusItem("speech", i, frames=frames))
            elif kind == "text":
                items.append(CorpusItem("text", i, tokens=toks))
            else:
                items.append(CorpusItem("paired", i, frames=frames, tokens=toks, durations=durs))
        out[stream] = items
    return out


# ---------------------------------------------------------------------------
# MSTC container


def _varint(n: int) -> bytes:
    if n < 0:
        raise CorpusError("varints must be non-negative")
    out = bytearray()
    while True:
        byte = n & 0x7F
        n >>= 7
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _read_varint(buf: bytes, pos: int, limit: int, base: int) -> tuple[int, int]:
    shift = result = 0
    while True:
        if pos >= limit:
            raise CorpusError(f"truncated varint at byte offset {base + pos}")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7


def encode_item(item: CorpusItem) -> bytes:
    body = bytearray([_KIND_CODE[item.kind]])
    body += _varint(item.item_id)
    for seq in (item.tokens, item.durations):
        if seq is None:
            body += _varint(0)
        else:
            body += _varint(len(seq) + 1)
            for x in seq:
                body += _varint(int(x))
    if item.frames is None:
        body += _varint(0)
    else:
        t, d = item.frames.shape
        body += _varint(t + 1) + _varint(d)
        body += np.ascontiguousarray(item.frames, dtype="<f4").tobytes()
    return struct.pack("<I", len(body)) + bytes(body)


def write_stream(path, items: Iterable[CorpusItem], spec: CorpusSpec, stream: str) -> None:
    hdr = json.dumps({"stream": stream, "spec": spec.to_dict()}, sort_keys=True).encode()
    buf = bytearray(MAGIC + struct.pack("<HI", VERSION, len(hdr)) + hdr)
    for item in items:
        buf += encode_item(item)
    Path(path).write_bytes(bytes(buf))


def read_stream(path) -> tuple[dict, list[CorpusItem]]:
    buf = Path(path).read_bytes()
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise CorpusError(f"{path}: not an MSTC corpus file (bad magic)")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CorpusError(f"{path}: unsupported MSTC version {version}")
    pos = 10 + hlen
    if pos > len(buf):
        raise CorpusError(f"{path}: truncated header at byte offset 10")
    header = json.loads(buf[10:pos])
    items = []
    while pos < len(buf):
        rec_start = pos
        if pos + 4 > len(buf):
            raise CorpusError(f"{path}: truncated length prefix at byte offset {rec_start}")
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        end = pos + n
        if end > len(buf):
            raise CorpusError(f"{path}: record length {n} at byte offset {rec_start} runs past end of file")
        try:
            items.append(_decode_body(buf, pos, end))
        except CorpusError as e:
            raise CorpusError(f"{path}: bad record at byte offset {rec_start}: {e}") from None
        except (IndexError, ValueError, KeyError) as e:
            raise CorpusError(f"{path}: bad record at byte offset {rec_start}: {e}") from None
        pos = end
    return header, items


def _decode_body(buf, pos, end) -> CorpusItem:
    kind = KINDS[buf[pos]]
    pos += 1
    item_id, pos = _read_varint(buf, pos, end, 0)
    seqs = []
    for _ in range(2):
        n, pos = _read_varint(buf, pos, end, 0)
        if n == 0:
            seqs.append(None)
            continue
        vals = []
        for _ in range(n - 1):
            v, pos = _read_varint(buf, pos, end, 0)
            vals.append(v)
        seqs.append(np.array(vals, dtype=np.int64))
    t1, pos = _read_varint(buf, pos, end, 0)
    frames = None
    if t1:
        d, pos = _read_varint(buf, pos, end, 0)
        nbytes = (t1 - 1) * d * 4
        if pos + nbytes != end:
            raise CorpusError("frame payload does not match record length")
        frames = np.frombuffer(buf[pos:end], dtype="<f4").reshape(t1 - 1, d).astype(np.float32)
        pos = end
    if pos != end:
        raise CorpusError("record has trailing bytes")
    return CorpusItem(kind, item_id, frames=frames, tokens=seqs[0], durations=seqs[1])


def write_corpus(out_dir, spec: CorpusSpec, streams: dict[str, list[CorpusItem]] | None = None) -> Path:
    """Generate (unless given) and persist all streams plus a JSON manifest."""
    streams = generate(spec) if streams is None else streams
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "MSTC", "version": VERSION, "spec": spec.to_dict(), "streams": {}}
    for name, items in streams.items():
        fname = f"{name}.mstc"
        write_stream(out / fname, items, spec, name)
        manifest["streams"][name] = {"path": fname, "count": len(items)}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_corpus(manifest_path) -> tuple[CorpusSpec, dict[str, list[CorpusItem]]]:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    spec = CorpusSpec(**manifest["spec"])
    streams = {}
    for name, entry in manifest["streams"].items():
        _, items = read_stream(manifest_path.parent / entry["path"])
        if len(items) != entry["count"]:
            raise CorpusError(f"stream {name}: manifest lists {entry['count']} items, file has {len(items)}")
        streams[name] = items
    return spec, streams
