"""Entropy-coded dithered quantizer.

Uniform quantizer with subtractive dither, a reproducible dither generator
shared by encoder and decoder, and per-dither-bin Huffman codebooks with an
escape codeword for indices outside the trained support.
"""

import heapq
from dataclasses import dataclass

import numpy as np

PAYLOAD_BITS = 32
ESCAPE = "esc"


class CorruptStreamError(ValueError):
    """Bitstream ended early or contains an undecodable prefix."""


@dataclass(frozen=True)
class EcdqConfig:
    delta: float
    dither_seed: int
    num_dither_bins: int = 11
    training_samples: int = 100_000
    max_symbol_magnitude: int = 32

    def __post_init__(self):
        if not (np.isfinite(self.delta) and self.delta > 0):
            raise ValueError("delta must be finite and positive")
        if int(self.num_dither_bins) < 1:
            raise ValueError("num_dither_bins must be >= 1")
        if int(self.training_samples) < 1 or int(self.max_symbol_magnitude) < 1:
            raise ValueError("training_samples and max_symbol_magnitude must be positive")

    def dither_bin(self, dither):
        return dither_bin(dither, self.delta, self.num_dither_bins)


def quantize(v, delta):
    """Index of the nearest multiple of delta; ties go to the even index."""
    return int(np.rint(v / delta))


def dither_bin(dither, delta, num_bins):
    """Uniform bin of (-delta/2, delta/2) holding ``dither`` (vectorized)."""
    b = np.floor((np.asarray(dither) / delta + 0.5) * num_bins).astype(np.int64)
    b = np.clip(b, 0, num_bins - 1)
    return int(b) if b.ndim == 0 else b


def dither_block(seed, delta, n, offset=0):
    """Samples offset..offset+n-1 of the dither sequence for ``seed``."""
    rng = np.random.default_rng(seed)
    if offset:
        rng.random(offset)
    u = rng.random(n)
    # map [0, 1) to the open interval (-delta/2, delta/2)
    u[u == 0.0] = 0.5
    return (u - 0.5) * delta


def dither_stream(seed, delta, chunk=4096):
    """Endless i.i.d. uniform dither on (-delta/2, delta/2); same seed, same sequence."""
    rng = np.random.default_rng(seed)
    while True:
        u = rng.random(chunk)
        u[u == 0.0] = 0.5
        yield from ((u - 0.5) * delta).tolist()


# ------------------------------------------------------------------ Huffman

def _symbol_order(symbols):
    """Deterministic order: integer indices ascending, escape last."""
    ints = sorted(s for s in symbols if s != ESCAPE)
    return ints + ([ESCAPE] if ESCAPE in symbols else [])


def huffman_lengths(weights):
    """Codeword lengths of a Huffman code for {symbol: weight}.

    Ties are broken by symbol order, then by creation order of merged nodes,
    so the result is reproducible. A lone symbol gets a 1-bit codeword.
    """
    symbols = _symbol_order([s for s, w in weights.items()])
    if not symbols:
        return {}
    if len(symbols) == 1:
        return {symbols[0]: 1}
    heap = [(float(weights[s]), k, (s,)) for k, s in enumerate(symbols)]
    heapq.heapify(heap)
    depth = {s: 0 for s in symbols}
    counter = len(symbols)
    while len(heap) > 1:
        w1, _, g1 = heapq.heappop(heap)
        w2, _, g2 = heapq.heappop(heap)
        for s in g1 + g2:
            depth[s] += 1
        heapq.heappush(heap, (w1 + w2, counter, g1 + g2))
        counter += 1
    return depth


def canonical_code(lengths):
    """Canonical prefix code for {symbol: length}."""
    order = _symbol_order(list(lengths))
    rank = {s: k for k, s in enumerate(order)}
    items = sorted(lengths.items(), key=lambda kv: (kv[1], rank[kv[0]]))
    code = {}
    value = 0
    prev_len = items[0][1]
    for k, (s, n) in enumerate(items):
        if k:
            value = (value + 1) << (n - prev_len)
        code[s] = format(value, "0%db" % n)
        prev_len = n
    return code


def _is_prefix_free(words):
    words = sorted(words)
    return all(not b.startswith(a) for a, b in zip(words, words[1:]))


class CodeBook:
    """Per-dither-bin prefix codes over quantizer indices plus an escape word."""

    def __init__(self, tables, escapes, payload_bits=PAYLOAD_BITS):
        if len(tables) != len(escapes) or not tables:
            raise ValueError("need one table and one escape codeword per bin")
        self.tables = [dict((int(k), str(v)) for k, v in t.items()) for t in tables]
        self.escapes = [str(e) for e in escapes]
        self.payload_bits = int(payload_bits)
        self._decoders = []
        for b, (t, esc) in enumerate(zip(self.tables, self.escapes)):
            words = list(t.values()) + [esc]
            if not all(w and set(w) <= {"0", "1"} for w in words):
                raise ValueError("bin %d has an empty or non-binary codeword" % b)
            if not _is_prefix_free(words):
                raise ValueError("bin %d code is not prefix-free" % b)
            dec = {w: s for s, w in t.items()}
            dec[esc] = ESCAPE
            self._decoders.append(dec)
        self._max_len = [max(len(w) for w in d) for d in self._decoders]

    @property
    def num_bins(self):
        return len(self.tables)

    def codeword(self, index, b):
        """Bits for ``index`` in bin ``b`` (escape plus payload if untrained)."""
        w = self.tables[b].get(index)
        if w is not None:
            return w
        lim = 1 << (self.payload_bits - 1)
        if not -lim <= index < lim:
            raise OverflowError("index %d does not fit the %d-bit escape payload" % (index, self.payload_bits))
        return self.escapes[b] + format(index & ((1 << self.payload_bits) - 1), "0%db" % self.payload_bits)

    def length_table(self, b, lo, hi):
        """Code lengths for indices lo..hi in bin b (escape-coded ones included)."""
        esc = len(self.escapes[b]) + self.payload_bits
        return np.array([len(self.tables[b][i]) if i in self.tables[b] else esc for i in range(lo, hi + 1)])

    def read_index(self, reader, b):
        dec = self._decoders[b]
        word = ""
        for _ in range(self._max_len[b]):
            word += reader.read(1)
            s = dec.get(word)
            if s is None:
                continue
            if s != ESCAPE:
                return s
            raw = int(reader.read(self.payload_bits), 2)
            if raw >= 1 << (self.payload_bits - 1):
                raw -= 1 << self.payload_bits
            return raw
        raise CorruptStreamError("undecodable prefix %r in bin %d" % (word, b))

    def kraft_sum(self, b):
        return sum(2.0 ** -len(w) for w in self._decoders[b])

    def is_prefix_free(self, b):
        return _is_prefix_free(self._decoders[b])

    def to_dict(self):
        return {"payload_bits": self.payload_bits,
                "bins": [{"codes": [[int(k), v] for k, v in sorted(t.items())], "escape": e}
                         for t, e in zip(self.tables, self.escapes)]}

    @classmethod
    def from_dict(cls, doc):
        return cls([{int(k): v for k, v in b["codes"]} for b in doc["bins"]],
                   [b["escape"] for b in doc["bins"]], doc.get("payload_bits", PAYLOAD_BITS))

    def __eq__(self, other):
        return isinstance(other, CodeBook) and self.to_dict() == other.to_dict()


def _as_log(symbol_log):
    arr = np.asarray(symbol_log, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("symbol log must be a sequence of (index, dither_bin) pairs")
    return arr[:, 0], arr[:, 1]


def train_codebooks(symbol_log, config, smoothing=1):
    """Per-bin Huffman codebooks from a log of (index, dither_bin) pairs.

    Histogram counts inside [-M, M] get ``smoothing`` added to every index;
    indices outside share the escape symbol (which is smoothed as well).
    A bin that saw no samples gets an escape-only code.
    """
    idx, bins = _as_log(symbol_log)
    if idx.size == 0:
        raise ValueError("empty symbol log")
    M = int(config.max_symbol_magnitude)
    tables, escapes = [], []
    for b in range(config.num_dither_bins):
        sel = idx[bins == b]
        if sel.size == 0:
            tables.append({})
            escapes.append("0")
            continue
        inside = sel[np.abs(sel) <= M]
        counts = np.bincount(inside + M, minlength=2 * M + 1).astype(float) + smoothing
        weights = {int(i - M): c for i, c in enumerate(counts) if c > 0}
        weights[ESCAPE] = float(sel.size - inside.size) + smoothing
        if weights[ESCAPE] == 0.0:
            weights[ESCAPE] = 0.5     # keep escape reachable even without smoothing
        code = canonical_code(huffman_lengths(weights))
        escapes.append(code.pop(ESCAPE))
        tables.append(code)
    return CodeBook(tables, escapes)


# ------------------------------------------------------------------ bit I/O

class BitWriter:
    """Accumulates codewords; bytes are MSB first, zero-padded at the end only."""

    def __init__(self):
        self._chunks = []
        self.n_bits = 0

    def write(self, bits):
        self._chunks.append(bits)
        self.n_bits += len(bits)

    def getvalue(self):
        bits = "".join(self._chunks)
        pad = (-len(bits)) % 8
        bits += "0" * pad
        return bytes(int(bits[i:i + 8], 2) for i in range(0, len(bits), 8))


class BitReader:
    def __init__(self, data, n_bits=None):
        self._bits = "".join(format(b, "08b") for b in data)
        if n_bits is not None:
            self._bits = self._bits[:n_bits]
        self.pos = 0

    def read(self, n):
        if self.pos + n > len(self._bits):
            raise CorruptStreamError("bitstream exhausted at bit %d" % self.pos)
        out = self._bits[self.pos:self.pos + n]
        self.pos += n
        return out

    @property
    def remaining(self):
        return len(self._bits) - self.pos


# ------------------------------------------------------------------ coding steps

def ecdq_encode_step(v, dither, codebook, config, writer=None):
    """Quantize v + dither, emit the codeword, return (bits, w) with w = s - dither."""
    index = quantize(v + dither, config.delta)
    w = index * config.delta - dither
    bits = codebook.codeword(index, config.dither_bin(dither))
    if writer is not None:
        writer.write(bits)
    return bits, w


def ecdq_decode_step(reader, dither, codebook, config):
    """Read one codeword and reconstruct w exactly as the encoder did."""
    index = codebook.read_index(reader, config.dither_bin(dither))
    return index * config.delta - dither


def conditional_entropy_bits(indices, bins):
    """Plug-in estimate of H(index | bin) in bits."""
    indices = np.asarray(indices, dtype=np.int64)
    bins = np.asarray(bins, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("empty symbol log")
    n = indices.size
    h = 0.0
    for b in np.unique(bins):
        sel = indices[bins == b]
        _, counts = np.unique(sel, return_counts=True)
        p = counts / sel.size
        h += sel.size / n * float(-(p * np.log2(p)).sum())
    return max(h, 0.0)


def expected_length(codebook, b, histogram):
    """Average codeword length (bits) for {index: count} in bin b."""
    total = sum(histogram.values())
    return sum(c * len(codebook.codeword(i, b)) for i, c in histogram.items()) / total


def entropy_bits(histogram):
    c = np.array(list(histogram.values()), dtype=float)
    p = c / c.sum()
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum()) if p.size else 0.0


def uniform_cdf(x, delta):
    return np.clip(np.asarray(x) / delta + 0.5, 0.0, 1.0)


def max_escape_fraction(codebook, indices, bins):
    """Fraction of samples that would be escape-coded."""
    indices = np.asarray(indices)
    bins = np.asarray(bins)
    esc = sum(1 for i, b in zip(indices.tolist(), bins.tolist()) if i not in codebook.tables[b])
    return esc / max(len(indices), 1)


__all__ = ["EcdqConfig", "CodeBook", "BitWriter", "BitReader", "CorruptStreamError", "quantize",
           "dither_stream", "dither_block", "dither_bin", "huffman_lengths", "canonical_code",
           "train_codebooks", "ecdq_encode_step", "ecdq_decode_step", "conditional_entropy_bits",
           "expected_length", "entropy_bits", "max_escape_fraction", "PAYLOAD_BITS", "ESCAPE"]
