"""Streaming access to UCI bag-of-words corpora.

A ``docword`` file is three header lines (D, W, NNZ) followed by NNZ lines
``docID wordID count`` with 1-based ids, grouped by non-decreasing docID.
The companion ``vocab`` file has one token per line, line i naming word i.

Passes never hold more than one read block plus the largest single document.
"""
from dataclasses import dataclass, field
import hashlib
import os
import struct
import warnings

import numpy as np

from safespca.errors import FormatError

BLOCK_BYTES = 1 << 22

TRIPLE_CACHE_MAGIC = b"SPCATRIP"
TRIPLE_CACHE_VERSION = 1
# magic, version, D, W, NNZ, blake2b-256 digest of the source docword file
_TRIPLE_HEADER = struct.Struct("<8sIQQQ32s")
_TRIPLE_DTYPE = np.dtype("<i4")


@dataclass
class Chunk:
    """A run of complete documents from one pass.

    ``doc_index`` numbers the distinct documents of the chunk from 0, so it
    can serve directly as a sparse row index.
    """

    doc_ids: np.ndarray
    word_ids: np.ndarray
    counts: np.ndarray
    doc_index: np.ndarray
    num_docs: int

    @property
    def nnz(self):
        return self.word_ids.size


@dataclass
class PassSummary:
    docs_seen: int = 0
    triples: int = 0


def _make_chunk(docs, words, counts):
    if docs.size == 0:
        return Chunk(docs, words, counts, docs, 0)
    new_doc = np.empty(docs.size, dtype=bool)
    new_doc[0] = True
    np.not_equal(docs[1:], docs[:-1], out=new_doc[1:])
    index = np.cumsum(new_doc) - 1
    return Chunk(docs, words, counts, index, int(index[-1]) + 1)


def content_hash(path, block=1 << 24):
    h = hashlib.blake2b(digest_size=32)
    with open(path, "rb") as fh:
        while True:
            buf = fh.read(block)
            if not buf:
                break
            h.update(buf)
    return h.hexdigest()


@dataclass
class BagOfWordsCorpus:
    """Handle on a disk-resident docword file (nothing is loaded eagerly)."""

    path: str
    num_docs: int
    num_words: int
    nnz: int
    data_offset: int
    binary_path: str = None
    _hash: str = field(default=None, repr=False)

    @property
    def hash(self):
        if self._hash is None:
            self._hash = content_hash(self.path)
        return self._hash

    # -- passes ------------------------------------------------------------

    def iter_chunks(self, start=None, end=None, block_bytes=BLOCK_BYTES):
        """Yield :class:`Chunk` objects covering byte range [start, end).

        Ranges must begin on a document boundary (see :meth:`shards`); with
        the default full range the triple count is checked against the header.
        """
        if self.binary_path is not None:
            yield from self._iter_binary(start, end, block_bytes)
        else:
            yield from self._iter_text(start, end, block_bytes)

    def _iter_text(self, start, end, block_bytes):
        full = start is None and end is None
        start = self.data_offset if start is None else start
        size = os.path.getsize(self.path)
        end = size if end is None else end
        # line numbers are only known for passes starting at the data section
        line = 4 if start == self.data_offset else None
        total = 0
        last_doc = 0
        carry = None
        with open(self.path, "rb") as fh:
            fh.seek(start)
            pos = start
            tail = b""
            while pos < end or tail:
                buf = fh.read(min(block_bytes, end - pos)) if pos < end else b""
                pos += len(buf)
                buf = tail + buf
                if pos < end:
                    cut = buf.rfind(b"\n") + 1
                    if cut == 0:
                        tail = buf
                        continue
                    buf, tail = buf[:cut], buf[cut:]
                else:
                    tail = b""
                if not buf:
                    break
                arr, nlines = self._parse_block(buf, line, start)
                docs, words, counts = arr[:, 0], arr[:, 1], arr[:, 2]
                self._validate(docs, words, counts, buf, line, start, last_doc)
                if line is not None:
                    line += nlines
                total += docs.size
                if docs.size == 0:
                    continue
                last_doc = int(docs[-1])
                if carry is not None:
                    docs = np.concatenate([carry[0], docs])
                    words = np.concatenate([carry[1], words])
                    counts = np.concatenate([carry[2], counts])
                # hold back the trailing document: it may continue in the next block
                split = int(np.searchsorted(docs, docs[-1], side="left"))
                carry = (docs[split:], words[split:], counts[split:])
                if split:
                    yield _make_chunk(docs[:split], words[:split], counts[:split])
        if carry is not None and carry[0].size:
            yield _make_chunk(*carry)
        if full:
            check_triple_total(self, total)

    def _parse_block(self, buf, line, start):
        if not buf.endswith(b"\n"):
            buf = buf + b"\n"
        raw = np.frombuffer(buf, dtype=np.uint8)
        ws = (raw == 32) | (raw == 9) | (raw == 10) | (raw == 13)
        starts = ~ws
        starts[1:] &= ws[:-1]
        newlines = np.flatnonzero(raw == 10)
        seg = np.concatenate([[0], newlines[:-1] + 1])
        per_line = np.add.reduceat(starts, seg, dtype=np.int32)
        bad = np.flatnonzero((per_line != 3) & (per_line != 0))
        if bad.size:
            self._raise_at(buf, int(bad[0]), line, start,
                           f"expected 'docID wordID count', found {per_line[bad[0]]} fields")
        ntok = int(per_line.sum())
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            try:
                flat = np.fromstring(buf, dtype=np.int64, sep=" ")
            except (ValueError, DeprecationWarning):
                flat = None
        if flat is None or flat.size != ntok:
            self._locate_bad_token(buf, line, start)
        return flat.reshape(-1, 3), newlines.size

    def _locate_bad_token(self, buf, line, start):
        for i, text in enumerate(buf.split(b"\n")):
            for tok in text.split():
                try:
                    int(tok)
                except ValueError:
                    self._raise_at(buf, i, line, start, f"non-integer field {tok.decode(errors='replace')!r}")
        raise FormatError("unparseable record block", self.path, line)

    def _raise_at(self, buf, idx, line, start, message):
        if line is None:
            # slow path: count lines before this shard
            with open(self.path, "rb") as fh:
                line = fh.read(start).count(b"\n") + 1
        raise FormatError(message, self.path, line + idx)

    def _validate(self, docs, words, counts, buf, line, start, last_doc):
        if docs.size == 0:
            return
        record_lines = None

        def where(mask):
            nonlocal record_lines
            k = int(np.flatnonzero(mask)[0])
            if record_lines is None:
                lines = buf.split(b"\n")
                record_lines = [i for i, t in enumerate(lines) if t.strip()]
            return record_lines[k]

        checks = (
            ((docs < 1) | (docs > self.num_docs), f"docID out of range [1, {self.num_docs}]"),
            ((words < 1) | (words > self.num_words), f"wordID out of range [1, {self.num_words}]"),
            (counts < 1, "count must be >= 1"),
        )
        for mask, msg in checks:
            if mask.any():
                self._raise_at(buf, where(mask), line, start, msg)
        prev = np.concatenate([[last_doc], docs[:-1]])
        dec = docs < prev
        if dec.any():
            self._raise_at(buf, where(dec), line, start, "docIDs must be non-decreasing")

    def _iter_binary(self, start, end, block_bytes):
        full = start is None and end is None
        header = _TRIPLE_HEADER.size
        rec = 3 * _TRIPLE_DTYPE.itemsize
        start = header if start is None else start
        end = header + self.nnz * rec if end is None else end
        step = max(1, block_bytes // rec)
        mm = np.memmap(self.binary_path, dtype=_TRIPLE_DTYPE, mode="r", offset=header,
                       shape=(self.nnz, 3))
        lo, hi = (start - header) // rec, (end - header) // rec
        total = 0
        carry = None
        i = lo
        while i < hi:
            block = np.array(mm[i:min(hi, i + step)], dtype=np.int64)
            i += block.shape[0]
            total += block.shape[0]
            docs, words, counts = block[:, 0], block[:, 1], block[:, 2]
            if carry is not None:
                docs = np.concatenate([carry[0], docs])
                words = np.concatenate([carry[1], words])
                counts = np.concatenate([carry[2], counts])
            split = int(np.searchsorted(docs, docs[-1], side="left"))
            carry = (docs[split:], words[split:], counts[split:])
            if split:
                yield _make_chunk(docs[:split], words[:split], counts[:split])
        if carry is not None and carry[0].size:
            yield _make_chunk(*carry)
        del mm
        if full:
            check_triple_total(self, total)

    def shards(self, k):
        """Split the data section into at most ``k`` byte ranges on docID boundaries."""
        if k <= 1:
            return [(None, None)]
        if self.binary_path is not None:
            return self._binary_shards(k)
        size = os.path.getsize(self.path)
        bounds = [self.data_offset]
        with open(self.path, "rb") as fh:
            for i in range(1, k):
                target = self.data_offset + (size - self.data_offset) * i // k
                if target <= bounds[-1]:
                    continue
                fh.seek(target - 1)
                fh.readline()  # finish the line containing target-1
                pos = fh.tell()
                prev = self._doc_before(fh, pos)
                while True:
                    ln = fh.readline()
                    if not ln:
                        pos = size
                        break
                    parts = ln.split()
                    if parts and int(parts[0]) != prev:
                        break
                    pos += len(ln)
                if bounds[-1] < pos < size:
                    bounds.append(pos)
        bounds.append(size)
        return list(zip(bounds[:-1], bounds[1:]))

    def _doc_before(self, fh, pos):
        back = max(self.data_offset, pos - 256)
        here = fh.tell()
        fh.seek(back)
        text = fh.read(pos - back)
        fh.seek(here)
        lines = [ln for ln in text.split(b"\n") if ln.strip()]
        if pos == self.data_offset or not lines:
            return None
        return int(lines[-1].split()[0])

    def _binary_shards(self, k):
        header = _TRIPLE_HEADER.size
        rec = 3 * _TRIPLE_DTYPE.itemsize
        mm = np.memmap(self.binary_path, dtype=_TRIPLE_DTYPE, mode="r", offset=header,
                       shape=(self.nnz, 3))
        docs = mm[:, 0]
        cuts = [0]
        for i in range(1, k):
            t = self.nnz * i // k
            if t <= cuts[-1]:
                continue
            t = int(np.searchsorted(docs, docs[t], side="left"))
            if cuts[-1] < t < self.nnz:
                cuts.append(t)
        cuts.append(self.nnz)
        del mm
        return [(header + a * rec, header + b * rec) for a, b in zip(cuts[:-1], cuts[1:])]

    # -- binary cache ----------------------------------------------------

    def iter_chunks_teeing(self, out_path):
        """Full text pass that also writes the binary triple cache as it goes.

        The cache file only appears (atomically) once the pass completes.
        """
        tmp = out_path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(_TRIPLE_HEADER.pack(TRIPLE_CACHE_MAGIC, TRIPLE_CACHE_VERSION, self.num_docs,
                                         self.num_words, self.nnz, bytes.fromhex(self.hash)))
            for chunk in self._iter_text(None, None, BLOCK_BYTES):
                np.stack([chunk.doc_ids, chunk.word_ids, chunk.counts], axis=1) \
                    .astype(_TRIPLE_DTYPE).tofile(fh)
                yield chunk
        os.replace(tmp, out_path)

    def write_triple_cache(self, out_path):
        for _ in self.iter_chunks_teeing(out_path):
            pass
        return out_path

    def attach_triple_cache(self, cache_path):
        """Route later passes through a binary cache if it matches this file."""
        try:
            with open(cache_path, "rb") as fh:
                head = fh.read(_TRIPLE_HEADER.size)
        except FileNotFoundError:
            return False
        if len(head) != _TRIPLE_HEADER.size:
            return False
        magic, version, D, W, nnz, digest = _TRIPLE_HEADER.unpack(head)
        if magic != TRIPLE_CACHE_MAGIC or version != TRIPLE_CACHE_VERSION:
            return False
        if (D, W, nnz) != (self.num_docs, self.num_words, self.nnz) or digest.hex() != self.hash:
            return False
        if os.path.getsize(cache_path) != _TRIPLE_HEADER.size + nnz * 3 * _TRIPLE_DTYPE.itemsize:
            return False
        self.binary_path = cache_path
        return True


def check_triple_total(corpus, total):
    if total != corpus.nnz:
        raise FormatError(f"header declares {corpus.nnz} triples but the body has {total}",
                          corpus.path)


def parse_docword(path):
    """Read and validate the header of a docword file."""
    header = []
    with open(path, "rb") as fh:
        for lineno in (1, 2, 3):
            ln = fh.readline()
            if not ln:
                raise FormatError("truncated header (need D, W and NNZ lines)", path, lineno)
            try:
                (val,) = ln.split()
                val = int(val)
            except ValueError:
                raise FormatError(f"header line must be one integer, got {ln.strip()!r}", path, lineno)
            if val < 1:
                raise FormatError("header values must be positive", path, lineno)
            header.append(val)
        offset = fh.tell()
        first = fh.readline()
    D, W, nnz = header
    corpus = BagOfWordsCorpus(str(path), D, W, nnz, offset)
    if not first.strip():
        raise FormatError("no data records after header", path, 4)
    # validate the first record eagerly
    corpus._validate(*np.array([_parse_record(first, path)]).T, first, 4, offset, 0)
    return corpus


def _parse_record(text, path, lineno=4):
    parts = text.split()
    try:
        if len(parts) != 3:
            raise ValueError
        return [int(p) for p in parts]
    except ValueError:
        raise FormatError(f"expected 'docID wordID count', got {text.strip()!r}", path, lineno)


def stream_documents(corpus, callback, start=None, end=None):
    """Call ``callback(doc_id, word_ids, counts)`` once per document, in file order."""
    summary = PassSummary()
    for chunk in corpus.iter_chunks(start, end):
        bounds = np.flatnonzero(np.diff(chunk.doc_index)) + 1
        edges = np.concatenate([[0], bounds, [chunk.nnz]])
        for a, b in zip(edges[:-1], edges[1:]):
            callback(int(chunk.doc_ids[a]), chunk.word_ids[a:b], chunk.counts[a:b])
        summary.docs_seen += chunk.num_docs
        summary.triples += chunk.nnz
    return summary


@dataclass
class Vocabulary:
    tokens: list

    def __len__(self):
        return len(self.tokens)

    def token(self, word_id):
        """Token for a 1-based word id."""
        if not 1 <= word_id <= len(self.tokens):
            raise KeyError(f"word id {word_id} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[word_id - 1]


def load_vocab(path, expected_W=None):
    with open(path, encoding="utf-8") as fh:
        tokens = fh.read().splitlines()
    while tokens and not tokens[-1].strip():
        tokens.pop()
    for i, tok in enumerate(tokens):
        if not tok.strip():
            raise FormatError("empty token", path, i + 1)
    if expected_W is not None and len(tokens) != expected_W:
        raise FormatError(f"vocabulary has {len(tokens)} tokens, corpus declares W={expected_W}",
                          path)
    return Vocabulary([t.strip() for t in tokens])


def write_docword(path, D, W, docs, words, counts):
    """Write triples (already sorted by doc) in UCI docword format."""
    with open(path, "w") as fh:
        fh.write(f"{D}\n{W}\n{len(docs)}\n")
        lines = np.stack([docs, words, counts], axis=1)
        np.savetxt(fh, lines, fmt="%d")


def write_planted_topic_corpus(docword_path, vocab_path, n_words=2000, n_docs=10_000,
                               n_topics=5, topic_size=5, activation=0.2,
                               amplitudes=None, background=6.0, seed=0):
    """Synthetic corpus with disjoint high-variance word groups.

    Background words get Poisson counts with Zipf-like rates up to
    ``background``. Topic t fires in a document with probability
    ``activation``; when it does, each of its words gets an extra
    Poisson(amplitude_t) count, which makes the group strongly correlated.
    Returns the planted groups as lists of 1-based word ids, strongest first.
    """
    rng = np.random.default_rng(seed)
    if amplitudes is None:
        amplitudes = np.linspace(8.0, 4.0, n_topics)
    planted = rng.choice(np.arange(1, n_words + 1), size=(n_topics, topic_size), replace=False)
    rates = background / np.arange(1, n_words + 1) ** 0.8
    rates = rates[rng.permutation(n_words)]
    counts = rng.poisson(rates, size=(n_docs, n_words))
    for t in range(n_topics):
        fire = rng.random(n_docs) < activation
        cols = planted[t] - 1
        counts[np.ix_(fire, cols)] += rng.poisson(amplitudes[t], size=(int(fire.sum()), topic_size))
    d, w = np.nonzero(counts)
    write_docword(docword_path, n_docs, n_words, d + 1, w + 1, counts[d, w])
    topic_of = {int(wid): (t, k) for t in range(n_topics) for k, wid in enumerate(planted[t])}
    with open(vocab_path, "w") as fh:
        for wid in range(1, n_words + 1):
            if wid in topic_of:
                t, k = topic_of[wid]
                fh.write(f"topic{t + 1}_word{k + 1}\n")
            else:
                fh.write(f"word{wid:05d}\n")
    return [sorted(int(x) for x in grp) for grp in planted]
