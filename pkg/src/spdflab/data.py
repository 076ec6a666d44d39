"""Byte-level BPE tokenizer, fixed-length sequence packing, and
prompt/target formatting for fine-tuning.

Vocabulary layout: ids 0..255 are raw bytes, 256 is end-of-text, 257 is pad,
merged tokens start at 258; the special ids sit outside the merge range.
Requested sizes of 257/258 yield no merges, so encoding is raw bytes.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError

N_BYTES = 256
EOT_ID = 256
PAD_ID = 257
FIRST_MERGE_ID = 258

PACK_MAGIC = b"SPDFTOKS"


class Vocabulary:
    """Byte-level vocabulary with an ordered list of BPE merge rules."""

    def __init__(self, merges: list[tuple[int, int]] | None = None):
        self.merges = [tuple(m) for m in (merges or [])]
        self._token_bytes = [bytes([i]) for i in range(N_BYTES)] + [b"", b""]
        for a, b in self.merges:
            if a >= len(self._token_bytes) or b >= len(self._token_bytes):
                raise ConfigError(f"merge ({a},{b}) references unknown token")
            self._token_bytes.append(self._token_bytes[a] + self._token_bytes[b])

    @property
    def size(self) -> int:
        return FIRST_MERGE_ID + len(self.merges)

    @property
    def eot_id(self) -> int:
        return EOT_ID

    @property
    def pad_id(self) -> int:
        return PAD_ID

    # ------------------------------------------------------------ encoding

    def encode_bytes(self, data: bytes) -> np.ndarray:
        ids = np.frombuffer(data, dtype=np.uint8).astype(np.int32)
        for rank, (a, b) in enumerate(self.merges):
            ids = _merge_pair(ids, a, b, FIRST_MERGE_ID + rank)
        return ids

    def encode(self, text: str) -> np.ndarray:
        return self.encode_bytes(text.encode("utf-8"))

    def decode_bytes(self, ids) -> bytes:
        table = self._token_bytes
        ids = [int(i) for i in ids]
        if any(i < 0 or i >= len(table) for i in ids):
            raise InputError(f"token id outside [0, {len(table)})")
        return b"".join(table[i] for i in ids)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    # --------------------------------------------------------- persistence

    def to_dict(self) -> dict:
        return {"format_version": 1, "size": self.size, "merges": [list(m) for m in self.merges]}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls([tuple(m) for m in d["merges"]])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def content_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        ).hexdigest()[:16]


def _merge_pair(ids: np.ndarray, a: int, b: int, new_id: int) -> np.ndarray:
    """Replace every non-overlapping (left-greedy) occurrence of the pair
    (a, b) in ids with new_id."""
    if ids.size < 2:
        return ids
    hits = np.nonzero((ids[:-1] == a) & (ids[1:] == b))[0]
    if hits.size == 0:
        return ids
    keep = []
    last = -2
    for i in hits:  # drop overlapping matches, e.g. "aaa" with pair (a, a)
        if i > last + 1:
            keep.append(i)
            last = i
    keep = np.asarray(keep)
    ids = ids.copy()
    ids[keep] = new_id
    return np.delete(ids, keep + 1)


def train_bpe(corpus, vocab_size: int, sample_bytes: int = 1 << 20) -> Vocabulary:
    """Learn BPE merges by greedy pair frequency; ties break toward the
    lexicographically smallest pair. ``corpus`` is a string or an iterable of
    document strings; at most ``sample_bytes`` bytes are used for counting.
    """
    if vocab_size < 257:
        raise ConfigError(f"vocab_size must be >= 257, got {vocab_size}")
    if isinstance(corpus, str):
        corpus = [corpus]
    data = bytearray()
    for doc in corpus:
        data.extend(doc.encode("utf-8"))
        if len(data) >= sample_bytes:
            break
    if not data:
        raise InputError("empty corpus")
    ids = np.frombuffer(bytes(data[:sample_bytes]), dtype=np.uint8).astype(np.int32)

    n_merges = max(0, vocab_size - FIRST_MERGE_ID)
    merges: list[tuple[int, int]] = []
    next_id = FIRST_MERGE_ID
    for _ in range(n_merges):
        if ids.size < 2:
            break
        keys = ids[:-1].astype(np.int64) * (next_id + 1) + ids[1:]
        uniq, counts = np.unique(keys, return_counts=True)
        best_count = counts.max()
        if best_count < 2:
            break
        cand = np.sort(uniq[counts == best_count])[0]  # lexicographic tie-break
        a, b = int(cand // (next_id + 1)), int(cand % (next_id + 1))
        merges.append((a, b))
        ids = _merge_pair(ids, a, b, next_id)
        next_id += 1
    return Vocabulary(merges)


# ------------------------------------------------------------------ packing


@dataclass
class PackedDataset:
    """Token stream chunked into rows of exactly seq_len tokens."""

    tokens: np.ndarray  # (n_sequences, seq_len) int32
    seq_len: int
    vocab_hash: str = ""

    @property
    def n_sequences(self) -> int:
        return self.tokens.shape[0]

    @property
    def total_tokens(self) -> int:
        return int(self.tokens.size)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "format_version": 1,
            "seq_len": self.seq_len,
            "n_sequences": self.n_sequences,
            "vocab_hash": self.vocab_hash,
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(PACK_MAGIC)
            f.write(np.uint32(len(blob)).tobytes())
            f.write(blob)
            f.write(np.ascontiguousarray(self.tokens, dtype="<u4").tobytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PackedDataset":
        with open(path, "rb") as f:
            if f.read(8) != PACK_MAGIC:
                raise ConfigError(f"{path} is not a packed dataset")
            (hlen,) = np.frombuffer(f.read(4), dtype="<u4")
            header = json.loads(f.read(int(hlen)).decode("utf-8"))
            n, t = header["n_sequences"], header["seq_len"]
            tokens = np.frombuffer(f.read(4 * n * t), dtype="<u4").astype(np.int32)
        return cls(tokens=tokens.reshape(n, t), seq_len=t, vocab_hash=header["vocab_hash"])


def pack(vocab: Vocabulary, documents, seq_len: int) -> PackedDataset:
    """Concatenate encode(doc) + EOT over all documents and split the stream
    into floor(total/seq_len) chunks; the tail remainder is dropped."""
    if seq_len < 2:
        raise ConfigError("seq_len must be >= 2")
    pieces = []
    for doc in documents:
        pieces.append(vocab.encode(doc))
        pieces.append(np.array([vocab.eot_id], dtype=np.int32))
    stream = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.int32)
    n_chunks = stream.size // seq_len
    tokens = stream[: n_chunks * seq_len].reshape(n_chunks, seq_len)
    return PackedDataset(tokens=tokens.copy(), seq_len=seq_len, vocab_hash=vocab.content_hash())


# --------------------------------------------------- fine-tuning formatting

PROMPT_FIELD_SEP = " | "
PROMPT_KV_SEP = " : "
PROMPT_END = " ||"


@dataclass
class PromptTarget:
    """Tokenized (prompt, target) pair; loss covers target tokens plus the
    end-of-text that terminates them, never the prompt."""

    prompt_ids: np.ndarray
    target_ids: np.ndarray
    eot_id: int

    def sequence(self) -> np.ndarray:
        return np.concatenate(
            [self.prompt_ids, self.target_ids, np.array([self.eot_id], dtype=np.int32)]
        )

    def loss_mask(self) -> np.ndarray:
        """Boolean mask over next-token prediction positions of sequence()."""
        n_prompt, n_target = len(self.prompt_ids), len(self.target_ids)
        mask = np.zeros(n_prompt + n_target, dtype=bool)  # seq len - 1 positions
        mask[n_prompt - 1 :] = True
        return mask


def linearize_fields(fields: dict) -> str:
    return PROMPT_FIELD_SEP.join(f"{k}{PROMPT_KV_SEP}{v}" for k, v in fields.items()) + PROMPT_END


def parse_linearization(prompt: str) -> dict:
    body = prompt.removesuffix(PROMPT_END)
    out = {}
    for part in body.split(PROMPT_FIELD_SEP):
        k, _, v = part.partition(PROMPT_KV_SEP)
        out[k] = v
    return out


def make_finetune_examples(records, vocab: Vocabulary) -> list[PromptTarget]:
    """records are dicts {"fields": {...}, "reference": str}; field order is
    preserved in the prompt. Records with an empty reference are skipped with
    a warning."""
    out = []
    for i, rec in enumerate(records):
        fields = rec["fields"]
        if not fields or any(v == "" for v in fields.values()):
            raise InputError(f"record {i} has empty fields")
        reference = rec["reference"]
        if not reference:
            warnings.warn(f"record {i} has an empty reference; skipped", stacklevel=2)
            continue
        prompt_ids = vocab.encode(linearize_fields(fields))
        target_ids = vocab.encode(" " + reference)
        out.append(PromptTarget(prompt_ids, target_ids, vocab.eot_id))
    return out


def make_summarization_examples(records, vocab: Vocabulary) -> list[PromptTarget]:
    """records are dicts {"document": str, "summary": str}; the prompt is the
    document followed by the same separator the data-to-text format uses."""
    out = []
    for i, rec in enumerate(records):
        if not rec["document"]:
            raise InputError(f"record {i} has an empty document")
        if not rec["summary"]:
            warnings.warn(f"record {i} has an empty summary; skipped", stacklevel=2)
            continue
        prompt_ids = vocab.encode(rec["document"] + PROMPT_END)
        target_ids = vocab.encode(" " + rec["summary"])
        out.append(PromptTarget(prompt_ids, target_ids, vocab.eot_id))
    return out
