"""Corpus ingestion, vocabulary, batching, and a synthetic corpus generator.

Corpus files are UTF-8 JSON-lines with fields `token` (array of strings)
and `label` (array of strings).  The generator builds a complete-tree
taxonomy whose documents are bags of per-label signature tokens, giving a
desk-scale corpus that is separable by construction yet supports label
imbalance through power-law leaf sampling.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .taxonomy import Taxonomy, parse_taxonomy, ROOT_TOKEN

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class DataError(ValueError):
    """Malformed corpus record or invalid batching input."""


class ConfigError(ValueError):
    """Invalid generator configuration."""


def derived_rng(seed: int, *keys) -> np.random.Generator:
    """Deterministic sub-stream of a master seed, keyed by ints or strings."""
    entropy = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class Document:
    tokens: tuple[int, ...]
    labels: frozenset[int]


@dataclass
class Vocabulary:
    """Token -> dense id map with PAD=0 and UNK=1 reserved."""

    token_to_id: dict[str, int]

    def __len__(self):
        return len(self.token_to_id)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def to_json(self) -> dict:
        return dict(self.token_to_id)

    @classmethod
    def from_json(cls, mapping: dict) -> "Vocabulary":
        return cls(token_to_id={str(k): int(v) for k, v in mapping.items()})


def build_vocab(docs, min_freq: int = 1) -> Vocabulary:
    """Count tokens over raw documents (lists of token strings) and keep
    those with frequency >= min_freq, ids in descending-frequency order
    (ties broken lexicographically) after PAD and UNK."""
    if min_freq < 1:
        raise DataError("min_freq must be >= 1")
    counts: dict[str, int] = {}
    for tokens in docs:
        for tok in tokens:
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted((t for t, c in counts.items() if c >= min_freq),
                  key=lambda t: (-counts[t], t))
    mapping = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
    for tok in kept:
        mapping[tok] = len(mapping)
    return Vocabulary(mapping)


def read_raw_corpus(path):
    """Yield (line_number, record) for each JSON-lines document."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataError(f"{path}:{lineno}: malformed JSON ({err.msg})") from None
            yield lineno, record


def build_vocab_from_file(path, min_freq: int = 1) -> Vocabulary:
    return build_vocab((rec.get("token", []) for _, rec in read_raw_corpus(path)), min_freq)


def load_corpus(path, vocab: Vocabulary, tax: Taxonomy) -> list[Document]:
    """Map a JSON-lines corpus into documents of token ids and label ids.

    Unknown tokens become UNK; unknown or root label names are data errors
    reported with the offending line number.
    """
    docs = []
    name_to_id = {name: i for i, name in enumerate(tax.labels)}
    for lineno, record in read_raw_corpus(path):
        tokens = record.get("token")
        label_names = record.get("label")
        if not tokens:
            raise DataError(f"{path}:{lineno}: document has no tokens")
        if not label_names:
            raise DataError(f"{path}:{lineno}: document has an empty label list")
        label_ids = set()
        for name in label_names:
            if name not in name_to_id:
                raise DataError(f"{path}:{lineno}: unknown label name {name!r}")
            if name_to_id[name] == tax.root:
                raise DataError(f"{path}:{lineno}: the root is not a valid document label")
            label_ids.add(name_to_id[name])
        docs.append(Document(tokens=tuple(vocab.lookup(t) for t in tokens),
                             labels=frozenset(label_ids)))
    return docs


@dataclass
class Batch:
    """Padded token ids, validity mask, and multi-hot targets for B docs."""

    token_ids: np.ndarray  # int64 [B, S]
    mask: np.ndarray       # float64 0/1 [B, S]
    targets: np.ndarray    # float64 0/1 [B, N] over non-root labels

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]


def make_batches(docs: list[Document], batch_size: int, max_len: int,
                 tax: Taxonomy, shuffle_seed: int | None = None,
                 drop_partial: bool = False) -> list[Batch]:
    """Truncate to max_len, pad per batch, and build multi-hot targets.

    Shuffling is a pure function of the seed.  The final partial batch is
    dropped only when `drop_partial` is set (required while the mutual
    information loss is active, which pairs each document with another in
    the same batch).
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    if drop_partial and batch_size < 2:
        raise DataError("negative sampling requires batch size >= 2")
    if max_len < 1:
        raise DataError("max_len must be >= 1")
    target_col = tax.target_index()
    order = list(range(len(docs)))
    if shuffle_seed is not None:
        order = list(derived_rng(shuffle_seed, "batch-shuffle").permutation(len(docs)))

    batches = []
    for start in range(0, len(docs), batch_size):
        chunk = [docs[i] for i in order[start:start + batch_size]]
        if drop_partial and len(chunk) < batch_size:
            break
        token_rows = []
        for doc in chunk:
            kept = list(doc.tokens[:max_len])
            if not kept:
                raise DataError("document with zero surviving tokens after truncation")
            token_rows.append(kept)
        width = max(len(r) for r in token_rows)
        ids = np.full((len(chunk), width), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(chunk), width))
        targets = np.zeros((len(chunk), tax.num_labels))
        for row, (doc, kept) in enumerate(zip(chunk, token_rows)):
            ids[row, :len(kept)] = kept
            mask[row, :len(kept)] = 1.0
            if not doc.labels:
                raise DataError("document with an empty label set")
            for label_id in doc.labels:
                targets[row, target_col[label_id]] = 1.0
        batches.append(Batch(token_ids=ids, mask=mask, targets=targets))
    return batches


# -- synthetic corpus ---------------------------------------------------------


@dataclass
class GeneratorConfig:
    """Complete-tree synthetic corpus settings.

    Each label owns `vocab_per_label` signature tokens.  A document picks a
    leaf (power-law weighted by `imbalance_exponent`), takes the whole
    root-to-leaf path as its labels, and draws `doc_len` tokens from the
    path labels' signatures, replacing each with a uniformly random
    signature token with probability `noise_rate`.
    """

    depth: int = 3
    branching: int = 3
    vocab_per_label: int = 20
    docs_per_label: int = 185
    doc_len: int = 24
    imbalance_exponent: float = 0.0
    noise_rate: float = 0.1
    val_docs_per_label: int | None = None
    test_docs_per_label: int | None = None

    def validate(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.branching < 2:
            raise ConfigError("branching must be >= 2")
        if self.vocab_per_label < 1 or self.docs_per_label < 1 or self.doc_len < 1:
            raise ConfigError("vocab_per_label, docs_per_label, and doc_len must be >= 1")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError("noise_rate must lie in [0, 1]")
        if self.imbalance_exponent < 0.0:
            raise ConfigError("imbalance_exponent must be >= 0")

    def resolved_val_docs(self) -> int:
        return self.val_docs_per_label if self.val_docs_per_label is not None else max(1, self.docs_per_label // 5)

    def resolved_test_docs(self) -> int:
        return self.test_docs_per_label if self.test_docs_per_label is not None else max(1, self.docs_per_label // 5)


def _complete_tree_lines(depth: int, branching: int) -> tuple[str, list[str]]:
    """Taxonomy text for a complete tree plus the leaf names."""
    lines = []
    frontier = [ROOT_TOKEN]
    for _ in range(depth):
        next_frontier = []
        for parent in frontier:
            kids = [f"n{b}" if parent == ROOT_TOKEN else f"{parent}.{b}"
                    for b in range(branching)]
            lines.append("\t".join([parent] + kids))
            next_frontier.extend(kids)
        frontier = next_frontier
    return "\n".join(lines) + "\n", frontier


def _leaf_weights(n_leaves: int, exponent: float) -> np.ndarray:
    weights = (np.arange(1, n_leaves + 1, dtype=np.float64)) ** (-exponent)
    return weights / weights.sum()


def _signature_tokens(label: str, vocab_per_label: int) -> list[str]:
    return [f"{label}#w{k}" for k in range(vocab_per_label)]


def _sample_split(tax: Taxonomy, config: GeneratorConfig, rng: np.random.Generator,
                  n_docs: int) -> list[dict]:
    leaves = tax.leaves()
    weights = _leaf_weights(len(leaves), config.imbalance_exponent)
    all_tokens = []
    sig = {}
    for label_id in tax.nonroot_ids():
        sig[label_id] = _signature_tokens(tax.labels[label_id], config.vocab_per_label)
        all_tokens.extend(sig[label_id])

    records = []
    for _ in range(n_docs):
        leaf = leaves[rng.choice(len(leaves), p=weights)]
        path = tax.path_to_root(leaf)
        tokens = []
        for _ in range(config.doc_len):
            if rng.random() < config.noise_rate:
                tokens.append(all_tokens[rng.integers(len(all_tokens))])
            else:
                label_id = path[rng.integers(len(path))]
                vocab = sig[label_id]
                tokens.append(vocab[rng.integers(len(vocab))])
        records.append({"token": tokens, "label": [tax.labels[i] for i in sorted(path)]})
    return records


def generate_synthetic(config: GeneratorConfig, seed: int, out_dir) -> dict:
    """Write taxonomy.txt, {train,val,test}.jsonl, and manifest.json.

    Bit-reproducible for a fixed (config, seed); returns the manifest.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    tax_text, leaf_names = _complete_tree_lines(config.depth, config.branching)
    tax = parse_taxonomy(tax_text)
    n_leaves = len(leaf_names)

    splits = {
        "train": config.docs_per_label * n_leaves,
        "val": config.resolved_val_docs() * n_leaves,
        "test": config.resolved_test_docs() * n_leaves,
    }

    (out / "taxonomy.txt").write_text(tax_text, encoding="utf-8")
    paths = {"taxonomy": str(out / "taxonomy.txt")}
    for split, n_docs in splits.items():
        rng = derived_rng(seed, "synthetic", split)
        records = _sample_split(tax, config, rng, n_docs)
        path = out / f"{split}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        paths[split] = str(path)

    manifest = {
        "config": asdict(config),
        "seed": seed,
        "splits": {k: int(v) for k, v in splits.items()},
        "label_count": tax.num_labels,
        "node_count": tax.num_nodes,
        "depth": tax.depth,
        "avg_labels_per_doc": float(config.depth),
        "files": {k: file_sha256(v) for k, v in paths.items()},
        "paths": paths,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()
