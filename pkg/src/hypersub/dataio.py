"""File formats and dataset assembly.

Text inputs are tab-separated with '#' comment lines; gene symbols are
case-sensitive and never normalized. Checkpoints pair a human-readable header
with raw little-endian float32 blocks and are written atomically.
"""

from __future__ import annotations

import io
import logging
import os
import tempfile
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import (CorruptCheckpoint, DuplicateSet, EmptySubgraph,
                     InputDataError, InvalidDepth, MalformedLine,
                     UnknownClass, UnknownConfigKey, UnsupportedVersion)
from .hypergraph import Hypergraph, build_hypergraph
from .model import HeadParams, LayerParams, ModelParams, SubgraphBatch
from .training import TrainConfig, config_field_types

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "hypersub-checkpoint"
CHECKPOINT_VERSION = 1


def _lines(source) -> Iterable[tuple[int, str]]:
    """Numbered lines of a text blob, os.PathLike path, or file-like object,
    with blank and '#' comment lines removed. Plain strings are always text;
    use pathlib.Path to read from disk."""
    if isinstance(source, os.PathLike):
        text = open(source, "r", encoding="utf-8").read()
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        yield no, line


# ----------------------------------------------------------------- gene sets

@dataclass
class GeneSetCatalog:
    """Named gene sets plus the node index assignment they induce.

    Genes are indexed in order of first appearance across sets; set member
    lists keep their file order (deduplicated).
    """

    names: list[str]
    descriptions: list[str]
    members: list[list[str]]
    gene_index: dict[str, int]

    @property
    def num_sets(self) -> int:
        return len(self.names)

    @property
    def num_genes(self) -> int:
        return len(self.gene_index)

    @property
    def genes(self) -> list[str]:
        return list(self.gene_index)

    def to_hypergraph(self, edge_weights=None) -> Hypergraph:
        lists = [[self.gene_index[g] for g in mem] for mem in self.members]
        return build_hypergraph(lists, edge_weights=edge_weights,
                                num_nodes=self.num_genes)


def parse_gmt(source) -> GeneSetCatalog:
    """Parse tab-separated gene sets: name, description, then one field per
    gene. Duplicate set names and lines with fewer than three fields fail."""
    names, descriptions, members = [], [], []
    seen: set[str] = set()
    gene_index: dict[str, int] = {}
    for no, line in _lines(source):
        parts = line.split("\t")
        if len(parts) < 3:
            raise MalformedLine(no, f"expected at least 3 tab-separated fields, got {len(parts)}")
        name, desc = parts[0], parts[1]
        if not name:
            raise MalformedLine(no, "empty set name")
        if name in seen:
            raise DuplicateSet(f"gene set {name!r} appears twice")
        seen.add(name)
        genes = []
        for g in parts[2:]:
            if g and g not in genes:
                genes.append(g)
        if not genes:
            raise MalformedLine(no, f"gene set {name!r} has no genes")
        for g in genes:
            if g not in gene_index:
                gene_index[g] = len(gene_index)
        names.append(name)
        descriptions.append(desc)
        members.append(genes)
    return GeneSetCatalog(names, descriptions, members, gene_index)


def serialize_gmt(catalog: GeneSetCatalog) -> str:
    out = io.StringIO()
    for name, desc, mem in zip(catalog.names, catalog.descriptions, catalog.members):
        out.write("\t".join([name, desc, *mem]) + "\n")
    return out.getvalue()


# ------------------------------------------------------------------ variants

@dataclass(frozen=True)
class VariantRecord:
    subject: str
    gene: str
    ref_depth: int
    alt_depth: int
    pass_filter: bool


def aggregate_variants(records: Iterable[VariantRecord],
                       subject: str) -> dict[str, float]:
    """Per-gene mutation rate for one subject.

    Rate = total alt depth / total (alt + ref) depth over the subject's
    passing variants of that gene. Genes whose total depth is zero are
    omitted. Insensitive to record order.
    """
    alt: dict[str, int] = {}
    ref: dict[str, int] = {}
    for r in records:
        if r.subject != subject or not r.pass_filter:
            continue
        if r.ref_depth < 0 or r.alt_depth < 0:
            raise InvalidDepth(f"negative read depth for {r.gene} of {r.subject}")
        alt[r.gene] = alt.get(r.gene, 0) + r.alt_depth
        ref[r.gene] = ref.get(r.gene, 0) + r.ref_depth
    rates = {}
    for gene, a in alt.items():
        total = a + ref[gene]
        if total > 0:
            rates[gene] = a / total
    return rates


# ----------------------------------------------------------------- subgraphs

@dataclass
class SubjectRecord:
    subject_id: str
    labels: list[str]
    genes: list[str]
    weights: list[float]


@dataclass
class SubgraphTable:
    subjects: list[SubjectRecord]
    class_vocab: list[str]
    dropped_genes: int = 0
    excluded_subjects: list[str] = field(default_factory=list)


def load_subgraphs(source, catalog: GeneSetCatalog,
                   class_vocab: Sequence[str] | None = None,
                   skip_empty: bool = False) -> SubgraphTable:
    """Parse subject subgraphs: subject id, comma-separated labels, then
    comma-separated gene[:weight] members (weight defaults to 1.0).

    Genes missing from the catalog are dropped with a warning count. A
    subject left with no members raises EmptySubgraph, or lands in
    ``excluded_subjects`` when ``skip_empty`` is set. With a declared
    ``class_vocab`` unknown labels fail; without one the vocabulary is
    collected from the file and sorted.
    """
    subjects: list[SubjectRecord] = []
    seen_ids: set[str] = set()
    seen_labels: set[str] = set()
    dropped = 0
    excluded: list[str] = []
    declared = set(class_vocab) if class_vocab is not None else None
    for no, line in _lines(source):
        parts = line.split("\t")
        if len(parts) != 3:
            raise MalformedLine(no, f"expected 3 tab-separated fields, got {len(parts)}")
        sid, label_field, member_field = parts
        if not sid:
            raise MalformedLine(no, "empty subject id")
        if sid in seen_ids:
            raise MalformedLine(no, f"subject {sid!r} appears twice")
        seen_ids.add(sid)

        labels = []
        if label_field and label_field != "-":
            for lab in label_field.split(","):
                lab = lab.strip()
                if not lab:
                    raise MalformedLine(no, "empty label")
                if declared is not None and lab not in declared:
                    raise UnknownClass(f"line {no}: label {lab!r} not in class vocabulary")
                if lab not in labels:
                    labels.append(lab)
                seen_labels.add(lab)

        genes, weights = [], []
        if not member_field:
            raise MalformedLine(no, "empty member list")
        for token in member_field.split(","):
            token = token.strip()
            if not token:
                raise MalformedLine(no, "empty member token")
            if ":" in token:
                gene, _, wtext = token.rpartition(":")
                try:
                    w = float(wtext)
                except ValueError:
                    raise MalformedLine(no, f"bad weight {wtext!r}") from None
                if not np.isfinite(w) or w < 0:
                    raise MalformedLine(no, f"member weight must be finite and >= 0, got {wtext}")
            else:
                gene, w = token, 1.0
            if not gene:
                raise MalformedLine(no, f"member token {token!r} has no gene symbol")
            if gene not in catalog.gene_index:
                dropped += 1
                continue
            if gene in genes:
                continue  # keep the first occurrence
            genes.append(gene)
            weights.append(w)

        if not genes:
            if skip_empty:
                excluded.append(sid)
                continue
            raise EmptySubgraph(f"line {no}: subject {sid!r} has no catalog genes")
        subjects.append(SubjectRecord(sid, labels, genes, weights))

    if dropped:
        logger.warning("dropped %d member entries not present in the catalog", dropped)
    vocab = list(class_vocab) if class_vocab is not None else sorted(seen_labels)
    return SubgraphTable(subjects=subjects, class_vocab=vocab,
                         dropped_genes=dropped, excluded_subjects=excluded)


# -------------------------------------------------------------------- splits

SPLIT_NAMES = ("train", "val", "test")


def load_split(source) -> dict[str, str]:
    """Parse subject-to-split assignments: subject id, then train/val/test."""
    assignment: dict[str, str] = {}
    for no, line in _lines(source):
        parts = line.split("\t")
        if len(parts) != 2:
            raise MalformedLine(no, f"expected 2 tab-separated fields, got {len(parts)}")
        sid, name = parts
        if name not in SPLIT_NAMES:
            raise MalformedLine(no, f"unknown split name {name!r}")
        if sid in assignment:
            raise MalformedLine(no, f"subject {sid!r} assigned twice")
        assignment[sid] = name
    return assignment


def serialize_split(assignment: dict[str, str]) -> str:
    return "".join(f"{sid}\t{name}\n" for sid, name in assignment.items())


def stratified_split(subjects: Sequence[str], label_keys: Sequence,
                     ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
                     seed: int = 0) -> dict[str, str]:
    """Assign subjects to train/val/test, preserving per-class proportions.

    Subjects sharing a label key are shuffled together and cut so the val and
    test shares round to the requested ratios (train takes the rest). A class
    with fewer than 3 subjects goes entirely to train, with a warning.
    """
    if len(subjects) != len(label_keys):
        raise ValueError("subjects and label_keys must align")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    if any(r < 0 for r in ratios):
        raise ValueError("split ratios must be non-negative")
    rng = np.random.default_rng(seed)
    by_key: dict = {}
    for sid, key in zip(subjects, label_keys):
        by_key.setdefault(key, []).append(sid)

    assignment: dict[str, str] = {}
    for key in sorted(by_key, key=repr):
        ids = by_key[key]
        if len(ids) < 3:
            logger.warning("class %r has %d subject(s); assigning all to train",
                           key, len(ids))
            for sid in ids:
                assignment[sid] = "train"
            continue
        order = rng.permutation(len(ids))
        n = len(ids)
        n_val = int(round(n * ratios[1]))
        n_test = int(round(n * ratios[2]))
        n_train = n - n_val - n_test
        if n_train < 1:  # degenerate ratios; keep at least one training subject
            spare = 1 - n_train
            take = min(spare, n_val)
            n_val -= take
            n_test -= spare - take
            n_train = 1
        for pos, k in enumerate(order):
            sid = ids[k]
            if pos < n_train:
                assignment[sid] = "train"
            elif pos < n_train + n_val:
                assignment[sid] = "val"
            else:
                assignment[sid] = "test"
    return assignment


# ------------------------------------------------------------------- dataset

@dataclass
class SubgraphDataset:
    """Subjects resolved against a catalog: member node indices, weights,
    dense labels, and a split assignment per subject."""

    subject_ids: list[str]
    members: list[np.ndarray]
    weights: list[np.ndarray]
    labels: np.ndarray
    class_vocab: list[str]
    split: list[str]

    def indices(self, split_name: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.split) if s == split_name],
                        dtype=np.intp)

    def batch(self, indices) -> SubgraphBatch:
        idx = np.asarray(indices, dtype=np.intp)
        return SubgraphBatch(
            members=[self.members[i] for i in idx],
            weights=[self.weights[i] for i in idx],
            labels=self.labels[idx],
            subject_ids=[self.subject_ids[i] for i in idx],
        )


def build_dataset(table: SubgraphTable, catalog: GeneSetCatalog,
                  assignment: dict[str, str]) -> SubgraphDataset:
    """Resolve a parsed table into arrays, attaching split assignments.

    Every subject must be assigned; labels become a dense 0/1 matrix over the
    table's class vocabulary.
    """
    vocab = table.class_vocab
    col = {c: i for i, c in enumerate(vocab)}
    ids, members, weights, split = [], [], [], []
    labels = np.zeros((len(table.subjects), len(vocab)), dtype=np.float64)
    for r, rec in enumerate(table.subjects):
        if rec.subject_id not in assignment:
            raise InputDataError(f"subject {rec.subject_id!r} has no split assignment")
        ids.append(rec.subject_id)
        members.append(np.array([catalog.gene_index[g] for g in rec.genes],
                                dtype=np.intp))
        weights.append(np.array(rec.weights, dtype=np.float64))
        for lab in rec.labels:
            labels[r, col[lab]] = 1.0
        split.append(assignment[rec.subject_id])
    return SubgraphDataset(ids, members, weights, labels, vocab, split)


# -------------------------------------------------------------------- config

def parse_config(source, base: TrainConfig | None = None) -> TrainConfig:
    """Flat key = value config. Unknown keys fail fast; values are coerced to
    the field's type. Missing keys keep the base (or default) value."""
    types = config_field_types()
    overrides = {}
    for no, line in _lines(source):
        if "=" not in line:
            raise MalformedLine(no, "expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in types:
            raise UnknownConfigKey(f"line {no}: unknown config key {key!r}")
        t = types[key]
        try:
            if t is bool:
                if value.lower() not in ("true", "false"):
                    raise ValueError
                overrides[key] = value.lower() == "true"
            else:
                overrides[key] = t(value)
        except ValueError:
            raise MalformedLine(no, f"cannot parse {value!r} as {t.__name__} for {key!r}") from None
    config = replace(base or TrainConfig(), **overrides)
    config.validate()
    return config


def serialize_config(config: TrainConfig) -> str:
    out = []
    for f in fields(TrainConfig):
        v = getattr(config, f.name)
        out.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}\n")
    return "".join(out)


# --------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    """A trained model plus everything needed to run it on new files: the
    training config, gene dictionary, class vocabulary, and hypergraph."""

    params: ModelParams
    config: TrainConfig
    gene_names: list[str]
    class_vocab: list[str]
    edge_names: list[str]
    hypergraph: Hypergraph


def _header_lines(ckpt: Checkpoint) -> list[str]:
    h = ckpt.hypergraph
    lines = [CHECKPOINT_MAGIC,
             f"version: {CHECKPOINT_VERSION}",
             "endian: little",
             "dtype: float32",
             "[config]"]
    lines += [l for l in serialize_config(ckpt.config).splitlines()]
    lines.append("[classes]")
    lines += ckpt.class_vocab
    lines.append("[genes]")
    lines += ckpt.gene_names
    lines.append("[edges]")
    for name, w, mem in zip(ckpt.edge_names, h.edge_weights, h.edge_members):
        lines.append(f"{name}\t{float(w)!r}\t{','.join(map(str, mem))}")
    lines.append("[tensors]")
    for name, t in ckpt.params.named_parameters():
        lines.append(f"{name}\t{','.join(map(str, t.data.shape))}")
    lines.append("[payload]")
    return lines


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write header plus raw little-endian float32 tensor blocks, atomically:
    the file appears under its final name only once complete."""
    head = "\n".join(_header_lines(ckpt)) + "\n"
    blob = io.BytesIO()
    blob.write(head.encode("utf-8"))
    for _, t in ckpt.params.named_parameters():
        blob.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    payload = blob.getvalue()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _take_section(lines: list[str], pos: int, tag: str) -> tuple[list[str], int]:
    if pos >= len(lines) or lines[pos] != tag:
        raise CorruptCheckpoint(f"expected section {tag}")
    pos += 1
    out = []
    while pos < len(lines) and not lines[pos].startswith("["):
        out.append(lines[pos])
        pos += 1
    return out, pos


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint; every structural inconsistency raises
    CorruptCheckpoint, a version mismatch raises UnsupportedVersion."""
    raw = open(path, "rb").read()
    marker = b"\n[payload]\n"
    cut = raw.find(marker)
    if cut < 0:
        raise CorruptCheckpoint("missing payload marker")
    try:
        head = raw[:cut].decode("utf-8")
    except UnicodeDecodeError as e:
        raise CorruptCheckpoint("undecodable header") from e
    payload = raw[cut + len(marker):]
    lines = head.splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("bad magic")
    if len(lines) < 4 or not lines[1].startswith("version: "):
        raise CorruptCheckpoint("missing version")
    try:
        version = int(lines[1].split(": ", 1)[1])
    except ValueError as e:
        raise CorruptCheckpoint("unreadable version") from e
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersion(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if lines[2] != "endian: little" or lines[3] != "dtype: float32":
        raise CorruptCheckpoint("unexpected storage declaration")

    pos = 4
    config_lines, pos = _take_section(lines, pos, "[config]")
    class_vocab, pos = _take_section(lines, pos, "[classes]")
    gene_names, pos = _take_section(lines, pos, "[genes]")
    edge_lines, pos = _take_section(lines, pos, "[edges]")
    tensor_lines, pos = _take_section(lines, pos, "[tensors]")
    if pos != len(lines):
        raise CorruptCheckpoint("unexpected trailing header content")
    try:
        config = parse_config("\n".join(config_lines))
    except Exception as e:
        raise CorruptCheckpoint(f"bad embedded config: {e}") from e
    if not class_vocab or not gene_names or not edge_lines:
        raise CorruptCheckpoint("empty classes, genes, or edges section")

    edge_names, edge_weights, edge_lists = [], [], []
    for line in edge_lines:
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorruptCheckpoint(f"bad edge line {line!r}")
        edge_names.append(parts[0])
        try:
            edge_weights.append(float(parts[1]))
            edge_lists.append([int(tok) for tok in parts[2].split(",")])
        except ValueError as e:
            raise CorruptCheckpoint(f"bad edge line {line!r}") from e
    try:
        h = build_hypergraph(edge_lists, edge_weights=edge_weights,
                             num_nodes=len(gene_names))
    except Exception as e:
        raise CorruptCheckpoint(f"bad hypergraph: {e}") from e

    shapes: list[tuple[str, tuple[int, ...]]] = []
    for line in tensor_lines:
        parts = line.split("\t")
        if len(parts) != 2:
            raise CorruptCheckpoint(f"bad tensor line {line!r}")
        try:
            shape = tuple(int(tok) for tok in parts[1].split(","))
        except ValueError as e:
            raise CorruptCheckpoint(f"bad tensor shape {parts[1]!r}") from e
        shapes.append((parts[0], shape))

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in shapes:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise CorruptCheckpoint(f"payload truncated at tensor {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=count,
                                     offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise CorruptCheckpoint("payload has trailing bytes")

    params = _assemble_params(arrays, config, len(class_vocab), len(gene_names))
    return Checkpoint(params=params, config=config, gene_names=gene_names,
                      class_vocab=class_vocab, edge_names=edge_names, hypergraph=h)


def _assemble_params(arrays: dict[str, np.ndarray], config: TrainConfig,
                     num_classes: int, num_nodes: int) -> ModelParams:
    import re

    from . import kernel as K

    def take(name, expect_shape=None):
        if name not in arrays:
            raise CorruptCheckpoint(f"missing tensor {name!r}")
        arr = arrays.pop(name)
        if expect_shape is not None and arr.shape != expect_shape:
            raise CorruptCheckpoint(
                f"tensor {name!r} has shape {arr.shape}, expected {expect_shape}")
        return K.parameter(arr)

    d = config.hidden_dim
    layer_ids = sorted({int(m.group(1)) for name in arrays
                        if (m := re.match(r"layer(\d+)\.", name))})
    if layer_ids != list(range(config.num_layers)):
        raise CorruptCheckpoint("layer tensors do not match num_layers")
    emb = take("node_embeddings", (num_nodes, d))
    layers = [LayerParams(
        node_weight=take(f"layer{k}.node_weight", (d, d)),
        node_bias=take(f"layer{k}.node_bias", (d,)),
        edge_weight=take(f"layer{k}.edge_weight", (d, d)),
        edge_bias=take(f"layer{k}.edge_bias", (d,)),
        context=take(f"layer{k}.context", (d, 1)),
    ) for k in layer_ids]
    head = HeadParams(
        fc1_weight=take("head.fc1_weight", (d, d)),
        fc1_bias=take("head.fc1_bias", (d,)),
        fc2_weight=take("head.fc2_weight", (d, d)),
        fc2_bias=take("head.fc2_bias", (d,)),
        out_weight=take("head.out_weight", (d, num_classes)),
        out_bias=take("head.out_bias", (num_classes,)),
    )
    sub_ctx = take("subgraph_context", (d, 1))
    if arrays:
        raise CorruptCheckpoint(f"unexpected tensors: {sorted(arrays)}")
    return ModelParams(
        node_embeddings=emb, layers=layers, subgraph_context=sub_ctx, head=head,
        mode=config.mode, dropout_rate=config.dropout_rate,
        leaky_slope=config.leaky_slope,
        use_subgraph_attention=config.use_subgraph_attention,
    )
