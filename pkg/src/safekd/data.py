"""Instruction/response/label records: JSONL I/O, seeded splits, and a synthetic generator."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ContractViolation

GENERATOR_VERSION = "1"

INSTRUCTIONS = (
    "classify the sentiment of this review",
    "what is the sentiment of the text",
    "label the tone of the following message",
)


class DatasetError(ValueError):
    """Malformed dataset file or record."""


@dataclass(frozen=True)
class Record:
    instruction: str
    response: str
    label: int

    @property
    def text(self) -> str:
        return f"{self.instruction} {self.response}"


@dataclass
class Dataset:
    records: list[Record]
    num_classes: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def texts(self) -> list[str]:
        return [r.text for r in self.records]

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.records[i] for i in indices], self.num_classes, dict(self.meta))


@dataclass(frozen=True)
class VocabSpec:
    """Token pools for the synthetic generator.

    Each class owns ``signature_size`` tokens; every record mixes
    ``signature_tokens`` of them with ``filler_tokens`` shared tokens.
    ``shift`` is the fraction of filler drawn from an alternate pool.
    """

    signature_size: int = 3
    signature_tokens: int = 6
    filler_size: int = 40
    filler_tokens: int = 2
    shift: float = 0.0


def _normalized(text: str) -> str:
    return " ".join(text.lower().split())


def _check_record(obj, lineno: int, num_classes: int | None) -> Record:
    if not isinstance(obj, dict):
        raise DatasetError(f"line {lineno}: expected a JSON object")
    missing = {"instruction", "response", "label"} - set(obj)
    if missing:
        raise DatasetError(f"line {lineno}: missing keys {sorted(missing)}")
    label = obj["label"]
    if not isinstance(label, int) or isinstance(label, bool):
        raise DatasetError(f"line {lineno}: label must be an integer")
    if label < 0 or (num_classes is not None and label >= num_classes):
        raise DatasetError(f"line {lineno}: label {label} out of range [0, {num_classes})")
    instruction, response = str(obj["instruction"]), str(obj["response"])
    if not _normalized(f"{instruction} {response}"):
        raise DatasetError(f"line {lineno}: instruction and response are both empty")
    return Record(instruction, response, label)


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def load_jsonl(path, num_classes: int | None = None) -> Dataset:
    """Read one record per line; the class count comes from the sidecar if not given."""
    path = Path(path)
    meta = {}
    sidecar = meta_path(path)
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        if num_classes is None:
            num_classes = meta.get("C")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: {exc.msg}") from exc
            records.append(_check_record(obj, lineno, num_classes))
    return Dataset(records, num_classes, meta)


def dumps_jsonl(dataset: Dataset) -> str:
    return "".join(
        json.dumps(asdict(r), ensure_ascii=False) + "\n" for r in dataset.records
    )


def save_jsonl(dataset: Dataset, path, write_meta: bool = True) -> None:
    path = Path(path)
    path.write_text(dumps_jsonl(dataset), encoding="utf-8")
    if write_meta:
        meta = dict(dataset.meta)
        meta.update(C=dataset.num_classes, n=len(dataset))
        meta_path(path).write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def flip_labels(labels, num_classes: int, noise_rate: float, seed) -> np.ndarray:
    """Move a seeded ``noise_rate`` fraction of labels uniformly to another class."""
    if not 0 <= noise_rate <= 1:
        raise ContractViolation("noise_rate must lie in [0, 1]")
    labels = np.array(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    n_flip = int(round(noise_rate * len(labels)))
    chosen = rng.permutation(len(labels))[:n_flip]
    offsets = rng.integers(1, num_classes, size=n_flip)
    labels[chosen] = (labels[chosen] + offsets) % num_classes
    return labels


def generate_synthetic(n: int, num_classes: int = 3, vocab: VocabSpec = VocabSpec(),
                       noise_rate: float = 0.0, seed: int = 0) -> Dataset:
    """Class-balanced records whose responses carry class-specific signature tokens."""
    if n < num_classes:
        raise ContractViolation("n must be >= num_classes")
    rng = np.random.default_rng(seed)
    signatures = [[f"s{k}w{j}" for j in range(vocab.signature_size)] for k in range(num_classes)]
    filler = [f"f{j}" for j in range(vocab.filler_size)]
    shifted = [f"g{j}" for j in range(vocab.filler_size)]
    clean = np.arange(n) % num_classes
    rng.shuffle(clean)
    records = []
    for k in clean:
        sig = rng.choice(signatures[k], size=vocab.signature_tokens, replace=True)
        use_shift = rng.uniform(size=vocab.filler_tokens) < vocab.shift
        fill = [
            shifted[j] if s else filler[j]
            for j, s in zip(rng.integers(0, vocab.filler_size, size=vocab.filler_tokens), use_shift)
        ]
        tokens = list(sig) + fill
        rng.shuffle(tokens)
        instruction = INSTRUCTIONS[rng.integers(len(INSTRUCTIONS))]
        records.append(Record(instruction, " ".join(tokens), int(k)))
    labels = flip_labels(clean, num_classes, noise_rate, [seed, 1])
    records = [Record(r.instruction, r.response, int(y)) for r, y in zip(records, labels)]
    meta = {
        "C": num_classes,
        "n": n,
        "eta": noise_rate,
        "seed": seed,
        "generator_version": GENERATOR_VERSION,
        "vocab": asdict(vocab),
    }
    return Dataset(records, num_classes, meta)


def signature_class(token: str) -> int | None:
    """Class owning a synthetic signature token, or None for filler."""
    if token.startswith("s") and "w" in token:
        head = token[1:].split("w", 1)[0]
        if head.isdigit():
            return int(head)
    return None


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2
    seed: int = 0
    require_nonempty: bool = True

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0:
            raise ContractViolation("split fractions must be >= 0")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ContractViolation("split fractions must sum to 1")


def split(dataset: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded shuffle, then contiguous train/val/test cuts."""
    n = len(dataset)
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(round(spec.train * n))
    n_val = int(round(spec.val * n))
    n_val = min(n_val, n - n_train)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    if spec.require_nonempty and n >= 10:
        sizes = [len(p) for p, frac in zip(parts, (spec.train, spec.val, spec.test)) if frac > 0]
        if min(sizes, default=1) == 0:
            raise ContractViolation("a split with positive fraction came out empty")
    return tuple(dataset.subset(p.tolist()) for p in parts)
