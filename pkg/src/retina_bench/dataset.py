"""Manifest ingestion and class-distribution audit.

A manifest is a flat UTF-8 CSV with the header ``path,label,source``. Paths
containing commas are not supported: fields are split on every comma and no
quoting is interpreted.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER = ("path", "label", "source")


class ClassLabel(enum.IntEnum):
    NORMAL = 0
    EXUDATES = 1
    DRUSEN = 2

    @classmethod
    def parse(cls, token: str) -> "ClassLabel":
        try:
            return cls[token.strip().upper()]
        except KeyError:
            raise UnknownLabel(token) from None

    @property
    def display(self) -> str:
        return self.name.capitalize()


class ManifestError(Exception):
    pass


class MissingFile(ManifestError):
    pass


class MalformedRow(ManifestError):
    def __init__(self, line: int, detail: str = ""):
        self.line = line
        super().__init__(f"line {line}: malformed row{': ' + detail if detail else ''}")


class UnknownLabel(ManifestError):
    def __init__(self, token: str):
        self.token = token
        super().__init__(f"unknown label {token!r}")


class DuplicatePath(ManifestError):
    def __init__(self, path: str):
        self.path = path
        super().__init__(f"duplicate path {path!r}")


class EmptyManifest(ManifestError):
    pass


class ImageFormatError(ManifestError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: ClassLabel
    source: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def labels(self) -> list[ClassLabel]:
        return [e.label for e in self.entries]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p


@dataclass
class ClassDistribution:
    per_class: dict[ClassLabel, int]
    per_source: dict[tuple[str, ClassLabel], int]

    @property
    def total(self) -> int:
        return sum(self.per_class.values())

    @property
    def sources(self) -> list[str]:
        seen: dict[str, None] = {}
        for src, _ in self.per_source:
            seen.setdefault(src, None)
        return list(seen)

    def render(self) -> str:
        """Source-by-class grid with an ``All`` column and a per-source total row."""
        sources = self.sources
        head = ["Dataset", *sources, "All"]
        rows = [head]
        for c in ClassLabel:
            cells = [c.display]
            for s in sources:
                n = self.per_source.get((s, c), 0)
                cells.append(str(n) if n else "-")
            cells.append(str(self.per_class[c]))
            rows.append(cells)
        rows.append(["Total", *[str(sum(self.per_source.get((s, c), 0) for c in ClassLabel))
                                for s in sources], str(self.total)])
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        lines = ["| " + " | ".join(cell.ljust(w) for cell, w in zip(r, widths)) + " |" for r in rows]
        lines.insert(1, "|" + "|".join("-" * (w + 2) for w in widths) + "|")
        return "\n".join(lines)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    text = path.read_text(encoding="utf-8-sig")
    lines = text.splitlines()
    if not lines or tuple(c.strip().lower() for c in lines[0].split(",")) != HEADER:
        raise MalformedRow(1, "expected header 'path,label,source'")
    entries = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split(",")
        if len(cols) != 3:
            raise MalformedRow(lineno, f"expected 3 fields, got {len(cols)}")
        p, label, source = (c.strip() for c in cols)
        if not p or not source:
            raise MalformedRow(lineno, "empty path or source")
        lab = ClassLabel.parse(label)
        if p in seen:
            raise DuplicatePath(p)
        seen.add(p)
        entries.append(ManifestEntry(p, lab, source))
    return DatasetManifest(entries, root=path.parent)


def write_manifest(manifest: DatasetManifest, path) -> None:
    out = [",".join(HEADER)]
    for e in manifest.entries:
        if "," in e.path or "," in e.source:
            raise ValueError(f"commas are not supported in manifest fields: {e.path!r}")
        out.append(f"{e.path},{e.label.name.lower()},{e.source}")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def audit_distribution(m: DatasetManifest) -> ClassDistribution:
    if not m.entries:
        raise EmptyManifest("manifest has no entries")
    per_class = Counter(e.label for e in m.entries)
    per_source = Counter((e.source, e.label) for e in m.entries)
    return ClassDistribution(
        per_class={c: per_class.get(c, 0) for c in ClassLabel},
        per_source=dict(per_source),
    )


def load_image(path) -> np.ndarray:
    """Decode an 8-bit RGB image into an ``(H, W, 3)`` float array in [0, 1].

    Grayscale and palette-less single-band images are rejected; RGBA drops alpha.
    """
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("L", "1", "I", "I;16", "F", "LA"):
            raise ImageFormatError(f"{path}: grayscale image, three channels required")
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def save_image(img: np.ndarray, path) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


# Per-source class counts of the original six-dataset corpus (+ one private
# set); sums to 697 normal / 352 exudates / 84 drusen = 1133 images.
REFERENCE_CORPUS = {
    ("ORNL", ClassLabel.NORMAL): 36,
    ("ORNL", ClassLabel.EXUDATES): 20,
    ("ORNL", ClassLabel.DRUSEN): 61,
    ("STARE", ClassLabel.DRUSEN): 23,
    ("HRF", ClassLabel.NORMAL): 15,
    ("DRiDB", ClassLabel.NORMAL): 10,
    ("DRiDB", ClassLabel.EXUDATES): 28,
    ("e_ophtha_EX", ClassLabel.NORMAL): 35,
    ("e_ophtha_EX", ClassLabel.EXUDATES): 47,
    ("HEI-MED", ClassLabel.NORMAL): 61,
    ("HEI-MED", ClassLabel.EXUDATES): 28,
    ("MESSIDOR", ClassLabel.NORMAL): 540,
    ("MESSIDOR", ClassLabel.EXUDATES): 229,
}


def reference_manifest() -> DatasetManifest:
    """Placeholder manifest with the reference corpus layout (no image files)."""
    entries = []
    for (source, label), n in REFERENCE_CORPUS.items():
        for i in range(n):
            entries.append(ManifestEntry(f"{source}/{label.name.lower()}_{i:04d}.png", label, source))
    return DatasetManifest(entries)
