"""Metadata ingestion, image preprocessing, balanced splits and batch streaming."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError
from .network import CLASS_NAMES
from .tensor import SeededRng

SPLITS = ("train", "valid", "test")
METADATA_COLUMNS = ("filename", "class", "split", "xmin", "ymin", "xmax", "ymax", "country", "sex", "age")
REQUIRED_COLUMNS = METADATA_COLUMNS[:7]
AGE_BUCKETS = ("0-20", "21-40", "41-60", "61-80", "81+", "unknown")

PathLike = Union[str, Path]


@dataclass(frozen=True)
class SampleRecord:
    filename: str
    label: int
    bbox: tuple[int, int, int, int]  # xmin, ymin, xmax, ymax; max exclusive
    split: str
    country: str = ""
    sex: str = ""
    age: Optional[int] = None

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.label]


@dataclass(frozen=True)
class Rejection:
    row: int  # line number in the CSV file, header is line 1
    reason: str


def _parse_label(text: str) -> int:
    text = text.strip()
    if text in ("0", "1", "2"):
        return int(text)
    lowered = {name.lower(): i for i, name in enumerate(CLASS_NAMES)}
    if text.lower() in lowered:
        return lowered[text.lower()]
    raise ValueError(f"unknown class {text!r}")


def parse_metadata(csv_path: PathLike) -> tuple[list[SampleRecord], list[Rejection]]:
    """Read the metadata CSV; bad rows go to the rejection list, not the floor.

    Header: ``filename,class,split,xmin,ymin,xmax,ymax,country,sex,age`` (the
    last three may be absent or empty).  ``class`` is 0/1/2 or a class name.
    """
    path = Path(csv_path)
    if not path.is_file():
        raise DataError(f"metadata file {path} does not exist")
    records: list[SampleRecord] = []
    rejects: list[Rejection] = []
    seen: dict[tuple[str, str], int] = {}
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing required column(s) {', '.join(missing)}")
        for row in reader:
            line = reader.line_num
            try:
                rec = _parse_row(row)
            except ValueError as exc:
                rejects.append(Rejection(line, str(exc)))
                continue
            key = (rec.split, rec.filename)
            if key in seen:
                raise DataError(
                    f"{path}: filename {rec.filename!r} appears twice in split {rec.split!r} "
                    f"(lines {seen[key]} and {line})"
                )
            seen[key] = line
            records.append(rec)
    return records, rejects


def _parse_row(row: dict) -> SampleRecord:
    filename = (row.get("filename") or "").strip()
    if not filename:
        raise ValueError("empty filename")
    label = _parse_label(row.get("class") or "")
    split = (row.get("split") or "").strip().lower()
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    try:
        xmin, ymin, xmax, ymax = (int(float(row[k])) for k in ("xmin", "ymin", "xmax", "ymax"))
    except (TypeError, ValueError):
        raise ValueError("unparseable bounding box") from None
    if xmin < 0 or ymin < 0 or xmax <= xmin or ymax <= ymin:
        raise ValueError(f"invalid bounding box ({xmin}, {ymin}, {xmax}, {ymax})")
    age_text = (row.get("age") or "").strip()
    try:
        age = int(float(age_text)) if age_text else None
    except ValueError:
        raise ValueError(f"unparseable age {age_text!r}") from None
    return SampleRecord(
        filename, label, (xmin, ymin, xmax, ymax), split,
        (row.get("country") or "").strip(), (row.get("sex") or "").strip(), age,
    )


def write_rejections(path: PathLike, rejects: Sequence[Rejection]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "reason"])
        for r in rejects:
            w.writerow([r.row, r.reason])


# --- images ------------------------------------------------------------------


def read_png(src: Union[PathLike, bytes]) -> np.ndarray:
    """Decode a PNG into an (h, w, 3) uint8 array."""
    name = "<bytes>" if isinstance(src, (bytes, bytearray)) else str(src)
    try:
        with Image.open(io.BytesIO(src) if isinstance(src, (bytes, bytearray)) else src) as im:
            if im.format != "PNG":
                raise DataError(f"{name}: expected a PNG image, got {im.format}")
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"{name}: cannot decode image ({exc})") from None


def png_bytes(img: np.ndarray) -> bytes:
    """Encode an (h, w) or (h, w, 3) uint8 array as PNG."""
    mode = "L" if img.ndim == 2 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8), mode).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def write_png(path: PathLike, img: np.ndarray) -> None:
    Path(path).write_bytes(png_bytes(img))


def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize of an (h, w[, c]) array; returns float64.

    Source coordinate of output pixel ``d`` is ``(d + 0.5) * in/out - 0.5``,
    clamped to the image, so edges replicate.
    """
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize target must be positive, got {out_h}x{out_w}")
    a = np.asarray(img, dtype=np.float64)
    y0, y1, fy = _axis_weights(a.shape[0], out_h)
    x0, x1, fx = _axis_weights(a.shape[1], out_w)
    if a.ndim == 3:
        fy, fx = fy[:, None, None], fx[None, :, None]
    else:
        fy, fx = fy[:, None], fx[None, :]
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bottom = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def to_uint8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(a + 0.5), 0, 255).astype(np.uint8)


def crop_resize(img: np.ndarray, bbox, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    xmin, ymin, xmax, ymax = bbox
    if not (0 <= xmin < xmax <= w and 0 <= ymin < ymax <= h):
        raise DataError(f"bounding box {tuple(bbox)} outside {w}x{h} image")
    crop = img[ymin:ymax, xmin:xmax]
    if crop.shape[:2] == (size, size):
        return crop.copy()
    return to_uint8(bilinear_resize(crop, size, size))


def preprocess_image(src: Union[PathLike, bytes], bbox, target_size: int = 224) -> bytes:
    """Crop to ``bbox`` and resize to ``target_size`` squared; returns RGB PNG bytes."""
    return png_bytes(crop_resize(read_png(src), bbox, target_size))


# --- balanced splits ---------------------------------------------------------


@dataclass
class SplitPlan:
    splits: dict[str, dict[int, list[SampleRecord]]]

    def counts(self) -> dict[str, dict[int, int]]:
        return {s: {k: len(v) for k, v in per.items()} for s, per in self.splits.items()}

    def records(self, split: str) -> list[SampleRecord]:
        per = self.splits.get(split, {})
        return [r for label in sorted(per) for r in per[label]]


def build_balanced_splits(records: Sequence[SampleRecord], seed: int, num_classes: int = 3) -> SplitPlan:
    """Down-sample each class of each split to that split's smallest class.

    Selection is a seeded draw without replacement; kept records retain their
    input order.  A class already at the minimum keeps every record.
    """
    by_split: dict[str, dict[int, list[SampleRecord]]] = {}
    owner: dict[str, str] = {}
    for r in records:
        if owner.setdefault(r.filename, r.split) != r.split:
            raise DataError(f"{r.filename!r} appears in both {owner[r.filename]!r} and {r.split!r}")
        by_split.setdefault(r.split, {k: [] for k in range(num_classes)})[r.label].append(r)
    rng = SeededRng(seed)
    plan = {}
    for split in sorted(by_split, key=lambda s: SPLITS.index(s) if s in SPLITS else len(SPLITS)):
        per = by_split[split]
        empty = [CLASS_NAMES[k] if num_classes == 3 else str(k) for k, v in per.items() if not v]
        if empty:
            raise DataError(f"split {split!r} has no records of class {', '.join(empty)}")
        n = min(len(v) for v in per.values())
        kept = {}
        for label, items in per.items():
            child = rng.spawn(SPLITS.index(split) * 16 + label if split in SPLITS else label)
            if len(items) == n:
                kept[label] = list(items)
            else:
                chosen = np.sort(child.permutation(len(items))[:n])
                kept[label] = [items[i] for i in chosen]
        plan[split] = kept
    return SplitPlan(plan)


# --- directory trees and streaming -----------------------------------------------


def class_dir(root: PathLike, split: str, label: int) -> Path:
    return Path(root) / split / CLASS_NAMES[label]


def scan_tree(root: PathLike, split: str, class_names: Sequence[str] = CLASS_NAMES) -> list[tuple[Path, int]]:
    """``(path, label)`` for every PNG under ``<root>/<split>/<ClassName>/``, sorted."""
    base = Path(root) / split
    if not base.is_dir():
        raise DataError(f"split directory {base} does not exist")
    present = sorted(p.name for p in base.iterdir() if p.is_dir())
    unknown = [n for n in present if n not in class_names]
    if unknown:
        raise DataError(f"{base} has unexpected class directories {unknown}; expected {list(class_names)}")
    items = []
    for label, name in enumerate(class_names):
        d = base / name
        if not d.is_dir():
            raise DataError(f"missing class directory {d}")
        items += [(p, label) for p in sorted(d.glob("*.png"))]
    return items


def load_image(path: PathLike, size: int, channels: int = 3, rescale: bool = True) -> np.ndarray:
    """Decode, resize to ``size`` squared, and return a (channels, size, size) float32 array.

    Values are in [0, 1] when ``rescale`` is set, else in [0, 255].
    """
    img = read_png(path)
    if img.shape[:2] != (size, size):
        img = to_uint8(bilinear_resize(img, size, size))
    if channels == 1:
        img = img[..., :1]
    elif channels != 3:
        raise ConfigError(f"channels must be 1 or 3, got {channels}")
    out = img.transpose(2, 0, 1).astype(np.float32)
    return out / np.float32(255) if rescale else out


@dataclass
class BatchStream:
    """Seeded, epoch-shuffled mini-batches over ``(path, label)`` items.

    Up to ``prefetch`` batches are decoded ahead on worker threads; batches
    are always yielded in shuffle order so the prefetch depth never changes
    the output.
    """

    items: Sequence[tuple[PathLike, int]]
    batch_size: int = 128
    seed: int = 0
    prefetch: int = 0
    image_size: int = 128
    channels: int = 3
    shuffle: bool = True
    rescale: bool = True
    cache: bool = False
    _memo: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.prefetch < 0:
            raise ConfigError(f"prefetch depth must be >= 0, got {self.prefetch}")

    def __len__(self) -> int:
        return math.ceil(len(self.items) / self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.items))
        return SeededRng(self.seed).spawn(epoch).permutation(len(self.items))

    def _image(self, path) -> np.ndarray:
        if self.cache and path in self._memo:
            return self._memo[path]
        img = load_image(path, self.image_size, self.channels, self.rescale)
        if self.cache:
            self._memo[path] = img
        return img

    def _load(self, idx: np.ndarray):
        images = np.stack([self._image(self.items[i][0]) for i in idx])
        labels = np.array([self.items[i][1] for i in idx], dtype=np.int64)
        return images, labels

    def epoch(self, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = self.order(epoch)
        chunks = [order[i : i + self.batch_size] for i in range(0, len(order), self.batch_size)]
        if self.prefetch == 0:
            for idx in chunks:
                yield self._load(idx)
            return
        with ThreadPoolExecutor(max_workers=self.prefetch) as pool:
            pending = deque()
            it = iter(chunks)
            try:
                for idx in it:
                    pending.append(pool.submit(self._load, idx))
                    if len(pending) > self.prefetch:
                        yield pending.popleft().result()
                while pending:
                    yield pending.popleft().result()
            finally:
                for fut in pending:
                    fut.cancel()

    __iter__ = epoch


def batch_stream_next(stream_iter: Iterator) -> tuple[np.ndarray, np.ndarray]:
    """Next ``(images, labels)`` of an epoch iterator; raises ``StopIteration`` at the end."""
    return next(stream_iter)


# --- stats ---------------------------------------------------------------------


def age_bucket(age: Optional[int]) -> str:
    if age is None or age < 0:
        return "unknown"
    for bound, name in ((20, "0-20"), (40, "21-40"), (60, "41-60"), (80, "61-80")):
        if age <= bound:
            return name
    return "81+"


def _sex_label(sex: str) -> str:
    s = sex.strip().upper()
    return {"F": "female", "FEMALE": "female", "M": "male", "MALE": "male"}.get(s, "unknown")


@dataclass(frozen=True)
class StatRow:
    table: str
    group: str
    category: str
    count: int
    percent: float


def dataset_stats(records: Sequence[SampleRecord]) -> list[StatRow]:
    """Distribution tables as flat rows.

    Tables: ``class`` and ``sex`` (percent of all records), and the cross
    tables ``class_by_split``, ``class_by_country`` and ``class_by_age``
    (percent within each group).
    """
    rows: list[StatRow] = []
    total = len(records)

    def single(table, values, order):
        counts = Counter(values)
        for key in order + sorted(k for k in counts if k not in order):
            c = counts.get(key, 0)
            rows.append(StatRow(table, "all", key, c, 100.0 * c / total if total else 0.0))

    def cross(table, groups):
        by = {}
        for g, r in zip(groups, records):
            by.setdefault(g, Counter())[r.class_name] += 1
        for g in sorted(by):
            n = sum(by[g].values())
            for name in CLASS_NAMES:
                c = by[g][name]
                rows.append(StatRow(table, g, name, c, 100.0 * c / n))

    single("class", [r.class_name for r in records], list(CLASS_NAMES))
    single("sex", [_sex_label(r.sex) for r in records], ["female", "male", "unknown"])
    cross("class_by_split", [r.split for r in records])
    cross("class_by_country", [r.country or "unknown" for r in records])
    cross("class_by_age", [age_bucket(r.age) for r in records])
    return rows


def write_stats_csv(path: PathLike, rows: Sequence[StatRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["table", "group", "category", "count", "percent"])
        for r in rows:
            w.writerow([r.table, r.group, r.category, r.count, f"{r.percent:.4f}"])


def format_stats(rows: Sequence[StatRow]) -> str:
    lines = []
    current = None
    for r in rows:
        if r.table != current:
            current = r.table
            lines.append(f"[{current}]")
        lines.append(f"  {r.group:<12} {r.category:<10} {r.count:>8d} {r.percent:6.1f}%")
    return "\n".join(lines) + "\n"
