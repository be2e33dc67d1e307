"""Annotations, attribute encoding, synthetic data and raster I/O."""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import load_tensor, save_tensor

AGE_MAX = 100.0


class Gender(enum.Enum):
    FEMALE = "female"
    MALE = "male"


class Race(enum.Enum):
    ASIAN = "asian"
    AFROAMERICAN = "afroamerican"
    CAUCASIAN = "caucasian"


class Happiness(enum.Enum):
    HAPPY = "happy"
    SLIGHTLY_HAPPY = "slightly_happy"
    NEUTRAL = "neutral"
    OTHER = "other"


class Makeup(enum.Enum):
    MAKEUP = "makeup"
    NO_MAKEUP = "no_makeup"
    NOT_CLEAR = "not_clear"
    VERY_SUBTLE = "very_subtle"


class Observer(enum.Enum):
    FEMALE = "female"
    MALE = "male"


class Split(enum.Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


# block order of the attribute vector; member order inside each enum is the one-hot order
ATTRIBUTE_BLOCKS: dict[str, type[enum.Enum]] = {
    "gender": Gender,
    "race": Race,
    "happiness": Happiness,
    "makeup": Makeup,
}
BASE_ATTRIBUTE_DIM = sum(len(e) for e in ATTRIBUTE_BLOCKS.values())  # 13
OBSERVER_ATTRIBUTE_DIM = BASE_ATTRIBUTE_DIM + len(Observer)  # 15

CSV_COLUMNS = ["image_id", "split", "real_age", "apparent_mean", "apparent_std",
               "gender", "race", "happiness", "makeup"]
OBSERVER_COLUMNS = ["apparent_female_obs", "apparent_male_obs"]


class AnnotationError(ValueError):
    pass


def _check_age(value: float, what: str) -> None:
    if not (0.0 <= value <= AGE_MAX) or math.isnan(value):
        raise AnnotationError(f"{what}={value} outside [0, {AGE_MAX:g}]")


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    real_age: float
    apparent_mean: float
    apparent_std: float
    gender: Gender
    race: Race
    happiness: Happiness
    makeup: Makeup
    split: Split = Split.TRAIN
    apparent_by_observer: dict[Observer, float] | None = None

    def __post_init__(self):
        _check_age(self.real_age, "real_age")
        _check_age(self.apparent_mean, "apparent_mean")
        if self.apparent_std < 0:
            raise AnnotationError(f"apparent_std={self.apparent_std} is negative")
        for name, enum_cls in ATTRIBUTE_BLOCKS.items():
            if not isinstance(getattr(self, name), enum_cls):
                raise AnnotationError(f"{name} must be a {enum_cls.__name__}")
        if self.apparent_by_observer is not None:
            for obs, age in self.apparent_by_observer.items():
                if not isinstance(obs, Observer):
                    raise AnnotationError(f"bad observer key {obs!r}")
                _check_age(age, f"apparent_{obs.value}_obs")

    def attribute(self, name: str) -> enum.Enum:
        return getattr(self, name)


# ------------------------------------------------------------ annotations


def _parse_enum(enum_cls, text: str, row: int, column: str):
    try:
        return enum_cls(text.strip().lower())
    except ValueError:
        allowed = ", ".join(m.value for m in enum_cls)
        raise AnnotationError(f"row {row}, column {column!r}: unknown value {text!r} (allowed: {allowed})") from None


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        raise AnnotationError(f"row {row}, column {column!r}: not a number: {text!r}") from None


def load_annotations(path, split: Split | str | None = None) -> list[AnnotationRecord]:
    """Read an annotation CSV, optionally keeping only one split.

    Row numbers in error messages count the header as row 1.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"annotation file not found: {path}")
    if isinstance(split, str):
        split = Split(split)
    records = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise AnnotationError(f"{path}: missing header row")
        header = [h.strip() for h in header]
        if header not in (CSV_COLUMNS, CSV_COLUMNS + OBSERVER_COLUMNS):
            raise AnnotationError(f"{path}: header {header} does not match {CSV_COLUMNS}[+{OBSERVER_COLUMNS}]")
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise AnnotationError(f"row {rownum}: expected {len(header)} fields, got {len(row)}")
            cells = dict(zip(header, row))
            try:
                observer = None
                if len(header) > len(CSV_COLUMNS):
                    fo, mo = cells["apparent_female_obs"].strip(), cells["apparent_male_obs"].strip()
                    if fo or mo:
                        observer = {
                            Observer.FEMALE: _parse_float(fo, rownum, "apparent_female_obs"),
                            Observer.MALE: _parse_float(mo, rownum, "apparent_male_obs"),
                        }
                rec = AnnotationRecord(
                    image_id=cells["image_id"].strip(),
                    split=_parse_enum(Split, cells["split"], rownum, "split"),
                    real_age=_parse_float(cells["real_age"], rownum, "real_age"),
                    apparent_mean=_parse_float(cells["apparent_mean"], rownum, "apparent_mean"),
                    apparent_std=_parse_float(cells["apparent_std"], rownum, "apparent_std"),
                    gender=_parse_enum(Gender, cells["gender"], rownum, "gender"),
                    race=_parse_enum(Race, cells["race"], rownum, "race"),
                    happiness=_parse_enum(Happiness, cells["happiness"], rownum, "happiness"),
                    makeup=_parse_enum(Makeup, cells["makeup"], rownum, "makeup"),
                    apparent_by_observer=observer,
                )
            except AnnotationError as exc:
                msg = str(exc)
                raise AnnotationError(msg if msg.startswith("row ") else f"row {rownum}: {msg}") from None
            if split is None or rec.split is split:
                records.append(rec)
    return records


def _num(x) -> str:
    # shortest round-tripping text, also for numpy scalars
    return repr(float(x))


def write_annotations(path, records: Iterable[AnnotationRecord]) -> None:
    records = list(records)
    with_obs = any(r.apparent_by_observer is not None for r in records)
    header = CSV_COLUMNS + (OBSERVER_COLUMNS if with_obs else [])
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in records:
            row = [r.image_id, r.split.value, _num(r.real_age), _num(r.apparent_mean), _num(r.apparent_std),
                   r.gender.value, r.race.value, r.happiness.value, r.makeup.value]
            if with_obs:
                obs = r.apparent_by_observer
                row += ["", ""] if obs is None else [_num(obs[Observer.FEMALE]), _num(obs[Observer.MALE])]
            writer.writerow(row)


# ---------------------------------------------------------------- encoding


def encode_attributes(record: AnnotationRecord, observer: Observer | None = None) -> np.ndarray:
    """One-hot blocks gender | race | happiness | makeup (| observer)."""
    blocks = [(enum_cls, record.attribute(name)) for name, enum_cls in ATTRIBUTE_BLOCKS.items()]
    if observer is not None:
        blocks.append((Observer, observer))
    out = []
    for enum_cls, value in blocks:
        out.extend(1.0 if m is value else 0.0 for m in enum_cls)
    return np.array(out)


def normalize_age(age):
    a = np.asarray(age, dtype=np.float64)
    if np.any(a < 0) or np.any(a > AGE_MAX) or np.any(np.isnan(a)):
        raise ValueError(f"age outside [0, {AGE_MAX:g}]")
    out = a / AGE_MAX
    return float(out) if out.ndim == 0 else out


def denormalize_age(value):
    v = np.asarray(value, dtype=np.float64)
    out = v * AGE_MAX
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------- synthetic

DEFAULT_BIAS_TABLE = {"female": 4.0, "happy": -2.0, "slightly_happy": -1.0, "makeup": -2.0}
DEFAULT_OBSERVER_OFFSETS = {"female": 1.0, "male": -1.0}
_CATEGORY_NAMES = {m.value for e in ATTRIBUTE_BLOCKS.values() for m in e}


@dataclass
class SyntheticSpec:
    """Recipe for a perception-biased toy dataset.

    Apparent ages are the real age shifted by per-category offsets
    (``bias_table``, keyed by category string) plus Gaussian noise.
    Images encode only the real age.
    """

    sample_count: int = 3000
    seed: int = 0
    bias_table: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_BIAS_TABLE))
    noise_std: float = 2.0
    observer_offsets: dict[str, float] | None = field(default_factory=lambda: dict(DEFAULT_OBSERVER_OFFSETS))
    age_range: tuple[float, float] = (5.0, 85.0)
    image_side: int = 32
    pixel_noise: float = 0.05
    split_weights: tuple[float, float, float] = (4.0, 1.0, 1.0)

    def __post_init__(self):
        self.age_range = tuple(float(a) for a in self.age_range)
        self.split_weights = tuple(float(w) for w in self.split_weights)
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.sample_count, int) or self.sample_count <= 0:
            raise ValueError(f"sample_count must be a positive integer, got {self.sample_count!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed!r}")
        lo, hi = self.age_range
        if not (0.0 <= lo <= hi <= AGE_MAX):
            raise ValueError(f"age_range {self.age_range} not within [0, {AGE_MAX:g}]")
        if self.noise_std < 0 or self.pixel_noise < 0:
            raise ValueError("noise levels must be >= 0")
        if self.image_side < 4:
            raise ValueError("image_side must be >= 4")
        unknown = set(self.bias_table) - _CATEGORY_NAMES
        if unknown:
            raise ValueError(f"bias_table has unknown categories {sorted(unknown)}")
        if self.observer_offsets is not None and set(self.observer_offsets) != {o.value for o in Observer}:
            raise ValueError("observer_offsets needs exactly the keys 'female' and 'male'")
        if len(self.split_weights) != 3 or min(self.split_weights) < 0 or sum(self.split_weights) <= 0:
            raise ValueError("split_weights must be three non-negative numbers with a positive sum")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["age_range"] = list(self.age_range)
        d["split_weights"] = list(self.split_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ImageSample:
    pixels: np.ndarray  # [h, w, c], values in [0, 1]
    record: AnnotationRecord


def split_counts(n: int, weights: Sequence[float]) -> tuple[int, int, int]:
    total = float(sum(weights))
    n_train = int(round(n * weights[0] / total))
    n_val = min(int(round(n * weights[1] / total)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def render_age_image(age: float, side: int) -> np.ndarray:
    """Noise-free rendering: gray background at age/AGE_MAX with a white
    centred disk whose radius grows linearly with age."""
    level = age / AGE_MAX
    c = (side - 1) / 2.0
    yy, xx = np.mgrid[0:side, 0:side]
    radius = 0.45 * side * level
    img = np.full((side, side), level)
    img[(yy - c) ** 2 + (xx - c) ** 2 <= radius**2] = 1.0
    return img


def generate_synthetic(spec: SyntheticSpec) -> list[ImageSample]:
    spec.validate()
    n = spec.sample_count
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.age_range
    real = rng.uniform(lo, hi, n)
    picks = {name: rng.integers(0, len(enum_cls), n) for name, enum_cls in ATTRIBUTE_BLOCKS.items()}
    noise = rng.standard_normal(n) * spec.noise_std
    pix_noise = rng.standard_normal((n, spec.image_side, spec.image_side)) * spec.pixel_noise
    n_train, n_val, _ = split_counts(n, spec.split_weights)

    samples = []
    for i in range(n):
        cats = {name: list(enum_cls)[picks[name][i]] for name, enum_cls in ATTRIBUTE_BLOCKS.items()}
        offset = sum(spec.bias_table.get(c.value, 0.0) for c in cats.values())
        apparent = min(max(real[i] + offset + noise[i], 0.0), AGE_MAX)
        observer = None
        if spec.observer_offsets is not None:
            observer = {
                o: float(min(max(apparent + spec.observer_offsets[o.value], 0.0), AGE_MAX)) for o in Observer
            }
        split = Split.TRAIN if i < n_train else Split.VALIDATION if i < n_train + n_val else Split.TEST
        rec = AnnotationRecord(
            image_id=f"syn_{i:06d}",
            real_age=float(real[i]),
            apparent_mean=float(apparent),
            apparent_std=float(spec.noise_std),
            split=split,
            apparent_by_observer=observer,
            **cats,
        )
        img = np.clip(render_age_image(real[i], spec.image_side) + pix_noise[i], 0.0, 1.0)
        # quantise to 8 bits so the PGM written to disk reloads bit-for-bit
        img = np.round(img * 255.0) / 255.0
        samples.append(ImageSample(img[:, :, None], rec))
    return samples


# ----------------------------------------------------------------- images


class ImageFormatError(ValueError):
    pass


def _read_pnm(buf: bytes) -> np.ndarray:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported image format (magic {magic!r})")
    channels = 1 if magic == b"P5" else 3
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace before raster
    width, height, maxval = fields
    if not (0 < maxval < 65536) or width <= 0 or height <= 0:
        raise ImageFormatError(f"bad PNM header values {fields}")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = width * height * channels * dtype.itemsize
    raster = buf[pos : pos + need]
    if len(raster) < need:
        raise ImageFormatError(f"truncated PNM raster: need {need} bytes, have {len(raster)}")
    arr = np.frombuffer(raster, dtype=dtype).reshape(height, width, channels)
    return arr.astype(np.float64) / maxval


def load_image(path) -> np.ndarray:
    """Load a PGM/PPM or PTNS image as an ``[h, w, c]`` float array in [0, 1]."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] == b"PTNS":
        arr = load_tensor(path)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ImageFormatError(f"PTNS image must be [h,w,1|3], got {arr.shape}")
        if arr.min() < 0 or arr.max() > 1:
            raise ImageFormatError("PTNS image values outside [0, 1]")
        return arr
    return _read_pnm(buf)


def save_image(path, pixels) -> None:
    """Write pixels as PGM/PPM (8-bit) or PTNS, chosen by file extension."""
    path = Path(path)
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ImageFormatError(f"image must be [h,w,1|3], got {arr.shape}")
    if arr.min() < 0 or arr.max() > 1:
        raise ImageFormatError("pixel values outside [0, 1]")
    suffix = path.suffix.lower()
    if suffix == ".ptns":
        save_tensor(path, arr)
        return
    if suffix not in (".pgm", ".ppm", ".pnm"):
        raise ImageFormatError(f"unsupported image extension {suffix!r}")
    h, w, c = arr.shape
    magic = b"P5" if c == 1 else b"P6"
    raster = np.round(arr * 255.0).astype(np.uint8).tobytes()
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + raster)


# ------------------------------------------------------- dataset directory

ANNOTATION_FILE = "annotations.csv"
IMAGE_DIR = "images"


def write_dataset(samples: Sequence[ImageSample], out_dir, spec: SyntheticSpec | None = None) -> Path:
    out = Path(out_dir)
    (out / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    for s in samples:
        ext = ".pgm" if s.pixels.shape[2] == 1 else ".ppm"
        save_image(out / IMAGE_DIR / f"{s.record.image_id}{ext}", s.pixels)
    write_annotations(out / ANNOTATION_FILE, [s.record for s in samples])
    if spec is not None:
        (out / "synthetic_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def _find_image(image_dir: Path, image_id: str) -> Path:
    for ext in (".pgm", ".ppm", ".ptns"):
        p = image_dir / f"{image_id}{ext}"
        if p.is_file():
            return p
    raise FileNotFoundError(f"no image for {image_id!r} in {image_dir}")


def load_dataset(data_dir, split: Split | str | None = None) -> list[ImageSample]:
    data_dir = Path(data_dir)
    records = load_annotations(data_dir / ANNOTATION_FILE, split)
    return [ImageSample(load_image(_find_image(data_dir / IMAGE_DIR, r.image_id)), r) for r in records]


def by_split(samples: Iterable[ImageSample]) -> dict[Split, list[ImageSample]]:
    out = {s: [] for s in Split}
    for sample in samples:
        out[sample.record.split].append(sample)
    return out
