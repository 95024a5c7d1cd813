"""Synthetic vehicle re-ID benchmark: generation, manifest I/O and loading.

Layout of a dataset root::

    manifest.tsv        one SampleRecord per line (angles in degrees)
    identities.tsv      appearance parameters of every identity
    fingerprint.txt     sha256 of manifest.tsv
    images/<split>/<id>_c<cam>_t<track>_<k>.png
"""
from __future__ import annotations

import csv
import hashlib
import math
from collections import defaultdict
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import depression_angle
from .render import MAX_DEPRESSION, VehicleIdentity, make_identities, render_vehicle

MANIFEST = "manifest.tsv"
IDENTITIES = "identities.tsv"
FINGERPRINT = "fingerprint.txt"
MANIFEST_FIELDS = ("id", "camera", "track", "theta_deg", "H_m", "D_m", "split", "path")

TRACK_JITTER_DEG = 10.0
SPLITS = ("train", "query", "gallery")


class DatasetError(RuntimeError):
    pass


class CorruptDatasetError(DatasetError):
    pass


@dataclass
class DatasetConfig:
    num_train_ids: int = 64
    num_test_ids: int = 32
    images_per_id: int = 40
    num_cameras: int = 4
    image_size: int = 64
    track_length: int = 10
    seed: int = 0

    def validate(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "seed":
                continue
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"dataset.{f.name} must be a positive integer, got {value!r}")
        if self.num_test_ids < 1 and self.num_train_ids < 1:
            raise ValueError("dataset needs at least one identity")
        per_camera, rem = divmod(self.images_per_id, self.num_cameras)
        if rem or per_camera % self.track_length:
            raise ValueError(
                "dataset.track_length must divide images_per_id / num_cameras "
                f"(images_per_id={self.images_per_id}, num_cameras={self.num_cameras}, "
                f"track_length={self.track_length})")


@dataclass(frozen=True)
class SampleRecord:
    path: str
    id: int
    camera: int
    track: int
    theta_deg: float
    H_m: float
    D_m: float
    split: str

    @property
    def theta(self) -> float:
        return math.radians(self.theta_deg)

    @property
    def phi(self) -> float:
        return depression_angle(self.H_m, self.D_m)


@dataclass
class IntegrityReport:
    num_records: int
    counts: dict[str, int]
    num_identities: dict[str, int]
    fingerprint: str
    appearance_collisions: list[tuple[int, int]] = field(default_factory=list)


def camera_rigs(num_cameras: int, rng: np.random.Generator) -> list[tuple[float, float]]:
    """Fixed (height, distance) per camera, depression capped at 60 degrees."""
    rigs = []
    for _ in range(num_cameras):
        while True:
            h = round(float(rng.uniform(1.0, 12.0)), 3)
            d = round(float(rng.uniform(4.0, 25.0)), 3)
            if depression_angle(h, d) <= MAX_DEPRESSION:
                break
        rigs.append((h, d))
    return rigs


def plan_dataset(config: DatasetConfig) -> tuple[list[VehicleIdentity], list[SampleRecord]]:
    """Draw identities and the full record list without rendering anything."""
    config.validate()
    rng = np.random.default_rng([config.seed, 0])
    n_ids = config.num_train_ids + config.num_test_ids
    identities = make_identities(n_ids, rng)
    rigs = camera_rigs(config.num_cameras, rng)
    tracks_per_camera = config.images_per_id // config.num_cameras // config.track_length

    records = []
    track_id = 0
    for ident in identities:
        test = ident.id >= config.num_train_ids
        for cam, (h, d) in enumerate(rigs):
            for t in range(tracks_per_camera):
                base = rng.uniform(0.0, 360.0)
                jitter = rng.uniform(-TRACK_JITTER_DEG, TRACK_JITTER_DEG, size=config.track_length)
                query_slot = int(rng.integers(config.track_length)) if test else -1
                for k in range(config.track_length):
                    theta = round(float((base + jitter[k]) % 360.0), 4) % 360.0
                    if test:
                        # one query per identity per camera, taken from its first track
                        split = "query" if (t == 0 and k == query_slot) else "gallery"
                    else:
                        split = "train"
                    name = f"{ident.id:04d}_c{cam}_t{track_id:05d}_{k:02d}.png"
                    records.append(SampleRecord(f"images/{split}/{name}", ident.id, cam, track_id,
                                                theta, h, d, split))
                track_id += 1
    return identities, records


def render_record(identity: VehicleIdentity, record: SampleRecord, index: int, config: DatasetConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 1, index])
    return render_vehicle(identity, record.theta, record.phi, config.image_size, rng)


def _write_tsv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _format_record(r: SampleRecord) -> list[str]:
    return [str(r.id), str(r.camera), str(r.track), f"{r.theta_deg:.4f}", f"{r.H_m:.3f}",
            f"{r.D_m:.3f}", r.split, r.path]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def generate_dataset(config: DatasetConfig, root) -> str:
    """Render the benchmark described by ``config`` under ``root``; return its fingerprint."""
    root = Path(root)
    identities, records = plan_dataset(config)
    try:
        for split in SPLITS:
            (root / "images" / split).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {root}: {exc}") from exc
    by_id = {ident.id: ident for ident in identities}
    for index, record in enumerate(records):
        image = render_record(by_id[record.id], record, index, config)
        Image.fromarray(image).save(root / record.path, optimize=False)

    _write_tsv(root / MANIFEST, MANIFEST_FIELDS, (_format_record(r) for r in records))
    _write_tsv(root / IDENTITIES,
               ("id", "body_hue", "glyph_seed_front", "glyph_seed_side", "glyph_seed_rear",
                "length", "width", "height"),
               ([i.id, f"{i.body_hue:.6f}", i.glyph_seed_front, i.glyph_seed_side,
                 i.glyph_seed_rear, *(f"{x:.6f}" for x in i.aspect)] for i in identities))
    fingerprint = sha256_file(root / MANIFEST)
    (root / FINGERPRINT).write_text(fingerprint + "\n")
    return fingerprint


def read_manifest(root) -> list[SampleRecord]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise DatasetError(f"no manifest at {path}")
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        for line, row in enumerate(reader, start=2):
            try:
                out.append(SampleRecord(row["path"], int(row["id"]), int(row["camera"]),
                                        int(row["track"]), float(row["theta_deg"]),
                                        float(row["H_m"]), float(row["D_m"]), row["split"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise CorruptDatasetError(f"{path}:{line}: malformed record ({exc})") from exc
    return out


def read_identities(root) -> list[VehicleIdentity]:
    out = []
    with open(Path(root) / IDENTITIES, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            out.append(VehicleIdentity(int(row["id"]), float(row["body_hue"]),
                                       int(row["glyph_seed_front"]), int(row["glyph_seed_side"]),
                                       int(row["glyph_seed_rear"]),
                                       (float(row["length"]), float(row["width"]), float(row["height"]))))
    return out


def check_records(records: list[SampleRecord], root=None) -> None:
    """Raise CorruptDatasetError naming the first record that breaks a dataset invariant."""
    train_ids = {r.id for r in records if r.split == "train"}
    tracks: dict[int, tuple[int, int, SampleRecord]] = {}
    for r in records:
        if r.split not in SPLITS:
            raise CorruptDatasetError(f"record {r.path}: unknown split {r.split!r}")
        if r.split != "train" and r.id in train_ids:
            raise CorruptDatasetError(
                f"record {r.path}: identity {r.id} appears in both train and {r.split}")
        owner = tracks.setdefault(r.track, (r.id, r.camera, r))
        if owner[:2] != (r.id, r.camera):
            raise CorruptDatasetError(
                f"record {r.path}: track {r.track} mixes identity/camera {owner[:2]} "
                f"(first seen at {owner[2].path}) with {(r.id, r.camera)}")
        if not (0.0 <= r.theta_deg < 360.0):
            raise CorruptDatasetError(f"record {r.path}: theta_deg {r.theta_deg} out of range")
        if r.D_m <= 0 or r.H_m < 0:
            raise CorruptDatasetError(f"record {r.path}: invalid camera geometry")
        if root is not None and not (Path(root) / r.path).is_file():
            raise CorruptDatasetError(f"record {r.path}: image file missing")


def load_dataset(root) -> tuple[list[SampleRecord], IntegrityReport]:
    root = Path(root)
    records = read_manifest(root)
    check_records(records, root)
    fingerprint = sha256_file(root / MANIFEST)
    stored = root / FINGERPRINT
    if stored.exists() and stored.read_text().strip() != fingerprint:
        raise CorruptDatasetError(f"{stored}: manifest hash does not match the recorded fingerprint")

    collisions = []
    if (root / IDENTITIES).exists():
        seen = {}
        for ident in read_identities(root):
            key = ident.signature()
            if key in seen:
                collisions.append((seen[key], ident.id))
            seen.setdefault(key, ident.id)

    counts = defaultdict(int)
    ids = defaultdict(set)
    for r in records:
        counts[r.split] += 1
        ids[r.split].add(r.id)
    report = IntegrityReport(len(records), dict(counts), {k: len(v) for k, v in ids.items()},
                             fingerprint, collisions)
    return records, report


def load_images(root, records: list[SampleRecord]) -> np.ndarray:
    """Stack the images of ``records`` into a uint8 array of shape (N, S, S, 3)."""
    root = Path(root)
    return np.stack([np.asarray(Image.open(root / r.path).convert("RGB")) for r in records])


def select(records: list[SampleRecord], split: str) -> list[SampleRecord]:
    return [r for r in records if r.split == split]


@dataclass
class ArraySet:
    """In-memory view of one split: images plus aligned metadata arrays."""
    images: np.ndarray
    ids: np.ndarray
    cameras: np.ndarray
    tracks: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    records: list = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_records(cls, root, records: list[SampleRecord]) -> "ArraySet":
        if not records:
            raise DatasetError("empty split")
        return cls(load_images(root, records),
                   np.array([r.id for r in records]),
                   np.array([r.camera for r in records]),
                   np.array([r.track for r in records]),
                   np.array([r.theta for r in records]),
                   np.array([r.phi for r in records]),
                   list(records))

    def subset(self, index) -> "ArraySet":
        index = np.asarray(index)
        return ArraySet(self.images[index], self.ids[index], self.cameras[index], self.tracks[index],
                        self.theta[index], self.phi[index], [self.records[i] for i in index])


def concat(parts: list[ArraySet]) -> ArraySet:
    return ArraySet(*(np.concatenate([getattr(p, k) for p in parts])
                      for k in ("images", "ids", "cameras", "tracks", "theta", "phi")),
                    [r for p in parts for r in p.records])


def load_splits(root) -> dict[str, ArraySet]:
    records, _ = load_dataset(root)
    return {split: ArraySet.from_records(root, select(records, split))
            for split in SPLITS if select(records, split)}


def identity_separability(images: np.ndarray, ids: np.ndarray, seed: int = 0) -> float:
    """Leave-one-out 1-NN identity accuracy on mean image color."""
    feats = images.reshape(len(images), -1, 3).mean(1)
    d = ((feats[:, None] - feats[None]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    return float((ids[d.argmin(1)] == ids).mean())

