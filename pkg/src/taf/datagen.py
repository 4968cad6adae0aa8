"""Synthetic activity videos with known ground truth, feature/label file
formats, and reproducible train/test splits."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .types import IGNORE, FeatureSequence, Segmentation, ValidationError

BINARY_MAGIC = b"TAFV1"


@dataclass(frozen=True)
class SynthConfig:
    num_videos: int = 20
    num_actions: int = 5
    input_dim: int = 16
    min_frames: int = 100
    max_frames: int = 200
    cluster_sep: float = 6.0
    noise_sigma: float = 1.0
    permute_prob: float = 0.0
    missing_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_videos < 1:
            raise ValidationError("num_videos must be >= 1")
        if self.num_actions < 2:
            raise ValidationError("num_actions must be >= 2")
        if self.min_frames < self.num_actions or self.max_frames < self.min_frames:
            raise ValidationError("frame range must satisfy K <= min <= max")
        for name in ("permute_prob", "missing_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if self.cluster_sep < 0 or self.noise_sigma < 0:
            raise ValidationError("cluster_sep and noise_sigma must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class Video:
    features: FeatureSequence
    labels: Segmentation
    activity: str = "synthetic"

    @property
    def video_id(self):
        return self.features.video_id


@dataclass
class Dataset:
    videos: list
    num_actions: dict = field(default_factory=dict)  # activity -> K

    def __len__(self):
        return len(self.videos)

    def __iter__(self):
        return iter(self.videos)

    def subset(self, ids) -> "Dataset":
        by_id = {v.video_id: v for v in self.videos}
        return Dataset([by_id[i] for i in ids], dict(self.num_actions))


def _draw_centers(cfg: SynthConfig, rng) -> np.ndarray:
    # points on a sphere of radius r have expected pairwise distance ~ r * sqrt(2)
    radius = cfg.cluster_sep / np.sqrt(2.0) * 1.25
    for _ in range(1000):
        dirs = rng.normal(size=(cfg.num_actions, cfg.input_dim))
        centers = radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        if dist[np.triu_indices(cfg.num_actions, 1)].min() >= cfg.cluster_sep:
            return centers
        radius *= 1.05
    raise ValidationError("could not place cluster centers at the requested separation")


def _segment_lengths(total: int, parts: int, rng) -> np.ndarray:
    weights = rng.uniform(0.5, 1.5, size=parts)
    lengths = np.maximum(1, np.floor(weights / weights.sum() * total)).astype(int)
    lengths[-1] += total - lengths.sum()
    while lengths[-1] < 1:
        j = int(np.argmax(lengths[:-1]))
        lengths[j] -= 1
        lengths[-1] += 1
    return lengths


def _draw_video(cfg: SynthConfig, centers, rng, index):
    k = cfg.num_actions
    order = np.arange(k)
    if rng.random() < cfg.permute_prob:
        order = rng.permutation(k)
    keep = [order[0]] + [a for a in order[1:] if rng.random() >= cfg.missing_prob]
    order = np.array(keep)
    n_frames = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
    lengths = _segment_lengths(n_frames, len(order), rng)
    labels = np.repeat(order, lengths)
    feats = centers[labels] + cfg.noise_sigma * rng.normal(size=(n_frames, cfg.input_dim))
    vid = f"video_{index:04d}"
    return Video(FeatureSequence(feats, vid), Segmentation(labels))


def generate(cfg: SynthConfig) -> Dataset:
    """Draw a dataset; deterministic in ``cfg.seed``.

    When ``permute_prob > 0`` the corpus is redrawn (with a bumped seed
    stream) until at least one video departs from the canonical order.
    """
    for attempt in range(1000):
        root = np.random.SeedSequence([cfg.seed, attempt])
        center_seed, *video_seeds = root.spawn(cfg.num_videos + 1)
        centers = _draw_centers(cfg, np.random.default_rng(center_seed))
        videos = [_draw_video(cfg, centers, np.random.default_rng(s), i)
                  for i, s in enumerate(video_seeds)]
        if cfg.permute_prob == 0 or any(
                list(v.labels.action_order) != sorted(v.labels.action_order) for v in videos):
            return Dataset(videos, {"synthetic": cfg.num_actions})
    raise ValidationError("could not draw a permuted video; raise permute_prob")


# ----------------------------------------------------------------------------
# file formats


def write_features(seq, path) -> None:
    """CSV (one frame per row) for ``.csv`` paths, binary ``TAFV1`` otherwise."""
    frames = seq.frames if isinstance(seq, FeatureSequence) else np.asarray(seq, dtype=np.float64)
    path = Path(path)
    if path.suffix.lower() == ".csv":
        np.savetxt(path, frames, delimiter=",", fmt="%.17g")
        return
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<II", *frames.shape))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_features(path, video_id: Optional[str] = None, expected_dim: Optional[int] = None) -> FeatureSequence:
    path = Path(path)
    video_id = video_id if video_id is not None else path.stem
    if path.suffix.lower() == ".csv":
        rows = []
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                if rows and len(row) != len(rows[0]):
                    raise ValidationError(f"{path}: ragged row {lineno} "
                                          f"({len(row)} values, expected {len(rows[0])})")
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise ValidationError(f"{path}: row {lineno}: {exc}") from exc
        if not rows:
            raise ValidationError(f"{path}: no frames")
        frames = np.array(rows)
    else:
        data = path.read_bytes()
        if data[:5] != BINARY_MAGIC:
            raise ValidationError(f"{path}: bad magic")
        if len(data) < 13:
            raise ValidationError(f"{path}: unexpected EOF")
        n_frames, dim = struct.unpack_from("<II", data, 5)
        need = 13 + 4 * n_frames * dim
        if len(data) < need:
            raise ValidationError(f"{path}: unexpected EOF")
        frames = np.frombuffer(data, dtype="<f4", count=n_frames * dim, offset=13)
        frames = frames.reshape(n_frames, dim).astype(np.float64)
    if not np.all(np.isfinite(frames)):
        raise ValidationError(f"{path}: non-finite feature values")
    if expected_dim is not None and frames.shape[1] != expected_dim:
        raise ValidationError(f"{path}: dimension mismatch ({frames.shape[1]} != {expected_dim})")
    return FeatureSequence(frames, video_id)


def write_labels(labels, path) -> None:
    labels = labels.framewise if isinstance(labels, Segmentation) else labels
    with open(path, "w") as fh:
        for lab in labels:
            fh.write("IGNORE\n" if lab == IGNORE else f"{int(lab)}\n")


def read_labels(path) -> np.ndarray:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.strip()
            if not tok:
                continue
            if tok == "IGNORE":
                out.append(IGNORE)
                continue
            try:
                val = int(tok)
            except ValueError:
                raise ValidationError(f"{path}: line {lineno}: cannot parse label {tok!r}") from None
            if val < 0:
                raise ValidationError(f"{path}: line {lineno}: negative label {val}")
            out.append(val)
    return np.array(out, dtype=np.int64)


# ----------------------------------------------------------------------------
# dataset directories
#
#   <root>/manifest.json        {"videos": [{"id", "activity"}], "num_actions": {activity: K}}
#   <root>/features/<id>.tafv
#   <root>/labels/<id>.txt


def save_dataset(dataset: Dataset, root) -> None:
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for v in dataset.videos:
        write_features(v.features, root / "features" / f"{v.video_id}.tafv")
        if v.labels is not None:
            write_labels(v.labels, root / "labels" / f"{v.video_id}.txt")
        entries.append({"id": v.video_id, "activity": v.activity})
    manifest = {"videos": entries, "num_actions": dataset.num_actions}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(root, require_labels=False) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path} not found")
    manifest = json.loads(manifest_path.read_text())
    videos = []
    dim = None
    for entry in manifest["videos"]:
        vid = entry["id"]
        feats = read_features(root / "features" / f"{vid}.tafv", vid, expected_dim=dim)
        dim = feats.dim
        label_path = root / "labels" / f"{vid}.txt"
        labels = None
        if label_path.exists():
            labels = Segmentation(read_labels(label_path))
            if len(labels) != feats.num_frames:
                raise ValidationError(f"{vid}: {len(labels)} labels for {feats.num_frames} frames")
        elif require_labels:
            raise FileNotFoundError(f"{label_path} not found")
        videos.append(Video(feats, labels, entry.get("activity", "default")))
    return Dataset(videos, {k: int(v) for k, v in manifest["num_actions"].items()})


def split(dataset: Dataset, train_fraction: float = 0.8, seed: int = 0,
          manifest_path=None) -> tuple:
    """Seeded shuffle then cut; optionally writes the id lists as JSON."""
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError("train_fraction must lie in (0, 1)")
    ids = [v.video_id for v in dataset.videos]
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    train_ids = [ids[i] for i in order[:n_train]]
    test_ids = [ids[i] for i in order[n_train:]]
    if manifest_path is not None:
        Path(manifest_path).write_text(
            json.dumps({"seed": seed, "train": train_ids, "test": test_ids}, indent=2) + "\n")
    return dataset.subset(train_ids), dataset.subset(test_ids)
