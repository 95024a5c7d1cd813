"""Which channels does viewpoint attention emphasize for each viewpoint class?

Attention weights of one stage are averaged per viewpoint class, each channel
gets the face label (front / side / rear) whose class mean is largest, and
the emphasized (class, channel) pairs are checked against face visibility.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .attention import ContractViolation
from .data import ArraySet
from .geometry import FACES, VIEWPOINT_CLASSES, Face, ViewpointClass, class_visible_faces, viewpoint_class
from .model import ReIDModel, embed_images

EMPHASIS_THRESHOLD = 0.5

# classes whose means decide the face label of a channel, in tie-break order
LABEL_CLASSES = {Face.FRONT: ViewpointClass.FRONT, Face.SIDE: ViewpointClass.SIDE, Face.REAR: ViewpointClass.REAR}


@dataclass
class AttentionProfile:
    stage_index: int
    means: dict[ViewpointClass, np.ndarray | None]
    counts: dict[ViewpointClass, int]
    samples_per_class: int

    @property
    def num_channels(self) -> int:
        return next(len(m) for m in self.means.values() if m is not None)


@dataclass
class FaceLabels:
    labels: list[Face]
    ties: int = 0

    def __len__(self):
        return len(self.labels)


@dataclass
class ConsistencyResult:
    score: float | None
    emphasized: int
    consistent: int
    base_rate: float | None
    threshold: float = EMPHASIS_THRESHOLD
    per_class: dict = field(default_factory=dict)


def sample_by_class(thetas, samples_per_class: int, seed: int = 0) -> dict[ViewpointClass, np.ndarray]:
    classes = np.array([viewpoint_class(t).value for t in np.asarray(thetas)])
    out = {}
    for k, cls in enumerate(VIEWPOINT_CLASSES):
        pool = np.flatnonzero(classes == cls.value)
        n = min(samples_per_class, len(pool))
        rng = np.random.default_rng([seed, k])
        out[cls] = np.sort(rng.choice(pool, n, replace=False)) if n else pool[:0]
    return out


@torch.no_grad()
def average_attention_by_class(model: ReIDModel, data: ArraySet, stage_index: int = -1,
                               samples_per_class: int = 100, seed: int = 0) -> AttentionProfile:
    """Mean attentive weights of one stage for each of the five viewpoint classes."""
    stages = len(model.config.channels)
    stage = stage_index % stages
    groups = sample_by_class(data.theta, samples_per_class, seed)
    means, counts = {}, {}
    for cls, idx in groups.items():
        counts[cls] = len(idx)
        if not len(idx):
            means[cls] = None
            continue
        _, views = embed_images(model, data.images[idx], return_viewpoint=True)
        v = torch.from_numpy(views).to(model.embed.weight.dtype)
        weights = model.attention_maps(v)[stage].double().numpy()
        means[cls] = weights.mean(axis=0)
    return AttentionProfile(stage, means, counts, samples_per_class)


def assign_face_labels(profile: AttentionProfile) -> FaceLabels:
    """Per channel, the face whose single-face class has the largest mean weight."""
    missing = [c.value for c in LABEL_CLASSES.values() if profile.means.get(c) is None]
    if missing:
        raise ContractViolation(f"profile lacks samples for classes: {', '.join(missing)}")
    stacked = np.stack([profile.means[c] for c in LABEL_CLASSES.values()])
    winners = stacked.argmax(axis=0)
    ties = int(((stacked == stacked.max(axis=0)).sum(axis=0) > 1).sum())
    return FaceLabels([FACES[w] for w in winners], ties)


def emphasis_consistency_score(profile: AttentionProfile, labels: FaceLabels,
                               threshold: float = EMPHASIS_THRESHOLD,
                               visible=class_visible_faces) -> ConsistencyResult:
    """Fraction of emphasized (class, channel) pairs whose channel face is visible in that class.

    ``base_rate`` is the expected score if the same emphasized pairs carried
    labels drawn independently from the observed label frequencies.
    """
    freq = {f: 0.0 for f in FACES}
    for f in labels.labels:
        freq[f] += 1.0 / len(labels)
    emphasized = consistent = 0
    expected = 0.0
    per_class = {}
    for cls in VIEWPOINT_CLASSES:
        means = profile.means.get(cls)
        if means is None:
            continue
        faces = visible(cls)
        hot = np.flatnonzero(means > threshold)
        ok = sum(labels.labels[c] in faces for c in hot)
        per_class[cls.value] = (len(hot), int(ok))
        emphasized += len(hot)
        consistent += ok
        expected += len(hot) * sum(freq[f] for f in faces)
    if emphasized == 0:
        return ConsistencyResult(None, 0, 0, None, threshold, per_class)
    return ConsistencyResult(consistent / emphasized, emphasized, consistent, expected / emphasized,
                             threshold, per_class)


def select_channels(num_channels: int, count: int = 40, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(num_channels, min(count, num_channels), replace=False))


FACE_COLORS = {Face.FRONT: "tab:blue", Face.SIDE: "tab:green", Face.REAR: "tab:red"}


def plot_attention_distribution(profile: AttentionProfile, labels: FaceLabels, out_path,
                                count: int = 40, seed: int = 0) -> np.ndarray:
    """Line plot of class-mean weights over a seeded channel subsample; returns the channels."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    channels = select_channels(profile.num_channels, count, seed)
    x = np.arange(len(channels))
    fig, ax = plt.subplots(figsize=(12, 4))
    for cls in VIEWPOINT_CLASSES:
        means = profile.means.get(cls)
        if means is not None:
            ax.plot(x, means[channels], marker="o", ms=3, lw=1, label=f"{cls.value} (n={profile.counts[cls]})")
    ax.axhline(EMPHASIS_THRESHOLD, color="gray", ls="--", lw=0.8)
    for xi, c in zip(x, channels):
        ax.axvspan(xi - 0.5, xi + 0.5, color=FACE_COLORS[labels.labels[c]], alpha=0.12, lw=0)
    ax.set_xticks(x)
    ax.set_xticklabels([str(c) for c in channels], rotation=90, fontsize=7)
    for tick, c in zip(ax.get_xticklabels(), channels):
        tick.set_color(FACE_COLORS[labels.labels[c]])
    ax.set_xlabel("channel (background: face label; blue front, green side, red rear)")
    ax.set_ylabel("mean attentive weight")
    ax.set_title(f"stage {profile.stage_index + 1} attention by viewpoint class")
    ax.legend(fontsize=7, ncol=5, loc="upper center")
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return channels


def write_profile_table(profile: AttentionProfile, labels: FaceLabels, path) -> None:
    header = ["channel"] + [c.value for c in VIEWPOINT_CLASSES] + ["label"]
    lines = ["\t".join(header),
             "# counts\t" + "\t".join(str(profile.counts[c]) for c in VIEWPOINT_CLASSES) + "\t-"]
    for ch in range(profile.num_channels):
        vals = [("nan" if profile.means[c] is None else f"{profile.means[c][ch]:.6f}") for c in VIEWPOINT_CLASSES]
        lines.append("\t".join([str(ch), *vals, labels.labels[ch].value]))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")
