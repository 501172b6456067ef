"""Datasets, recording-disjoint splits, Poisson sampling and synthetic data."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import features as fe


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    id: str
    recording_id: str
    features: np.ndarray  # (n_mels, frames)
    label: int
    privileged: np.ndarray | None = None


@dataclass
class Dataset:
    """Immutable collection of examples.

    ``prenormalized`` marks features that already went through the front-end
    (fixed ``L`` frames); otherwise they are raw log-Mel spectrograms.
    """

    examples: list[Example]
    K: int
    prenormalized: bool = False
    class_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        ids = [e.id for e in self.examples]
        if len(set(ids)) != len(ids):
            raise ValueError("example ids are not unique")
        counts = np.zeros(self.K, dtype=np.int64)
        d_m = None
        for e in self.examples:
            if not 0 <= e.label < self.K:
                raise ValueError(f"{e.id}: label {e.label} outside 0..{self.K - 1}")
            counts[e.label] += 1
            if e.privileged is not None:
                if d_m is None:
                    d_m = e.privileged.shape[0]
                elif e.privileged.shape[0] != d_m:
                    raise ValueError(f"{e.id}: privileged dimension {e.privileged.shape[0]} != {d_m}")
        self.class_counts = counts
        self._index = {e.id: i for i, e in enumerate(self.examples)}

    def __len__(self):
        return len(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.examples]

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples], dtype=np.int64)

    @property
    def multimodal(self) -> bool:
        return bool(self.examples) and all(e.privileged is not None for e in self.examples)

    @property
    def privileged_dim(self) -> int:
        return self.examples[0].privileged.shape[0] if self.multimodal else 0

    def subset(self, ids: Sequence[str]) -> "Dataset":
        return Dataset([self.examples[self._index[i]] for i in ids], self.K, self.prenormalized)

    def by_id(self, id_: str) -> Example:
        return self.examples[self._index[id_]]

    def without_privileged(self) -> "Dataset":
        ex = [Example(e.id, e.recording_id, e.features, e.label, None) for e in self.examples]
        return Dataset(ex, self.K, self.prenormalized)


@dataclass(frozen=True)
class SplitManifest:
    priv_ids: tuple[str, ...]
    aux_ids: tuple[str, ...]
    disjointness_level: str = "recording"

    def to_json(self) -> str:
        return json.dumps(
            {"disjointness_level": self.disjointness_level, "priv_ids": list(self.priv_ids), "aux_ids": list(self.aux_ids)},
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(tuple(d["priv_ids"]), tuple(d["aux_ids"]), d.get("disjointness_level", "recording"))


def split(data: Dataset, n_priv: int, n_aux: int, seed: int) -> SplitManifest:
    """Recording-disjoint split into private and auxiliary id sets.

    Recording groups are shuffled, then handed to the private side until it
    holds at least ``n_priv`` examples and to the auxiliary side until it holds
    at least ``n_aux``. Leftover groups are dropped.
    """
    groups: dict[str, list[str]] = {}
    for e in data.examples:
        groups.setdefault(e.recording_id, []).append(e.id)
    keys = list(groups)
    order = np.random.default_rng(seed).permutation(len(keys))

    priv: list[str] = []
    aux: list[str] = []
    for j in order:
        members = groups[keys[j]]
        if len(priv) < n_priv:
            priv.extend(members)
        elif len(aux) < n_aux:
            aux.extend(members)
        else:
            break
    if len(priv) < n_priv or len(aux) < n_aux:
        raise InsufficientDataError(
            f"wanted {n_priv} private + {n_aux} auxiliary examples, got {len(priv)} + {len(aux)}"
        )
    return SplitManifest(tuple(priv), tuple(aux))


def held_out_ids(data: Dataset, manifest: SplitManifest) -> list[str]:
    """Ids in neither side of the manifest (used as an evaluation set)."""
    used = set(manifest.priv_ids) | set(manifest.aux_ids)
    return [e.id for e in data.examples if e.id not in used]


def poisson_sample(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Include each of ``n`` indices independently with probability ``q``."""
    if not 0 < q <= 1:
        raise ValueError("q must lie in (0, 1]")
    return np.flatnonzero(rng.random(n) < q)


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    K: int = 3
    proportions: tuple[float, ...] = (0.80, 0.17, 0.03)
    n: int = 6000
    n_mels: int = 40
    L: int = 100
    d_m: int = 3
    separation: float = 0.15  # s
    rho: float = 0.9
    # nuisance terms of the raw log-Mel-like features; these are what DSAF removes
    level_mean: float = -10.0
    level_std: float = 0.5
    gain_std: float = 0.2
    frame_jitter: int = 10
    examples_per_recording: int = 1


def class_counts_from_proportions(proportions: Sequence[float], n: int) -> np.ndarray:
    """Largest-remainder rounding of ``n * proportions``; ties go to the lower index."""
    p = np.asarray(proportions, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"proportions sum to {p.sum()!r}, not 1")
    if np.any(p < 0):
        raise ValueError("negative proportion")
    exact = p * n
    counts = np.floor(exact + 1e-9).astype(np.int64)
    remainder = n - counts.sum()
    frac = exact - counts
    order = sorted(range(len(p)), key=lambda k: (-frac[k], k))
    for k in order[:remainder]:
        counts[k] += 1
    return counts


def synth_generate(spec: SynthSpec, seed: int) -> Dataset:
    """Imbalanced synthetic dataset of raw log-Mel-like matrices.

    Each utterance is ``level + gain * (template[y] + N(0, 1))`` over a
    random number of frames, where the class templates are i.i.d. normal
    patterns scaled by ``separation``. The privileged vector is a one-hot
    latent attribute equal to the label with probability ``rho``.
    """
    if len(spec.proportions) != spec.K:
        raise ValueError("need one proportion per class")
    if spec.d_m and spec.d_m < spec.K:
        raise ValueError("d_m must be 0 or at least K")
    counts = class_counts_from_proportions(spec.proportions, spec.n)
    rng = np.random.default_rng(seed)

    max_frames = spec.L + spec.frame_jitter
    templates = spec.separation * rng.standard_normal((spec.K, spec.n_mels, max_frames))
    labels = rng.permutation(np.repeat(np.arange(spec.K), counts))

    examples = []
    for i, y in enumerate(labels):
        frames = spec.L + (int(rng.integers(-spec.frame_jitter, spec.frame_jitter + 1)) if spec.frame_jitter else 0)
        level = spec.level_mean + spec.level_std * rng.standard_normal()
        gain = float(np.exp(spec.gain_std * rng.standard_normal()))
        noise = rng.standard_normal((spec.n_mels, frames))
        feats = level + gain * (templates[y, :, :frames] + noise)
        priv = None
        if spec.d_m:
            attr = int(y) if rng.random() < spec.rho else int(rng.integers(spec.d_m))
            priv = np.zeros(spec.d_m)
            priv[attr] = 1.0
        rec = f"rec{i // spec.examples_per_recording:06d}"
        examples.append(Example(f"utt{i:06d}", rec, feats, int(y), priv))
    return Dataset(examples, spec.K, prenormalized=False)


# --------------------------------------------------------------------------
# manifests on disk


def write_manifest(data: Dataset, path: str | Path, feature_dir: str | Path) -> None:
    """Write DSF1 feature files plus a line-delimited dataset manifest.

    Feature paths are stored relative to the manifest's directory.
    """
    path = Path(path)
    feature_dir = Path(feature_dir)
    feature_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"#K={data.K} prenormalized={int(data.prenormalized)}\n")
        w = csv.writer(fh, lineterminator="\n")
        for e in data.examples:
            fpath = feature_dir / f"{e.id}.dsf"
            fe.write_features(fpath, e.features)
            priv = "" if e.privileged is None else ";".join(repr(float(v)) for v in e.privileged)
            w.writerow([e.id, e.recording_id, e.label, str(fpath.relative_to(path.parent)), priv])


def read_manifest(path: str | Path, K: int | None = None) -> Dataset:
    path = Path(path)
    examples = []
    header_k = None
    prenorm = False
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    rows = []
    for line in lines:
        if line.startswith("#"):
            for tok in line[1:].split():
                key, _, val = tok.partition("=")
                if key == "K":
                    header_k = int(val)
                elif key == "prenormalized":
                    prenorm = bool(int(val))
        elif line.strip():
            rows.append(line)
    for id_, rec, label, fpath, priv in csv.reader(rows):
        feats = fe.read_features(path.parent / fpath)
        pv = np.array([float(v) for v in priv.split(";")]) if priv else None
        examples.append(Example(id_, rec, feats, int(label), pv))
    K = K or header_k or (max(e.label for e in examples) + 1)
    return Dataset(examples, K, prenormalized=prenorm)
