"""Synthetic multi-camera group observations with controllable nuisances.

A dataset is built from a catalog of person identities, each a unit-norm
appearance vector.  Group identities own disjoint member rosters; every
group is observed from every camera several times.  Each view perturbs the
roster independently: members go missing with a configurable probability
(at least one always remains), member order may be shuffled, and observed
appearances pick up per-camera bias plus white noise.

Generation is a pure function of ``(config, seed)``; serialization is a
stable JSON layout whose floats round-trip losslessly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

FORMAT_NAME = "gcum-dataset"
FORMAT_VERSION = 1

# Sub-stream selectors hung off the dataset seed, so that independent
# concerns (generation, train/test split) never share draws.
_GENERATE_STREAM = 0
_SPLIT_STREAM = 1


class DatasetFormatError(ValueError):
    """A dataset file is malformed, truncated, or of an unknown version."""


@dataclass(frozen=True)
class GenConfig:
    """Knobs for dataset generation; defaults give the standard benchmark."""

    n_group_identities: int = 40
    members_min: int = 2
    members_max: int = 6
    n_cameras: int = 2
    views_per_group_per_camera: int = 2
    membership_dropout_prob: float = 0.3
    layout_permutation: bool = True
    appearance_noise_std: float = 0.1
    camera_bias_std: float = 0.2
    d_a: int = 32

    def validate(self) -> None:
        if self.n_group_identities < 2:
            raise ValueError("need at least two group identities")
        if self.members_min < 2:
            raise ValueError("groups need at least two members")
        if self.members_max < self.members_min:
            raise ValueError("members_max must be >= members_min")
        if self.n_cameras < 2:
            raise ValueError("cross-camera retrieval needs at least two cameras")
        if self.views_per_group_per_camera < 1:
            raise ValueError("need at least one view per group per camera")
        if not (0.0 <= self.membership_dropout_prob < 1.0):
            raise ValueError("membership_dropout_prob must lie in [0, 1)")
        if self.appearance_noise_std < 0 or self.camera_bias_std < 0:
            raise ValueError("noise levels must be non-negative")
        if self.d_a < 1:
            raise ValueError("appearance dimension must be positive")

    def to_dict(self) -> dict:
        return {
            "n_group_identities": self.n_group_identities,
            "members_per_group": [self.members_min, self.members_max],
            "n_cameras": self.n_cameras,
            "views_per_group_per_camera": self.views_per_group_per_camera,
            "membership_dropout_prob": self.membership_dropout_prob,
            "layout_permutation": self.layout_permutation,
            "appearance_noise_std": self.appearance_noise_std,
            "camera_bias_std": self.camera_bias_std,
            "d_a": self.d_a,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GenConfig":
        lo, hi = doc["members_per_group"]
        cfg = cls(
            n_group_identities=int(doc["n_group_identities"]),
            members_min=int(lo),
            members_max=int(hi),
            n_cameras=int(doc["n_cameras"]),
            views_per_group_per_camera=int(doc["views_per_group_per_camera"]),
            membership_dropout_prob=float(doc["membership_dropout_prob"]),
            layout_permutation=bool(doc["layout_permutation"]),
            appearance_noise_std=float(doc["appearance_noise_std"]),
            camera_bias_std=float(doc["camera_bias_std"]),
            d_a=int(doc["d_a"]),
        )
        cfg.validate()
        return cfg


@dataclass(frozen=True, eq=False)
class Member:
    """One observed person in one view: identity plus observed appearance."""

    identity_id: int
    appearance: np.ndarray


@dataclass(frozen=True, eq=False)
class GroupSample:
    """One view of a group from one camera."""

    group_id: int
    camera_id: int
    members: tuple[Member, ...]


@dataclass(eq=False)
class Dataset:
    seed: int
    config: GenConfig
    catalog: dict[int, np.ndarray]
    samples: list[GroupSample]

    @property
    def d_a(self) -> int:
        return self.config.d_a

    def group_ids(self) -> list[int]:
        return sorted({s.group_id for s in self.samples})

    def group_rosters(self) -> dict[int, tuple[int, ...]]:
        """Member identity sets per group, recovered as the union over views."""
        rosters: dict[int, set[int]] = {}
        for s in self.samples:
            bucket = rosters.setdefault(s.group_id, set())
            bucket.update(m.identity_id for m in s.members)
        return {g: tuple(sorted(pids)) for g, pids in rosters.items()}

    def person_ids(self) -> list[int]:
        return sorted(self.catalog)


def _freeze(vec: np.ndarray) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def generate_dataset(config: GenConfig, seed: int) -> Dataset:
    """Draw a dataset; bit-identical for identical ``(config, seed)``."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_GENERATE_STREAM,)))

    rosters: list[list[int]] = []
    catalog: dict[int, np.ndarray] = {}
    next_person = 0
    for _ in range(config.n_group_identities):
        size = int(rng.integers(config.members_min, config.members_max + 1))
        pids = list(range(next_person, next_person + size))
        next_person += size
        rosters.append(pids)
        for pid in pids:
            raw = rng.normal(size=config.d_a)
            catalog[pid] = _freeze(raw / np.linalg.norm(raw))

    # Biases are always drawn so the stream layout does not depend on the
    # noise knobs; scaling by the std keeps zero-knob datasets exactly clean.
    biases = rng.normal(size=(config.n_cameras, config.d_a)) * config.camera_bias_std

    samples: list[GroupSample] = []
    for gid, roster in enumerate(rosters):
        for cam in range(config.n_cameras):
            for _ in range(config.views_per_group_per_camera):
                keep = rng.random(len(roster)) >= config.membership_dropout_prob
                if not keep.any():
                    keep[0] = True
                pids = [pid for pid, k in zip(roster, keep) if k]
                if config.layout_permutation and len(pids) > 1:
                    order = rng.permutation(len(pids))
                    pids = [pids[i] for i in order]
                members = []
                for pid in pids:
                    noise = rng.normal(size=config.d_a) * config.appearance_noise_std
                    members.append(Member(pid, _freeze(catalog[pid] + biases[cam] + noise)))
                samples.append(GroupSample(gid, cam, tuple(members)))
    return Dataset(seed=seed, config=config, catalog=catalog, samples=samples)


# --------------------------------------------------------------------------
# Serialization


def dataset_to_doc(ds: Dataset) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "seed": ds.seed,
        "d_a": ds.d_a,
        "config": ds.config.to_dict(),
        "catalog": [
            {"identity_id": pid, "appearance": ds.catalog[pid].tolist()}
            for pid in sorted(ds.catalog)
        ],
        "samples": [
            {
                "group_id": s.group_id,
                "camera_id": s.camera_id,
                "members": [
                    {"identity_id": m.identity_id, "appearance": m.appearance.tolist()}
                    for m in s.members
                ],
            }
            for s in ds.samples
        ],
    }


def save_dataset(ds: Dataset, path: str) -> None:
    # json renders floats with repr: the shortest digit string that parses
    # back to the identical double, so the round trip is lossless.
    text = json.dumps(dataset_to_doc(ds), separators=(",", ":"))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.write("\n")


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise DatasetFormatError(f"{where} is missing required key {key!r}")
    return doc[key]


def dataset_from_doc(doc: dict) -> Dataset:
    if not isinstance(doc, dict):
        raise DatasetFormatError("dataset document must be a JSON object")
    fmt = _require(doc, "format", "dataset")
    if fmt != FORMAT_NAME:
        raise DatasetFormatError(f"unknown format {fmt!r}, expected {FORMAT_NAME!r}")
    version = _require(doc, "version", "dataset")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(
            f"unsupported dataset version {version!r}, this build reads version {FORMAT_VERSION}"
        )
    config = GenConfig.from_dict(_require(doc, "config", "dataset"))
    d_a = int(_require(doc, "d_a", "dataset"))
    if d_a != config.d_a:
        raise DatasetFormatError("top-level d_a disagrees with config d_a")

    catalog: dict[int, np.ndarray] = {}
    for entry in _require(doc, "catalog", "dataset"):
        pid = int(_require(entry, "identity_id", "catalog entry"))
        vec = np.asarray(_require(entry, "appearance", "catalog entry"), dtype=np.float64)
        if vec.shape != (d_a,):
            raise DatasetFormatError(f"catalog appearance for identity {pid} has shape {vec.shape}")
        catalog[pid] = _freeze(vec)

    samples: list[GroupSample] = []
    for i, entry in enumerate(_require(doc, "samples", "dataset")):
        gid = int(_require(entry, "group_id", f"sample {i}"))
        cam = int(_require(entry, "camera_id", f"sample {i}"))
        members = []
        raw_members = _require(entry, "members", f"sample {i}")
        if not raw_members:
            raise DatasetFormatError(f"sample {i} has no members")
        for m in raw_members:
            pid = int(_require(m, "identity_id", f"sample {i} member"))
            vec = np.asarray(_require(m, "appearance", f"sample {i} member"), dtype=np.float64)
            if vec.shape != (d_a,):
                raise DatasetFormatError(f"sample {i} member appearance has shape {vec.shape}")
            members.append(Member(pid, _freeze(vec)))
        samples.append(GroupSample(gid, cam, tuple(members)))

    ds = Dataset(seed=int(_require(doc, "seed", "dataset")), config=config, catalog=catalog, samples=samples)
    cameras_per_group: dict[int, set[int]] = {}
    for s in ds.samples:
        cameras_per_group.setdefault(s.group_id, set()).add(s.camera_id)
    for gid, cams in cameras_per_group.items():
        if len(cams) < 2:
            raise DatasetFormatError(f"group {gid} appears under fewer than two cameras")
    return ds


def load_dataset(path: str) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"unparseable dataset file at byte {e.pos}: {e.msg}") from e
    return dataset_from_doc(doc)


# --------------------------------------------------------------------------
# Protocol splits


def split_query_gallery(
    samples: Sequence[GroupSample], query_camera: int
) -> tuple[list[GroupSample], list[GroupSample]]:
    """Cross-camera retrieval split: queries from one camera, rest gallery."""
    queries = [s for s in samples if s.camera_id == query_camera]
    gallery = [s for s in samples if s.camera_id != query_camera]
    if not queries:
        raise ValueError(f"no samples from query camera {query_camera}")
    gallery_groups = {s.group_id for s in gallery}
    for s in queries:
        if s.group_id not in gallery_groups:
            raise ValueError(f"group {s.group_id} has no gallery sample outside camera {query_camera}")
    return queries, gallery


def split_train_test(ds: Dataset, train_fraction: float = 0.7) -> tuple[list[int], list[int]]:
    """Identity-level split of group ids, deterministic in the dataset seed."""
    if not (0.0 < train_fraction < 1.0):
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    ids = ds.group_ids()
    if len(ids) < 2:
        raise ValueError("need at least two group identities to split")
    rng = np.random.default_rng(np.random.SeedSequence(ds.seed, spawn_key=(_SPLIT_STREAM,)))
    order = rng.permutation(len(ids))
    n_train = int(round(len(ids) * train_fraction))
    n_train = min(max(n_train, 1), len(ids) - 1)
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])
    return train, test
