"""Dataset manifests, split protocols, image loading, and prompt placement.

A dataset is described by a manifest CSV with columns
path,mask_path,patient_id,category,split (trailing columns may be empty).
How the manifest becomes train/val/test depends on the dataset:

- busi           random 7:1:2 by image, floor-based counts
- camus          split column gives train/test; 10% of train patients
                 (grouped, never split across sides) move to val
- tn3k, tg3k     official stem lists in <dataset>_<split>.txt files
- ddti, udiat, hmcqu   evaluation-only, everything goes to test

All shuffles come from a seeded generator, and every protocol must assign
each record to exactly one side.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

DATASET_IDS = ("busi", "camus", "tn3k", "tg3k", "ddti", "udiat", "hmcqu")
FILE_SPLIT_DATASETS = ("tn3k", "tg3k")
TEST_ONLY_DATASETS = ("ddti", "udiat", "hmcqu")

MANIFEST_COLUMNS = ("path", "mask_path", "patient_id", "category", "split")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    path: str
    mask_path: str
    patient_id: str = ""
    category: str = ""
    split: str = ""


@dataclass
class SplitPlan:
    dataset: str
    train: list[SampleRecord] = field(default_factory=list)
    val: list[SampleRecord] = field(default_factory=list)
    test: list[SampleRecord] = field(default_factory=list)

    def sides(self) -> dict[str, list[SampleRecord]]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def check(self, records: list[SampleRecord]) -> None:
        assigned = self.train + self.val + self.test
        if len(assigned) != len(records):
            raise DataError(
                f"{self.dataset}: assigned {len(assigned)} of {len(records)} records"
            )
        seen = set()
        for rec in assigned:
            if rec.path in seen:
                raise DataError(f"{self.dataset}: {rec.path} assigned to two sides")
            seen.add(rec.path)
        if seen != {r.path for r in records}:
            raise DataError(f"{self.dataset}: split sides do not cover the manifest")


def read_manifest(path: str | Path) -> list[SampleRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[:2] != ["path", "mask_path"]:
            raise DataError(
                f"manifest {path} must start with columns path,mask_path "
                f"(got {reader.fieldnames})"
            )
        records = []
        for row in reader:
            records.append(
                SampleRecord(
                    path=row["path"],
                    mask_path=row["mask_path"],
                    patient_id=row.get("patient_id") or "",
                    category=row.get("category") or "",
                    split=row.get("split") or "",
                )
            )
    if not records:
        raise DataError(f"manifest {path} is empty")
    return records


def _ratio_split(
    dataset: str, records: list[SampleRecord], seed: int
) -> SplitPlan:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_train = math.floor(0.7 * len(records))
    n_val = math.floor(0.1 * len(records))
    plan = SplitPlan(dataset)
    for rank, idx in enumerate(order):
        rec = records[int(idx)]
        if rank < n_train:
            plan.train.append(rec)
        elif rank < n_train + n_val:
            plan.val.append(rec)
        else:
            plan.test.append(rec)
    return plan


def _column_patient_split(
    dataset: str, records: list[SampleRecord], seed: int
) -> SplitPlan:
    plan = SplitPlan(dataset)
    train_pool = []
    for rec in records:
        if rec.split == "train":
            train_pool.append(rec)
        elif rec.split == "test":
            plan.test.append(rec)
        else:
            raise DataError(
                f"{dataset}: record {rec.path} has split={rec.split!r}, "
                f"expected train or test"
            )
    patients = sorted({r.patient_id for r in train_pool})
    if "" in patients:
        raise DataError(f"{dataset}: train records need patient ids for the val split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(patients))
    n_val = math.floor(0.1 * len(patients))
    val_patients = {patients[int(i)] for i in order[:n_val]}
    for rec in train_pool:
        (plan.val if rec.patient_id in val_patients else plan.train).append(rec)
    return plan


def _file_split(
    dataset: str, records: list[SampleRecord], split_dir: str | Path
) -> SplitPlan:
    split_dir = Path(split_dir)
    stem_to_side: dict[str, str] = {}
    for side in ("train", "val", "test"):
        list_path = split_dir / f"{dataset}_{side}.txt"
        if not list_path.exists():
            continue
        for line in list_path.read_text().splitlines():
            stem = line.strip()
            if not stem:
                continue
            if stem in stem_to_side:
                raise DataError(
                    f"{dataset}: stem {stem} listed in both "
                    f"{stem_to_side[stem]} and {side}"
                )
            stem_to_side[stem] = side
    if not stem_to_side:
        raise DataError(f"{dataset}: no split lists found under {split_dir}")
    plan = SplitPlan(dataset)
    for rec in records:
        stem = Path(rec.path).stem
        side = stem_to_side.get(stem)
        if side is None:
            raise DataError(f"{dataset}: {rec.path} appears in no split list")
        getattr(plan, side).append(rec)
    return plan


def build_splits(
    dataset: str,
    records: list[SampleRecord],
    seed: int = 0,
    split_dir: str | Path | None = None,
) -> SplitPlan:
    if dataset not in DATASET_IDS:
        raise DataError(f"unknown dataset {dataset!r}, expected one of {DATASET_IDS}")
    if dataset == "busi":
        plan = _ratio_split(dataset, records, seed)
    elif dataset == "camus":
        plan = _column_patient_split(dataset, records, seed)
    elif dataset in FILE_SPLIT_DATASETS:
        if split_dir is None:
            raise DataError(f"{dataset} needs split_dir pointing at its stem lists")
        plan = _file_split(dataset, records, split_dir)
    else:
        plan = SplitPlan(dataset, test=list(records))
    plan.check(records)
    return plan


def sample_point_prompt(
    mask: np.ndarray, rng: np.random.Generator | None = None
) -> tuple[int, int]:
    """Pick the prompt click for a mask: (x, y) pixel coordinates.

    The centroid of the foreground if it lands on foreground, otherwise the
    foreground pixel nearest the centroid. Deterministic; the rng argument
    only exists so jittered policies can share the signature.
    """
    fg = np.argwhere(mask)
    if fg.size == 0:
        raise DataError("cannot place a point prompt on an empty mask")
    cy, cx = fg.mean(axis=0)
    iy, ix = int(round(cy)), int(round(cx))
    if 0 <= iy < mask.shape[0] and 0 <= ix < mask.shape[1] and mask[iy, ix]:
        return ix, iy
    d2 = (fg[:, 0] - cy) ** 2 + (fg[:, 1] - cx) ** 2
    best = fg[int(np.argmin(d2))]
    return int(best[1]), int(best[0])


def _read_array(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    import matplotlib.image as mpimg

    return mpimg.imread(path)


def load_pair(
    record: SampleRecord, input_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Read one record as (image float32 in [0,1], mask bool), resized."""
    image = np.asarray(_read_array(record.path), dtype=np.float64)
    if image.ndim == 3:
        image = image[..., :3].mean(axis=-1)
    if image.max() > 1.0:
        image = image / 255.0
    mask = np.asarray(_read_array(record.mask_path), dtype=np.float64)
    if mask.ndim == 3:
        mask = mask[..., :3].mean(axis=-1)
    if image.shape != (input_size, input_size):
        image = ndimage.zoom(
            image,
            (input_size / image.shape[0], input_size / image.shape[1]),
            order=1,
        )
    if mask.shape != (input_size, input_size):
        mask = ndimage.zoom(
            mask,
            (input_size / mask.shape[0], input_size / mask.shape[1]),
            order=0,
        )
    threshold = mask.max() / 2 if mask.max() > 0 else 0.5
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask > threshold
