"""On-disk dataset layout: ``<root>/<subject_id>/<view>.rvol`` plus a labels CSV."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .volume import Volume, read_volume, write_volume

VIEWS = ("sagittal", "coronal", "axial")
TASKS = ("abn", "acl", "men")


@dataclass
class SubjectRecord:
    """One subject as loaded from disk or produced by the phantom generator."""

    subject_id: str
    views: dict[str, Volume]
    labels: dict[str, bool]

    @property
    def healthy(self) -> bool:
        return not self.labels["abn"]


def view_path(root, subject_id: str, view: str) -> Path:
    return Path(root) / subject_id / f"{view}.rvol"


def persona_path(root, subject_id: str, view: str) -> Path:
    return Path(root) / subject_id / f"{view}.persona.rvol"


def labels_path(root) -> Path:
    return Path(root) / "labels.csv"


def write_labels(root, labels_by_subject: dict[str, dict[str, bool]]) -> None:
    """Write the labels CSV (header subject_id,abn,acl,men; values 0/1), sorted by id."""
    path = labels_path(root)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id"] + list(TASKS))
        for sid in sorted(labels_by_subject):
            row = labels_by_subject[sid]
            writer.writerow([sid] + [int(bool(row[t])) for t in TASKS])


def read_labels(root) -> dict[str, dict[str, bool]]:
    path = labels_path(root)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["subject_id"] + list(TASKS)
        if reader.fieldnames != expected:
            raise ValueError(f"bad labels header {reader.fieldnames}, expected {expected}")
        out = {}
        for row in reader:
            out[row["subject_id"]] = {t: bool(int(row[t])) for t in TASKS}
    return out


def write_subject(root, record: SubjectRecord) -> None:
    subj_dir = Path(root) / record.subject_id
    subj_dir.mkdir(parents=True, exist_ok=True)
    for view in VIEWS:
        write_volume(record.views[view], subj_dir / f"{view}.rvol")


def load_dataset(root, with_personas: bool = False) -> list[SubjectRecord]:
    """Load all subjects listed in the labels CSV, sorted by subject id."""
    labels = read_labels(root)
    records = []
    for sid in sorted(labels):
        views = {view: read_volume(view_path(root, sid, view)) for view in VIEWS}
        if with_personas:
            for view in VIEWS:
                views[f"{view}.persona"] = read_volume(persona_path(root, sid, view))
        records.append(SubjectRecord(sid, views, labels[sid]))
    return records


def load_personas(root, subject_id: str) -> dict[str, Volume]:
    return {view: read_volume(persona_path(root, subject_id, view)) for view in VIEWS}
