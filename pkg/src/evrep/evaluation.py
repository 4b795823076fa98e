"""Zero-shot recognition benchmarking across representation kinds.

One record is produced per test sample; unparseable or failed responses
count as incorrect (never dropped). Reports carry one row per
(backend, kind, dataset) with the best accuracy per (backend, dataset)
flagged, plus run metadata for reproducibility audits.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .errors import (
    BackendError,
    EmptyRecords,
    MissingCheckpoint,
    MissingExternalFrames,
)
from .events import DatasetIndex, load_events_file
from .generator import Generator, crop_to_record, pad_to_grid
from .llm import parse_prediction, prompt_sha256, recognition_prompt, recognize
from .representation import (
    REPRESENTATION_KINDS,
    RepImage,
    encode_event_frame,
    encode_tencode,
    load_rep_image,
)


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    true_label: str
    kind: str
    response_text: str
    predicted: str | None
    correct: bool
    backend: str = ""
    dataset: str = ""
    note: str = ""


@dataclass(frozen=True)
class ReportRow:
    backend: str
    kind: str
    dataset: str
    accuracy_pct: float
    total: int
    unknown: int
    best_flag: bool = False


@dataclass
class AccuracyReport:
    rows: list[ReportRow]
    metadata: dict = field(default_factory=dict)


def make_record(sample_id, true_label, kind, response_text, class_list, backend="", dataset="", note="") -> EvalRecord:
    predicted = parse_prediction(response_text, class_list) if response_text else None
    correct = predicted is not None and predicted.lower() == true_label.lower()
    return EvalRecord(
        sample_id=sample_id,
        true_label=true_label,
        kind=kind,
        response_text=response_text,
        predicted=predicted,
        correct=correct,
        backend=backend,
        dataset=dataset,
        note=note,
    )


def load_external_frames(directory: str | Path, index: DatasetIndex) -> tuple[dict[str, RepImage], list[str]]:
    """Load one PNG per sample id; returns (images, missing ids)."""
    directory = Path(directory)
    images: dict[str, RepImage] = {}
    missing: list[str] = []
    for sample in index.samples:
        path = directory / f"{sample.sample_id}.png"
        if path.exists():
            images[sample.sample_id] = load_rep_image(path, kind="external_frame")
        else:
            missing.append(sample.sample_id)
    return images, missing


def _represent(sample, kind, sensor_size, generator, external):
    if kind == "external_frame":
        image = external.get(sample.sample_id)
        if image is None:
            return None, "missing external frame"
        return image, ""
    width, height = sensor_size
    stream = load_events_file(sample.events_path, width, height)
    t0, t1 = stream.time_span()
    if kind == "event_frame":
        return encode_event_frame(stream, t0, t1), ""
    frame = encode_tencode(stream, t0, t1)
    if kind == "tencode":
        return RepImage(pixels=frame.pixels, kind="tencode"), ""
    # kind == "evrep": run the generator over the padded Tencode frame
    padded, record = pad_to_grid(frame.pixels, generator.config.grid_factor)
    generator.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.transpose(padded, (2, 0, 1))[None]).float()
        out = generator(x)[0].numpy()
    pixels = crop_to_record(np.transpose(out, (1, 2, 0)), record)
    return RepImage(pixels=np.ascontiguousarray(pixels), kind="evrep"), ""


def run_recognition(
    index: DatasetIndex,
    kind: str,
    backend,
    generator: Generator | None = None,
    external_dir: str | Path | None = None,
    sensor_size: tuple[int, int] = (34, 34),
    dataset_name: str = "",
    max_tokens: int = 32,
) -> list[EvalRecord]:
    """Recognize every sample of ``index`` under one representation kind.

    Backend failures and missing frames are recorded as Unknown with a
    note; the run always completes.
    """
    if kind not in REPRESENTATION_KINDS:
        raise ValueError(f"kind must be one of {REPRESENTATION_KINDS}, got {kind!r}")
    if kind == "evrep" and generator is None:
        raise MissingCheckpoint("representation kind 'evrep' requires a generator checkpoint")
    external: dict[str, RepImage] = {}
    if kind == "external_frame":
        if external_dir is None:
            raise MissingExternalFrames("representation kind 'external_frame' requires a frame directory")
        external, _ = load_external_frames(external_dir, index)

    backend_id = getattr(backend, "backend_id", backend.__class__.__name__)
    class_list = list(index.class_list)
    records = []
    for sample in index.samples:
        image, note = _represent(sample, kind, sensor_size, generator, external)
        text = ""
        if image is not None:
            try:
                text = recognize(backend, image, class_list, max_tokens=max_tokens).text
            except BackendError as e:
                note = f"backend failure: {e}"
        records.append(
            make_record(
                sample.sample_id,
                sample.label,
                kind,
                text,
                class_list,
                backend=backend_id,
                dataset=dataset_name,
                note=note,
            )
        )
    return records


def aggregate(records, metadata: dict | None = None) -> AccuracyReport:
    """Accuracy per (backend, kind, dataset) group, in first-appearance order."""
    if not records:
        raise EmptyRecords("no records to aggregate")
    groups: dict[tuple[str, str, str], list[EvalRecord]] = {}
    for r in records:
        groups.setdefault((r.backend, r.kind, r.dataset), []).append(r)
    rows = []
    for (backend, kind, dataset), group in groups.items():
        total = len(group)
        correct = sum(r.correct for r in group)
        unknown = sum(r.predicted is None for r in group)
        rows.append(
            ReportRow(
                backend=backend,
                kind=kind,
                dataset=dataset,
                accuracy_pct=100.0 * correct / total,
                total=total,
                unknown=unknown,
            )
        )
    return AccuracyReport(rows=_flag_best(rows), metadata=metadata or {})


def _flag_best(rows: list[ReportRow]) -> list[ReportRow]:
    """Flag the highest accuracy within each (backend, dataset) group;
    ties go to the earliest row (kind declaration order)."""
    best: dict[tuple[str, str], int] = {}
    for i, row in enumerate(rows):
        key = (row.backend, row.dataset)
        if key not in best or row.accuracy_pct > rows[best[key]].accuracy_pct:
            best[key] = i
    flagged = set(best.values())
    return [
        ReportRow(**{**asdict(row), "best_flag": i in flagged})
        for i, row in enumerate(rows)
    ]


def write_report(report: AccuracyReport, out_dir: str | Path) -> dict[str, str]:
    """Write report.csv, report.json and return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "report.csv"
    json_path = out_dir / "report.json"
    lines = ["backend,kind,dataset,accuracy_pct,total,unknown,best_flag"]
    for r in report.rows:
        lines.append(
            f"{r.backend},{r.kind},{r.dataset},{r.accuracy_pct:.2f},{r.total},{r.unknown},{int(r.best_flag)}"
        )
    csv_path.write_text("\n".join(lines) + "\n")
    json_path.write_text(
        json.dumps({"rows": [asdict(r) for r in report.rows], "metadata": report.metadata}, indent=2)
        + "\n"
    )
    return {"csv": str(csv_path), "json": str(json_path)}


def write_records(records, path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")


def read_records(path: str | Path) -> list[EvalRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(EvalRecord(**json.loads(line)))
    return records


def compare_representations(
    datasets: dict[str, DatasetIndex],
    kinds,
    backends: dict[str, object],
    out_dir: str | Path,
    generator: Generator | None = None,
    external_dirs: dict[str, str] | None = None,
    sensor_sizes: dict[str, tuple[int, int]] | None = None,
    seed: int = 0,
) -> AccuracyReport:
    """Run the full (backend x kind x dataset) grid and write report files."""
    kinds = list(kinds)
    if not kinds:
        raise ValueError("kinds list must be nonempty")
    if not datasets:
        raise ValueError("datasets mapping must be nonempty")
    external_dirs = external_dirs or {}
    sensor_sizes = sensor_sizes or {}
    started = time.time()
    all_records: list[EvalRecord] = []
    for backend_name, backend in backends.items():
        for kind in kinds:
            for dataset_name, index in datasets.items():
                all_records.extend(
                    run_recognition(
                        index,
                        kind,
                        backend,
                        generator=generator,
                        external_dir=external_dirs.get(dataset_name),
                        sensor_size=sensor_sizes.get(dataset_name, (34, 34)),
                        dataset_name=dataset_name,
                    )
                )
    sample_class_list = next(iter(datasets.values())).class_list
    metadata = {
        "seed": seed,
        "recognition_prompt_sha256": prompt_sha256(recognition_prompt(sample_class_list)),
        "started_at": started,
        "finished_at": time.time(),
    }
    report = aggregate(all_records, metadata=metadata)
    out_dir = Path(out_dir)
    write_report(report, out_dir)
    write_records(all_records, out_dir / "records.jsonl")
    return report
