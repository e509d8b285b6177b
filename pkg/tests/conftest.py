from __future__ import annotations

import json

import pytest

from detkit.detmodel import BBox, CategorySet, DetectionDataset, GroundTruthAnnotation, ImageRecord

_acceptance: dict[str, list] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _acceptance.setdefault(number, [title, "PASS", []])
    if call.when == "setup" and call.excinfo is not None and call.excinfo.errisinstance(pytest.skip.Exception):
        entry[1] = "SKIP" if entry[1] == "PASS" else entry[1]
        entry[2].append(str(call.excinfo.value))
    elif call.when == "call" and call.excinfo is not None:
        if call.excinfo.errisinstance(pytest.skip.Exception):
            entry[1] = "SKIP" if entry[1] == "PASS" else entry[1]
            entry[2].append(str(call.excinfo.value))
        else:
            entry[1] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance, key=int):
        title, status, notes = _acceptance[number]
        extra = f" ({'; '.join(notes)})" if notes else ""
        terminalreporter.write_line(f"criterion {number}: {status}  {title}{extra}")


@pytest.fixture
def mini_ds() -> DetectionDataset:
    cats = CategorySet(((1, "cat"), (2, "dog"), (3, "person")))
    images = (ImageRecord(1, 640, 480, "a.jpg"), ImageRecord(2, 320, 240, "b.jpg"))
    anns = (
        GroundTruthAnnotation(1, 1, BBox(10, 10, 110, 110), 10000.0, False, 1),
        GroundTruthAnnotation(1, 1, BBox(200, 200, 300, 260), 6000.0, False, 2),
        GroundTruthAnnotation(1, 2, BBox(400, 100, 500, 300), 20000.0, False, 3),
        GroundTruthAnnotation(2, 3, BBox(0, 0, 50, 50), 2500.0, False, 4),
    )
    return DetectionDataset(images, anns, cats)


@pytest.fixture
def write_json(tmp_path):
    def write(name: str, doc) -> str:
        p = tmp_path / name
        p.write_text(json.dumps(doc))
        return str(p)

    return write
