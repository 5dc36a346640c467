import csv

import pytest

from cxrlab.synthetic import make_synthetic_dataset


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    return make_synthetic_dataset(root, n_normal=30, n_cardiomegaly=30, n_edema=6, n_lateral=4, side=128, seed=3)


def write_indiana(root, n_cardio=332, n_normal=400, n_lateral=20, extra_rows=()):
    """Indiana-style layout with empty image files (ingestion only checks existence)."""
    images = root / "images"
    images.mkdir(parents=True, exist_ok=True)
    reports = [["uid", "MeSH", "Problems", "findings"]]
    projections = [["uid", "filename", "projection"]]
    uid = 0
    for kind, n in (("Cardiomegaly/mild", n_cardio), ("normal", n_normal)):
        for _ in range(n):
            uid += 1
            reports.append([str(uid), kind, kind.split("/")[0], "text, with comma"])
            name = f"{uid}_IM-{uid:04d}-1001.dcm.png"
            projections.append([str(uid), name, "Frontal"])
            (images / name).touch()
            if uid <= n_lateral:
                lat = f"{uid}_IM-{uid:04d}-2001.dcm.png"
                projections.append([str(uid), lat, "Lateral"])
                (images / lat).touch()
    reports.extend(extra_rows)
    for name, rows in (("indiana_reports.csv", reports), ("indiana_projections.csv", projections)):
        with open(root / name, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    return root


@pytest.fixture(scope="session")
def indiana_root(tmp_path_factory):
    return write_indiana(tmp_path_factory.mktemp("indiana"))


ACCEPTANCE_LINES = []


def record_criterion(number, status, detail):
    line = f"{status} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
