import random

import pytest

ACCEPTANCE_FILE = "test_acceptance.py"
_acceptance = []


def pytest_runtest_logreport(report):
    if ACCEPTANCE_FILE not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        note = getattr(report, "wasxfail", "")
        _acceptance.append((report.nodeid.split("::")[-1], report.outcome, note))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, note in _acceptance:
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{mark}] {name}" + (f" (known, {note})" if note else ""))


def make_metadata(n_patients=600, seed=1, max_images=2, sex_noise=True):
    """Small ISIC-like metadata text with missing ages, odd labels and multiplets."""
    rng = random.Random(seed)
    rows = ["image_id,patient_id,age,sex,label"]
    k = 0
    for p in range(n_patients):
        sex = rng.choice(["female", "male"])
        for _ in range(rng.randint(1, max_images)):
            age = "" if rng.random() < 0.05 else str(rng.randint(20, 90))
            s = "" if sex_noise and rng.random() < 0.03 else sex
            r = rng.random()
            label = "malignant" if r < 0.35 else ("benign" if r < 0.98 else "indeterminate")
            rows.append(f"IMG{k:05d},P{p:04d},{age},{s},{label}")
            k += 1
    return "\n".join(rows) + "\n"


@pytest.fixture
def metadata_text():
    return make_metadata()
