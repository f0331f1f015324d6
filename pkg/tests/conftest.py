import os

os.environ.setdefault("DMTFD_THREADS", "1")

import pytest  # noqa: E402
import torch  # noqa: E402
from hypothesis import settings  # noqa: E402

settings.register_profile("dmtfd", deadline=None, max_examples=60)
settings.load_profile("dmtfd")
torch.set_num_threads(1)


@pytest.fixture
def tiny_csv(tmp_path):
    path = tmp_path / "tiny.csv"
    path.write_text("timestamp,a,b,label\n0,1.0,2.0,0\n1,1.5,2.5,0\n2,2.0,1.0,1\n3,0.5,0.0,0\n")
    return path


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool | None, detail: str) -> None:
    verdict = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
    ACCEPTANCE_LINES[number] = f"criterion {number}: {verdict}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
