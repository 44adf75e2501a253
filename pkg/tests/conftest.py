import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synth import write_corpus  # noqa: E402

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def record100_fragment() -> Path:
    """First 10 frames of MIT-BIH record 100 (header trimmed to match)."""
    return DATA


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory) -> tuple[Path, list[str]]:
    d = tmp_path_factory.mktemp("synth_records")
    names = write_corpus(d)
    return d, names


def mitdb_dir() -> Path | None:
    """Directory holding real MIT-BIH records, if any were fetched."""
    for cand in (os.environ.get("ECG_BEATNET_DATA"), "data/mitdb", str(Path(__file__).parents[1] / "data" / "mitdb")):
        if cand and (Path(cand) / "100.hea").exists():
            return Path(cand)
    return None


# -- acceptance reporting ------------------------------------------------------

_CRITERIA: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, text = mark.args
    entry = _CRITERIA.setdefault(number, [text, True, []])
    if rep.failed or rep.skipped:
        entry[1] = False
        reason = rep.longrepr.reprcrash.message if hasattr(rep.longrepr, "reprcrash") else str(rep.longrepr)
        entry[2].append(f"{item.name}: {reason.splitlines()[0] if reason else ''}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        text, ok, notes = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number} {'PASS' if ok else 'FAIL'}: {text}")
        for note in notes:
            terminalreporter.write_line(f"    {note}")
