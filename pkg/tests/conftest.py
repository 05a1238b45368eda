import pytest

from cinerecon.config import toy_config


def tiny_config(**overrides):
    """Smallest pipeline that still exercises every module (16x16, T=3)."""
    base = {
        "mgda.channels": 4, "mgda.offset_groups": 4, "mgda.flow_channels": [4, 4, 4, 4],
        "mgda.flow_kernel": 3, "mgda.pyramid_levels": 2, "mrf.channels": 4, "knet.base_channels": 8,
        "data.synthetic_size": 16, "data.synthetic_frames": 3, "data.synthetic_subjects": [1, 1, 1],
        "train.epochs": 2, "train.epoch_repeats": 2,
    }
    base.update(overrides)
    return toy_config(**base)


@pytest.fixture
def tiny():
    return tiny_config


# -- acceptance report ---------------------------------------------------------
# Tests marked ``@pytest.mark.criterion(n, title)`` are summarised as one
# PASS/FAIL/SKIP line per criterion at the end of the run.  A test may add a
# short detail string with ``record_property("detail", ...)``.

_criteria: dict[int, dict] = {}


def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        item.user_properties.append(("criterion", (mark.args[0], mark.args[1])))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    number, title = props["criterion"]
    entry = _criteria.setdefault(number, {"title": title, "outcome": "PASS", "details": [], "seconds": 0.0})
    entry["seconds"] += report.duration
    if report.failed:
        entry["outcome"] = "FAIL"
    elif report.skipped and entry["outcome"] == "PASS":
        entry["outcome"] = "SKIP"
    if report.when == "call" and "detail" in props:
        entry["details"].append(str(props["detail"]))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        detail = "; ".join(e["details"])
        line = f"criterion {number:2d} {e['outcome']:4s} {e['title']} ({e['seconds']:.1f} s)"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
