import contextlib

RESULTS = {}


@contextlib.contextmanager
def criterion(number, title):
    """Record the outcome of one acceptance criterion; ``info`` collects measured values."""
    info = {}
    try:
        yield info
    except BaseException:
        RESULTS[number] = (title, False, info)
        raise
    RESULTS[number] = (title, True, info)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        title, ok, info = RESULTS[number]
        detail = ", ".join(f"{k}={_fmt(v)}" for k, v in info.items())
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)
