"""Collects one verdict per acceptance criterion for the end-of-run summary."""

RESULTS: list[tuple[str, bool, str]] = []


def record(criterion: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} [{criterion}] {detail}"
    RESULTS.append((criterion, ok, detail))
    print(line)
    return ok


def summary_lines() -> list[str]:
    return [f"{'PASS' if ok else 'FAIL'} [{c}] {d}" for c, ok, d in RESULTS]
