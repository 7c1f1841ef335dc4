"""Collects one PASS/FAIL line per acceptance criterion for the end-of-run summary."""

LINES: list[str] = []


def verdict(criterion: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    LINES.append(line)
    print(line, flush=True)
    assert ok, line
