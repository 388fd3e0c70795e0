"""Collects one verdict line per acceptance criterion for the terminal summary."""

LINES = []


def record(number, title, ok, detail=""):
    verdict = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    line = f"[{verdict}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
    LINES.append(line)
    print(line)
    return line
