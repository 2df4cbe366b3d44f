"""PASS/FAIL lines of the acceptance suite, printed again in the terminal summary."""

LINES: dict[int, str] = {}


def record(number: int, title: str, passed: bool, detail: str) -> bool:
    line = f"{'PASS' if passed else 'FAIL'} [{number:2d}] {title}: {detail}"
    LINES[number] = line
    print(line)
    return passed
