import numpy as np


def bump_density(grid, amplitude=0.2, width=0.15):
    """1 + amplitude·exp(-|x-c|²/width²) centred in the unit square."""
    X = grid.coords()
    return 1 + amplitude * np.exp(-((X[0] - 0.5) ** 2 + (X[1] - 0.5) ** 2) / width**2)


CRITERIA: dict[int, str] = {}


def record(number, title, ok, detail):
    """Store and print one pass/fail line for an acceptance criterion."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    CRITERIA[number] = line
    print(line)
    return ok
