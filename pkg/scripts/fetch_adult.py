#!/usr/bin/env python3
"""Assemble the combined UCI Adult Income CSV used by the Adult experiments.

Downloads the train and test partitions from the UCI repository, adds the
standard header, and concatenates them (48,842 data rows) into
data/adult.csv.  Needs network access; afterwards the Adult acceptance
tests and the adult_* configs run locally.

Usage: python scripts/fetch_adult.py [output_path]
"""

import sys
import urllib.request
from pathlib import Path

BASE = "https://archive.ics.uci.edu/ml/machine-learning-databases/adult"
HEADER = (
    "age,workclass,fnlwgt,education,education-num,marital-status,occupation,"
    "relationship,race,sex,capital-gain,capital-loss,hours-per-week,"
    "native-country,income"
)


def fetch(name: str) -> list[str]:
    url = f"{BASE}/{name}"
    print(f"downloading {url}")
    with urllib.request.urlopen(url, timeout=60) as resp:
        text = resp.read().decode("utf-8", errors="replace")
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("|"):  # adult.test begins with a comment line
            continue
        # normalize ", " separators; keep the "?" missing tokens as-is
        rows.append(",".join(cell.strip() for cell in line.split(",")))
    return rows


def main() -> int:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "data" / "adult.csv"
    rows = fetch("adult.data") + fetch("adult.test")
    if len(rows) != 48_842:
        print(f"warning: expected 48842 data rows, got {len(rows)}")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(HEADER + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    print(f"wrote {len(rows)} rows to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
