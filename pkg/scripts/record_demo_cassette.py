#!/usr/bin/env python3
"""Re-record the demo cassette from the scripted rules.

Run after changing prompt templates or demo assets, then commit the refreshed
src/sqlorch/demo_assets/demo_cassette.jsonl.
"""

import sys
import tempfile

from sqlorch.demo import bundled_cassette_path, run_demo


def main() -> int:
    cassette = bundled_cassette_path()
    with tempfile.TemporaryDirectory() as tmp:
        summary = run_demo(tmp, record=True, cassette_path=cassette)
    print(f"recorded {cassette}")
    print(f"demo answer: {summary['answer'][:100]}...")
    print(f"eval percentages: {summary['percentages']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
