#!/usr/bin/env python3
"""Regenerate the bundled synthetic corpora under data/ (deterministic)."""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from pclc.synthetic import overfit_utterances, transfer_utterances, write_corpus


def main() -> None:
    root = os.path.join(os.path.dirname(__file__), "..", "data")
    write_corpus(overfit_utterances(), os.path.join(root, "overfit"))
    write_corpus(transfer_utterances(), os.path.join(root, "transfer"))
    print(f"wrote corpora under {os.path.abspath(root)}")


if __name__ == "__main__":
    main()
