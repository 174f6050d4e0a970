#!/usr/bin/env python3
"""Convert the paired counterfactually-augmented IMDb TSVs to a crm dataset file.

Expects a directory holding train_paired.tsv, dev_paired.tsv and
test_paired.tsv with columns Sentiment, Text, batch_id, where the two rows
sharing a batch_id are the original review followed by its revision.
"""

import argparse
import csv
import pathlib
import sys

SPLITS = {"train": "train_paired.tsv", "val": "dev_paired.tsv", "test": "test_paired.tsv"}
LABELS = {"Negative": 0, "Positive": 1}


def escape(text):
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n").replace("\r", "\\r")


def read_pairs(path):
    groups = {}
    order = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f, delimiter="\t"):
            key = row["batch_id"]
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(row)
    for key in order:
        rows = groups[key]
        if len(rows) != 2:
            sys.exit(f"{path}: batch {key} has {len(rows)} rows, expected 2")
        yield key, rows[0], rows[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("corpus_dir", type=pathlib.Path)
    ap.add_argument("out", type=pathlib.Path)
    args = ap.parse_args()

    lines = ["#crm-dataset\t1", "#classes\tnegative\tpositive", "#task\tsingle", "#input\ttext",
             "id\tsplit\tkind\tparent_id\tlabel\ttext_a\ttext_b"]
    for split, name in SPLITS.items():
        for key, orig, revised in read_pairs(args.corpus_dir / name):
            fid = f"{split}_{key}"
            y, y_cf = LABELS[orig["Sentiment"]], LABELS[revised["Sentiment"]]
            if y == y_cf:
                sys.exit(f"{name}: batch {key} revision keeps the label")
            lines.append(f"{fid}\t{split}\tfactual\t\t{y}\t{escape(orig['Text'])}\t")
            lines.append(f"{fid}_cf\t{split}\tcounterfactual\t{fid}\t{y_cf}\t{escape(revised['Text'])}\t")
    args.out.write_text("\n".join(lines) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
