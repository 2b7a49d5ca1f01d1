#!/usr/bin/env python3
"""Convert Salient ImageNet style core/spurious annotations to the amx CSV.

Output columns: class_id,class_name,feature_index,label,animacy

Two inputs are understood:

  votes CSV   one row per worker answer. Columns are named with --class-column,
              --feature-column and --answer-column. Answers in --core-answers
              count as core; every other answer counts as spurious. The label of
              a (class, feature) pair is the majority; ties go to spurious.
  JSON map    {"<class_id>": {"core": [j, ...], "spurious": [j, ...]}, ...}

Class names come from --class-names (one name per line, line i is class i).
Animacy comes from --animate / --inanimate files listing class ids, one per
line; classes in neither are "unknown".
"""

import argparse
import collections
import csv
import json
import sys


def read_ids(path):
    if not path:
        return set()
    with open(path) as f:
        return {int(line) for line in f if line.strip()}


def from_votes(path, cls_col, feat_col, ans_col, core_answers):
    votes = collections.defaultdict(lambda: [0, 0])
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = {cls_col, feat_col, ans_col} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
        for line, row in enumerate(reader, start=2):
            try:
                key = (int(row[cls_col]), int(row[feat_col]))
            except ValueError:
                raise ValueError(f"{path}:{line}: class and feature must be integers")
            core = row[ans_col].strip().lower() in core_answers
            votes[key][0 if core else 1] += 1
    return {k: "core" if c > s else "spurious" for k, (c, s) in votes.items()}


def from_json(path):
    with open(path) as f:
        data = json.load(f)
    labels = {}
    for cls, groups in data.items():
        for label in ("core", "spurious"):
            for j in groups.get(label, []):
                key = (int(cls), int(j))
                if key in labels and labels[key] != label:
                    raise ValueError(f"{path}: class {cls} feature {j} is both core and spurious")
                labels[key] = label
    return labels


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("input", help="votes CSV or JSON map")
    p.add_argument("-o", "--output", help="output CSV (default stdout)")
    p.add_argument("--format", choices=["votes", "json"], help="input kind (default from the file extension)")
    p.add_argument("--class-names", help="text file, one class name per line")
    p.add_argument("--animate", help="file of animate class ids")
    p.add_argument("--inanimate", help="file of inanimate class ids")
    p.add_argument("--class-column", default="class_index")
    p.add_argument("--feature-column", default="feature_index")
    p.add_argument("--answer-column", default="answer")
    p.add_argument("--core-answers", default="main_object",
                   help="comma-separated answers that mean core (default main_object)")
    args = p.parse_args(argv)

    kind = args.format or ("json" if args.input.endswith(".json") else "votes")
    try:
        if kind == "json":
            labels = from_json(args.input)
        else:
            core = {a.strip().lower() for a in args.core_answers.split(",") if a.strip()}
            labels = from_votes(args.input, args.class_column, args.feature_column, args.answer_column, core)
        names = []
        if args.class_names:
            with open(args.class_names) as f:
                names = [line.strip() for line in f]
        animate, inanimate = read_ids(args.animate), read_ids(args.inanimate)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"import_annotations: {e}", file=sys.stderr)
        return 1
    if animate & inanimate:
        print(f"import_annotations: classes {sorted(animate & inanimate)} are both animate and inanimate", file=sys.stderr)
        return 1

    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["class_id", "class_name", "feature_index", "label", "animacy"])
        for (c, j) in sorted(labels):
            name = names[c] if c < len(names) and names[c] else f"class {c}"
            animacy = "animate" if c in animate else "inanimate" if c in inanimate else "unknown"
            w.writerow([c, name, j, labels[(c, j)], animacy])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
