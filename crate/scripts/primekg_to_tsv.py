#!/usr/bin/env python3
"""Convert the public PrimeKG edge list (kg.csv) into dxgraph's node/edge TSVs.

PrimeKG ships one CSV with a row per directed edge:

    relation, display_relation,
    x_index, x_id, x_type, x_name, x_source,
    y_index, y_id, y_type, y_name, y_source

Mapping used here:

    x_type/y_type "disease"          -> kind "disease"
    x_type/y_type "effect/phenotype" -> kind "symptom"
    relation "disease_phenotype_positive" -> "disease_symptom"
    relation "disease_disease"            -> "disease_disease"

Everything else (drugs, genes, pathways, negative phenotype links) is
dropped. Node ids are PrimeKG's global `x_index`/`y_index`, prefixed with
"D" or "S" so the two kinds never collide. PrimeKG lists most edges in both
directions; rows are canonicalized so the disease is always the source,
and duplicates are removed.

Usage:
    python scripts/primekg_to_tsv.py kg.csv out_dir/
"""

import argparse
import csv
import sys
from pathlib import Path

KINDS = {"disease": ("disease", "D"), "effect/phenotype": ("symptom", "S")}
RELATIONS = {
    "disease_phenotype_positive": "disease_symptom",
    "disease_disease": "disease_disease",
}


def clean(name):
    return " ".join(name.replace("\t", " ").split())


def convert(csv_path, out_dir):
    nodes = {}
    edges = set()
    with open(csv_path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            relation = RELATIONS.get(row["relation"])
            if relation is None:
                continue
            ends = []
            for side in ("x", "y"):
                kind = KINDS.get(row[f"{side}_type"])
                if kind is None:
                    break
                node_id = kind[1] + row[f"{side}_index"]
                nodes.setdefault(node_id, (kind[0], clean(row[f"{side}_name"])))
                ends.append((node_id, kind[0]))
            if len(ends) != 2:
                continue
            (a, ka), (b, kb) = ends
            if relation == "disease_symptom":
                if ka == "symptom" and kb == "disease":
                    a, b = b, a
                elif not (ka == "disease" and kb == "symptom"):
                    continue
            elif not (ka == kb == "disease"):
                continue
            else:
                a, b = min(a, b), max(a, b)
            if a != b:
                edges.add((a, relation, b))

    out_dir.mkdir(parents=True, exist_ok=True)
    used = {a for a, _, _ in edges} | {b for _, _, b in edges}
    with open(out_dir / "nodes.tsv", "w", encoding="utf-8") as f:
        f.write("# id\tkind\tname\n")
        for node_id in sorted(used):
            kind, name = nodes[node_id]
            f.write(f"{node_id}\t{kind}\t{name}\n")
    with open(out_dir / "edges.tsv", "w", encoding="utf-8") as f:
        f.write("# src_id\trelation\tdst_id\n")
        for a, rel, b in sorted(edges):
            f.write(f"{a}\t{rel}\t{b}\n")

    diseases = sum(1 for n in used if nodes[n][0] == "disease")
    ds = sum(1 for e in edges if e[1] == "disease_symptom")
    print(f"{len(used)} nodes ({diseases} diseases), {ds} disease_symptom edges, {len(edges) - ds} disease_disease edges")


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("kg_csv", type=Path)
    p.add_argument("out_dir", type=Path)
    args = p.parse_args()
    convert(args.kg_csv, args.out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
