#!/usr/bin/env python3
"""Convert a MITRE CWE download into the taxonomy JSON read by vulnset.

Inputs are either the full XML catalog (cwec_v4.x.xml) or the per-view CSV
export (1000.csv). Only ChildOf links inside the chosen view are kept.

    import_cwe.py cwec_v4.14.xml --hardware 1194.csv -o cwe1000.json --hardware-out hardware.json
    import_cwe.py 1000.csv -o cwe1000.json
"""

import argparse
import csv
import json
import re
import sys
import xml.etree.ElementTree as ET

ABSTRACTIONS = {"Pillar", "Class", "Base", "Variant"}
ALLOWED_USAGE = {"Allowed", "Allowed-with-Review"}
LINK = re.compile(r"NATURE:ChildOf:CWE ID:(\d+):VIEW ID:(\d+)")


def abstraction(raw, cwe_id):
    if raw in ABSTRACTIONS:
        return raw
    # Compound elements (chains, composites) have no abstraction level.
    print(f"CWE-{cwe_id}: abstraction {raw!r} imported as Base", file=sys.stderr)
    return "Base"


def from_xml(path, view):
    root = ET.parse(path).getroot()
    ns = {"c": root.tag.split("}")[0].strip("{")} if root.tag.startswith("{") else {}
    q = (lambda t: f"c:{t}") if ns else (lambda t: t)
    nodes = []
    for kind in ("Weakness", "Compound_Element"):
        for el in root.iter(f"{{{ns['c']}}}{kind}" if ns else kind):
            if el.get("Status") == "Deprecated":
                continue
            cwe_id = el.get("ID")
            parents = [
                f"CWE-{r.get('CWE_ID')}"
                for r in el.findall(f"{q('Related_Weaknesses')}/{q('Related_Weakness')}", ns)
                if r.get("Nature") == "ChildOf" and r.get("View_ID") == view
            ]
            desc = el.find(q("Description"), ns)
            usage = el.find(f"{q('Mapping_Notes')}/{q('Usage')}", ns)
            node = {
                "id": f"CWE-{cwe_id}",
                "name": el.get("Name"),
                "description": " ".join((desc.text or "").split()) if desc is not None else "",
                "abstraction": abstraction(el.get("Abstraction") or el.get("Structure"), cwe_id),
                "parents": sorted(set(parents), key=parents.index),
            }
            if usage is not None and usage.text:
                node["mapping_allowed"] = usage.text.strip() in ALLOWED_USAGE
            nodes.append(node)
    return nodes


def from_csv(path, view):
    nodes = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            cwe_id = row["CWE-ID"].strip()
            parents = []
            for pid, vid in LINK.findall(row.get("Related Weaknesses", "")):
                if vid == view and f"CWE-{pid}" not in parents:
                    parents.append(f"CWE-{pid}")
            nodes.append({
                "id": f"CWE-{cwe_id}",
                "name": row["Name"],
                "description": " ".join(row.get("Description", "").split()),
                "abstraction": abstraction(row.get("Weakness Abstraction", ""), cwe_id),
                "parents": parents,
            })
    return nodes


def read_ids(path):
    """CWE ids from a view CSV export, or from a JSON array."""
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as f:
            return [s if s.startswith("CWE-") else f"CWE-{s}" for s in map(str, json.load(f))]
    with open(path, newline="", encoding="utf-8") as f:
        return [f"CWE-{row['CWE-ID'].strip()}" for row in csv.DictReader(f)]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("source", help="cwec_v*.xml or a view CSV export")
    ap.add_argument("--view", default="1000")
    ap.add_argument("--hardware", help="ids to flag as hardware: view CSV export or JSON array")
    ap.add_argument("-o", "--output", required=True)
    ap.add_argument("--hardware-out", help="also write the flagged ids present in the view as a JSON array")
    args = ap.parse_args()

    nodes = from_xml(args.source, args.view) if args.source.endswith(".xml") else from_csv(args.source, args.view)
    # the XML catalog holds every weakness; keep those linked into the view plus its pillars
    by_id = {n["id"]: n for n in nodes}
    keep = {n["id"] for n in nodes if n["parents"] or n["abstraction"] == "Pillar"}
    nodes = [n for n in nodes if n["id"] in keep]
    for n in nodes:
        n["parents"] = [p for p in n["parents"] if p in keep]
    dropped = len(by_id) - len(nodes)
    if dropped:
        print(f"{dropped} entries outside view {args.view} dropped", file=sys.stderr)

    hardware = []
    if args.hardware:
        flagged = set(read_ids(args.hardware))
        for n in nodes:
            if n["id"] in flagged:
                n["hardware"] = True
                hardware.append(n["id"])

    with open(args.output, "w", encoding="utf-8") as f:
        json.dump({"view": f"CWE-{args.view}", "nodes": nodes}, f, indent=1, ensure_ascii=False)
        f.write("\n")
    if args.hardware_out:
        with open(args.hardware_out, "w", encoding="utf-8") as f:
            json.dump(sorted(hardware, key=lambda s: int(s[4:])), f, indent=1)
            f.write("\n")
    pillars = sum(n["abstraction"] == "Pillar" for n in nodes)
    print(f"{len(nodes)} nodes, {pillars} pillars, {len(hardware)} hardware", file=sys.stderr)


if __name__ == "__main__":
    main()
