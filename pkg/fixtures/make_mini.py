"""Regenerate the bundled miniature dataset under fixtures/mini/.

The dataset is designed so that, in the seed-0 table order, only the first
three tables introduce columns the scripted model calls NEW; with a
quiescence window of 5 the learner must stop after the 8th table. The
golden files are written from this design, not by running the package.

    python fixtures/make_mini.py
"""

from __future__ import annotations

import csv
import json
import random
import shutil
from pathlib import Path

HERE = Path(__file__).resolve().parent / "mini"
N_TABLES = 20
SEED_CLASSES = ["name", "date", "identifier"]

# column -> (ground-truth label, dictionary answer, superclass of learned class)
CATALOG = {
    "title": ("TITLE", "NEW: Event Title", "event_title"),
    "start_date": ("STARTDATE", "date", "date"),
    "duration": ("DURATION", "NEW: Duration", "duration"),
    "address": ("LOC1.ADDRESS", "NEW: Address", "address"),
    "city": ("CITY", "NEW: City", "city"),
    "zip": ("ZIP", "NEW: Zip", "zip"),
    "lat": ("LOC1.LAT", "NEW: Latitude", "latitude"),
    "lon": ("LOC1.LON", "NEW: Longitude", "longitude"),
    "phone": ("PHONE", "NEW: Phone Number", "phone_number"),
    "website": ("WEBSITE", "NEW: URL", "url"),
    "ticket_url": ("CALL_TO_ACTION_URL", "url", "url"),
    "rating": ("RATING", "NEW: Rating", "rating"),
    "organizer": ("ORGANIZER", "name", "name"),
    "event_id": ("ID", "identifier", "identifier"),
    "description": ("DESCRIPTION", "Hard to say, it looks like free text.", None),
}
SUPER = {
    "event": ["event_title", "date", "duration"],
    "location": ["address", "city", "zip", "latitude", "longitude"],
    "contact": ["phone_number", "url"],
    "misc": ["name", "identifier", "rating"],
}
LEAF_SUPER = {leaf: sup for sup, leaves in SUPER.items() for leaf in leaves}
# The first three tables in stream order; every later table reuses these.
NOVEL_LAYOUTS = [
    ["title", "start_date", "address", "city", "event_id"],
    ["duration", "zip", "lat", "lon", "organizer"],
    ["phone", "website", "ticket_url", "rating", "description"],
]
# ground-truth label -> ontology path (DESCRIPTION lands on an internal node)
GT_PATH = {
    CATALOG[c][0]: ("PROPERTY::MISC" if CATALOG[c][2] is None
                    else f"PROPERTY::{LEAF_SUPER[CATALOG[c][2]].upper()}::{CATALOG[c][2].upper()}")
    for c in CATALOG
}


def values_for(column: str, rng: random.Random) -> str:
    if rng.random() < 0.1:
        return ""
    pick = rng.choice
    if column == "title":
        return pick(["Jazz Night", "Farmers Market", "Book Club", "Yoga in the Park",
                     "Trivia Tuesday", "Open Mic", "Food Truck Rally"])
    if column == "start_date":
        return f"2019-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}"
    if column == "duration":
        return f"{rng.randint(1, 4)}h"
    if column == "address":
        return f"{rng.randint(1, 999)} {pick(['Main St', 'Oak Ave', 'Elm Rd', 'Pine Ln'])}"
    if column == "city":
        return pick(["Boston", "Cambridge", "Somerville", "Quincy", "Newton"])
    if column == "zip":
        return f"02{rng.randint(100, 199)}"
    if column == "lat":
        return f"42.{rng.randint(1000, 9999)}"
    if column == "lon":
        return f"-71.{rng.randint(1000, 9999)}"
    if column == "phone":
        return f"617-555-{rng.randint(1000, 9999)}"
    if column in ("website", "ticket_url"):
        return f"https://example.org/{pick(['events', 'tickets', 'info'])}/{rng.randint(1, 99)}"
    if column == "rating":
        return f"{rng.randint(1, 5)}.{rng.randint(0, 9)}"
    if column == "organizer":
        return pick(["City Arts", "Parks Dept", "Library Friends", "Chamber of Commerce"])
    if column == "event_id":
        return f"EV{rng.randint(10000, 99999)}"
    return pick(["A fun evening, bring friends", "Free for all ages", "Outdoor, rain or shine",
                 "Registration required"])


def script_rules() -> list[dict]:
    deep, shallow, rules = [], [], []
    for col, (gt, dict_answer, leaf) in CATALOG.items():
        rules.append({"match": rf"(?s)KNOWN CLASSES:.*COL-NAME: `{col}`", "response": dict_answer})
    flat = {c: CATALOG[c][0] for c in CATALOG}
    flat.update({"description": "bees", "lon": "LOC1.LAT",
                 "organizer": "I think this column lists the people involved"})
    tree = {c: GT_PATH[CATALOG[c][0]] for c in CATALOG}
    tree.update({"lat": "LONGITUDE", "description": "PROPERTY::EVENT::EVENT_TITLE",
                 "organizer": "NAME"})
    step = {c: GT_PATH[CATALOG[c][0]].split("::")[1:] for c in CATALOG}
    step.update({"description": ["EVENT", "EVENT_TITLE"], "phone": ["CONTACT", "URL"],
                 "rating": ["bees"]})
    for col in CATALOG:
        rules.append({"match": rf"(?s)CLASSES:\n(?!PROPERTY|- ).*COL-NAME: `{col}`",
                      "response": flat[col]})
        rules.append({"match": rf"(?s)CLASSES:\nPROPERTY\n.*COL-NAME: `{col}`",
                      "response": tree[col]})
        path = step[col]
        shallow.append({"match": rf"(?s)COL-NAME: `{col}`.*CURRENT: PROPERTY\n",
                        "response": path[0]})
        if len(path) > 1:
            deep.append({"match": rf"(?s)COL-NAME: `{col}`.*CURRENT: PROPERTY::{path[0]}\n",
                         "response": path[1]})
    names = SEED_CLASSES + [CATALOG[c][2] for layout in NOVEL_LAYOUTS for c in layout
                            if CATALOG[c][1].startswith("NEW:")]
    for start in range(0, len(names), 8):
        batch = names[start:start + 8]
        body = "\n".join(f"{leaf} -> {LEAF_SUPER[leaf]}" for leaf in batch)
        rules.append({"match": rf"(?s)EXISTING SUPERCLASSES:.*CLASSES:\n- {batch[0]}\n",
                      "response": body})
    for gt, path in GT_PATH.items():
        label = gt.replace(".", "_").upper()
        rules.append({"match": rf"LABEL: {label}\nPATH:", "response": path})
    return rules + deep + shallow


def main() -> None:
    if HERE.exists():
        shutil.rmtree(HERE)
    (HERE / "tables").mkdir(parents=True)
    (HERE / "gt").mkdir()
    (HERE / "golden").mkdir()
    rng = random.Random(20240601)
    ids = [f"t{i:02d}" for i in range(1, N_TABLES + 1)]
    order = list(ids)
    random.Random(0).shuffle(order)
    layouts = {}
    reusable = [c for c in CATALOG]
    for pos, tid in enumerate(order):
        if pos < len(NOVEL_LAYOUTS):
            layouts[tid] = NOVEL_LAYOUTS[pos]
        else:
            layouts[tid] = rng.sample(reusable, rng.randint(3, 6))

    total_rows = total_cols = 0
    for tid in ids:
        cols = layouts[tid]
        n_rows = rng.randint(4, 12)
        rows = [[values_for(c, rng) for c in cols] for _ in range(n_rows)]
        for j, c in enumerate(cols):  # every column keeps at least one value
            if all(r[j] == "" for r in rows):
                rows[0][j] = values_for(c, random.Random(f"{tid}:{c}")) or "x"
        with (HERE / "tables" / f"{tid}.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            w.writerows(rows)
        with (HERE / "gt" / f"{tid}.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["column", "label"])
            w.writerows([c, CATALOG[c][0]] for c in cols)
        total_rows += n_rows
        total_cols += len(cols)

    manifest = ["name: mini-goby", "label_space: labels.txt", "tables:"]
    for tid in ids:
        manifest += [f"  - table_id: {tid}", f"    path: tables/{tid}.csv",
                     f"    ground_truth_path: gt/{tid}.csv"]
    (HERE / "manifest.yaml").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    (HERE / "labels.txt").write_text("\n".join(CATALOG[c][0] for c in CATALOG) + "\n",
                                     encoding="utf-8")
    import yaml

    script = {"default": "", "rules": script_rules()}
    (HERE / "script.yaml").write_text(yaml.safe_dump(script, sort_keys=False, width=200),
                                      encoding="utf-8")

    classes = [{"name": s, "raw": s, "provenance": "seed"} for s in SEED_CLASSES]
    for tid in order[:len(NOVEL_LAYOUTS)]:
        for j, c in enumerate(layouts[tid]):
            answer = CATALOG[c][1]
            if answer.startswith("NEW:"):
                raw = answer[4:].strip()
                classes.append({"name": CATALOG[c][2], "raw": raw,
                                "provenance": {"table_id": tid, "column_index": j}})
    (HERE / "golden" / "dictionary.json").write_text(
        json.dumps({"classes": classes}, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    expected = {
        "stream_order": order,
        "quiescence_window": 5,
        "terminates_after": 8,
        "stop_table": order[7],
        "stats": {"table_count": N_TABLES, "total_rows": total_rows, "total_columns": total_cols,
                  "avg_rows_per_table": total_rows / N_TABLES,
                  "avg_cols_per_table": total_cols / N_TABLES},
        "gt_paths": GT_PATH,
    }
    (HERE / "golden" / "expected.json").write_text(json.dumps(expected, indent=2) + "\n",
                                                   encoding="utf-8")


if __name__ == "__main__":
    main()
