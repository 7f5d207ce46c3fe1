"""Writes the toy fixture: a seven-node decomposition, two participants,
reports and seven graders."""
import csv
import json
import os
import random

OUT = os.path.join(os.path.dirname(__file__), "..", "toy")
rng = random.Random(7)

decomposition = {
    "format_version": 1,
    "root_id": "T",
    "nodes": [
        {"id": "T", "label": "Trip plan"},
        {"id": "A", "label": "Budget", "parent_id": "T"},
        {"id": "A1", "label": "Flights", "parent_id": "A"},
        {"id": "A2", "label": "Lodging", "parent_id": "A"},
        {"id": "B", "label": "Itinerary", "parent_id": "T"},
        {"id": "B1", "label": "Museums", "parent_id": "B"},
        {"id": "B2", "label": "Dining", "parent_id": "B"},
    ],
    "dependencies": [{"from": "A1", "to": "A2", "kind": "must"}],
}

VOCAB = {
    "A1": "flight airline fare seat departure arrival airport layover ticket 2022 $420 economy",
    "A2": "hotel hostel room night booking deposit 3 nights breakfast checkout 85 euros",
    "B1": "museum gallery exhibit painting sculpture ticket tour guide morning opening hours",
    "B2": "restaurant dinner lunch menu reservation tapas wine dessert budget 1,500 local",
}
FILLER = "the a we should and then maybe also please think about what is good for our plan".split()


def sentence(codes, n):
    pool = [w for c in codes for w in VOCAB[c].split()]
    return " ".join(rng.choice(pool) if rng.random() < 0.6 else rng.choice(FILLER) for _ in range(n)) + "."


PLANS = {
    "P1": [(["A1"], ["A1"]), (["A2"], ["A2", "A1"]), (["B1"], ["B1"]), (["B2"], [])],
    "P2": [(["B1", "B2"], ["B1"]), ([], ["B2"]), (["A1", "A2"], ["A1", "A2"])],
}

rows = []
for pid, plan in PLANS.items():
    for turn, (pc, rc) in enumerate(plan, start=1):
        rows.append([pid, turn, "prompt", sentence(pc or ["A1"], rng.randint(12, 40)), ";".join(pc), ""])
        rows.append([pid, turn, "response", sentence(rc or ["B2"], rng.randint(30, 90)), ";".join(rc), "S1" if rc else ""])

with open(os.path.join(OUT, "decomposition.json"), "w") as f:
    json.dump(decomposition, f, indent=2)
    f.write("\n")
with open(os.path.join(OUT, "transcripts.csv"), "w", newline="") as f:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["participant_id", "turn_index", "speaker", "text", "subtask_codes", "specialty_codes"])
    w.writerows(rows)
for pid in PLANS:
    with open(os.path.join(OUT, "reports", f"{pid}.txt"), "w") as f:
        f.write(" ".join(sentence(["A1", "A2", "B1", "B2"], 30) for _ in range(5)) + "\n")
with open(os.path.join(OUT, "grades.csv"), "w", newline="") as f:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["participant_id", "subtask_id", "grader_id", "completeness", "output_quality",
                "room_for_improvement", "satisfactory"])
    for pid in PLANS:
        for sid in ["A1", "A2", "B1", "B2"]:
            for g in range(1, 8):
                w.writerow([pid, sid, f"G{g}", rng.randint(0, 5), rng.randint(0, 5), rng.randint(0, 5),
                            rng.randint(0, 1)])
