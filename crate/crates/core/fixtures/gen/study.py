"""Writes the study-shape fixture: a 116-node decomposition (96 leaves,
6 phases) and a 34-participant corpus of 1,168 turns. Text is synthetic."""
import csv
import json
import os
import random

OUT = os.path.join(os.path.dirname(__file__), "..", "study")
rng = random.Random(2024)

GROUPS_PER_PHASE = [3, 2, 2, 2, 2, 2]
nodes = [{"id": "ROOT", "label": "Study task"}]
deps = []
leaves = []
g = 0
for p, n_groups in enumerate(GROUPS_PER_PHASE, start=1):
    pid = f"P{p}"
    nodes.append({"id": pid, "label": f"Phase {p}", "parent_id": "ROOT"})
    if p > 1:
        deps.append({"from": f"P{p - 1}", "to": pid, "kind": "must"})
    for k in range(1, n_groups + 1):
        g += 1
        gid = f"{pid}.{k}"
        nodes.append({"id": gid, "label": f"Group {gid}", "parent_id": pid})
        n_leaves = 8 if g <= 5 else 7
        for j in range(1, n_leaves + 1):
            lid = f"{gid}.{j}"
            nodes.append({"id": lid, "label": f"Step {lid}", "parent_id": gid})
            leaves.append(lid)
        deps.append({"from": f"{gid}.1", "to": f"{gid}.2", "kind": "equivocal"})

assert len(nodes) == 116 and len(leaves) == 96

WORDS = ("data model schema query index table metric chart report draft budget cost risk plan "
         "review test deploy user interview survey persona goal scope timeline vendor contract "
         "summary analysis revenue growth churn forecast segment pricing channel launch").split()
FILLER = "the a we can should then also please maybe next let us now consider".split()


def text(n):
    return " ".join(rng.choice(WORDS) if rng.random() < 0.6 else rng.choice(FILLER) for _ in range(n))


def codes():
    r = rng.random()
    if r < 0.2:
        return ""
    return ";".join(sorted(rng.sample(leaves, 1 if r < 0.7 else 2)))


turns = [34] * 34
for i in range(1168 - sum(turns)):
    turns[i] += 1
assert sum(turns) == 1168

rows = []
for i, n in enumerate(turns, start=1):
    participant = f"S{i:02d}"
    for t in range(1, n + 1):
        rows.append([participant, t, "prompt", text(rng.randint(4, 20)), codes(), ""])
        rows.append([participant, t, "response", text(rng.randint(10, 60)), codes(), ""])
    with open(os.path.join(OUT, "reports", f"{participant}.txt"), "w") as f:
        f.write(text(120) + "\n")

with open(os.path.join(OUT, "decomposition.json"), "w") as f:
    json.dump({"format_version": 1, "root_id": "ROOT", "nodes": nodes, "dependencies": deps}, f, indent=1)
    f.write("\n")
with open(os.path.join(OUT, "transcripts.csv"), "w", newline="") as f:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["participant_id", "turn_index", "speaker", "text", "subtask_codes", "specialty_codes"])
    w.writerows(rows)
