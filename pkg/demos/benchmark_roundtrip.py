"""Generate the option benchmark, run the engine over it, score the run.

The same seed always yields the same thirty items, so scores are
comparable across code changes. The second pass swaps in voters that
only know the non-measurement answers and then disables the visual
tools: every measurement family collapses while the pure label
families survive on votes alone.
"""

import json
import os
import tempfile

from sonagent.bench import read_items_jsonl, score_run
from sonagent.config import build_engine, load_config
from sonagent.core import Query
from sonagent.fixtures import build_demo_bundle, load_case_image, load_manifest
from sonagent.workflows import answer_vqa

root = tempfile.mkdtemp(prefix="sonagent-demo-")
build_demo_bundle(root, seed=7)
manifest = load_manifest(root)
engine = build_engine(load_config(os.path.join(root, "config.json")))
items = read_items_jsonl(os.path.join(root, "bench", "items.jsonl"))
print(f"{len(items)} items across {len({i.task_id for i in items})} families")


# Same config, but voters that are only reliable on label questions.
with open(os.path.join(root, "config.json"), encoding="utf-8") as fh:
    cfg = json.load(fh)
cfg["voter_script"] = manifest["voter_scripts"]["tool_reliant"]
reliant_path = os.path.join(root, "config_reliant.json")
with open(reliant_path, "w", encoding="utf-8") as fh:
    json.dump(cfg, fh)
reliant_engine = build_engine(load_config(reliant_path))


def run(active, **toggles):
    preds = {}
    for item in items:
        image = load_case_image(root, manifest, item.image_id)
        query = Query(id=item.item_id, text=item.question,
                      options=item.options, attachments=(image,))
        decision, _, _ = answer_vqa(active, query, **toggles)
        preds[item.item_id] = decision.key
    return score_run(items, preds)


for title, active, toggles in (
        ("full pipeline", engine, {}),
        ("tool-reliant voters, full pipeline", reliant_engine, {}),
        ("tool-reliant voters, tools disabled", reliant_engine,
         {"disable_tools": True})):
    result = run(active, **toggles)
    print()
    print(f"--- {title} ---")
    print("family  n  accuracy  macro-F1")
    for task_id in sorted(result["per_task"]):
        row = result["per_task"][task_id]
        print(f"{task_id:>6}  {row['n']:>2}  {row['accuracy']:>8.3f}  "
              f"{row['macro_f1']:>8.3f}")
    print(f"overall accuracy (task-averaged): "
          f"{result['overall_accuracy']:.4f}")
    print(f"overall accuracy (item-weighted): "
          f"{result['overall_accuracy_item_weighted']:.4f}")
