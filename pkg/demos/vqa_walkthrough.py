"""Trace one option question through the whole pipeline.

Builds the self-contained demo bundle in a temp directory, picks one
head-circumference item from the generated benchmark, and prints what
each stage contributed: routing, tool fusion, the five votes, the
arbitration rule that fired, and the grounded report.
"""

import os
import tempfile

from sonagent.bench import read_items_jsonl
from sonagent.config import build_engine, load_config
from sonagent.core import Query
from sonagent.fixtures import build_demo_bundle, load_case_image, load_manifest
from sonagent.reporting import check_groundedness
from sonagent.workflows import answer_vqa

root = tempfile.mkdtemp(prefix="sonagent-demo-")
build_demo_bundle(root, seed=7)
manifest = load_manifest(root)
engine = build_engine(load_config(os.path.join(root, "config.json")))
print("bundle at", root)

items = read_items_jsonl(os.path.join(root, "bench", "items.jsonl"))
item = next(i for i in items if i.task_id == 1)  # an abdominal-circumference item
print()
print("question  :", item.question)
for key, text in item.options:
    print(f"  {key}. {text}")
print("truth     :", item.answer)

image = load_case_image(root, manifest, item.image_id)
query = Query(id=item.item_id, text=item.question,
              options=item.options, attachments=(image,))
decision, report, bank = answer_vqa(engine, query)

# The evidence bank is append-only; replaying it in order is the audit
# trail of the run.
print()
print("evidence bank, in write order:")
for entry in bank.entries:
    body = ", ".join(f"{k}={v!r}" for k, v in sorted(entry.payload.items()))
    if len(body) > 96:
        body = body[:93] + "..."
    print(f"  #{entry.id:<2} [{entry.tag:<9}] {body}")

print()
print("decision  :", decision.key, "via", decision.justification["rule"])
print("correct   :", decision.key == item.answer)

violations = check_groundedness(report, bank)
print()
print("report (groundedness violations: %d)" % len(violations))
print()
print(report.text)
