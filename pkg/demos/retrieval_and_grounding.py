"""Knowledge retrieval and the groundedness gate on rendered reports.

Documents are chunked, embedded with a deterministic hashing embedder
(no network, no model weights), and ranked by cosine score. Every
claim a report makes must cite a bank entry that actually supports it;
the last section forges a claim to show the checker catching it.
"""

import os
import tempfile

from sonagent.bench import read_items_jsonl
from sonagent.config import build_engine, load_config
from sonagent.core import Query
from sonagent.evidence import (
    DeterministicHashEmbedder,
    KnowledgeIndex,
    chunk_documents,
    load_knowledge_dir,
)
from sonagent.fixtures import build_demo_bundle, load_case_image, load_manifest
from sonagent.reporting import Report, check_groundedness
from sonagent.workflows import answer_vqa

root = tempfile.mkdtemp(prefix="sonagent-demo-")
build_demo_bundle(root, seed=7)
manifest = load_manifest(root)

documents = load_knowledge_dir(os.path.join(root, "knowledge"))
chunks = chunk_documents(documents, size=280, overlap=40)
index = KnowledgeIndex(chunks, DeterministicHashEmbedder())
print(f"{len(documents)} documents -> {len(chunks)} chunks")

for query_text in ("head circumference percentile",
                   "angle of progression during labor"):
    print()
    print("query:", query_text)
    for chunk, score in index.retrieve(query_text, k=2):
        head = " ".join(chunk.text.split())[:70]
        print(f"  {score:.3f}  {chunk.doc_id}#{chunk.chunk_id}  {head}...")

# A full run cites its sources; the checker walks every claim.
engine = build_engine(load_config(os.path.join(root, "config.json")))
items = read_items_jsonl(os.path.join(root, "bench", "items.jsonl"))
item = items[0]
image = load_case_image(root, manifest, item.image_id)
decision, report, bank = answer_vqa(
    engine, Query(id=item.item_id, text=item.question,
                  options=item.options, attachments=(image,)))
print()
print("honest report violations :", check_groundedness(report, bank))

# Forge a finding that cites an entry which says something else, and a
# second one that cites nothing at all.
forged = Report(
    findings=report.findings
    + "\n- Measured femur length: 33.0 mm [entry 1]."
    + "\n- Measured cervical length: 28.0 mm.",
    impression=report.impression,
    note=report.note,
    citations=report.citations,
    flags=report.flags,
)
print()
print("forged report, numerals with no cited support:")
for violation in check_groundedness(forged, bank):
    print("  -", violation)
