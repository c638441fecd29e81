"""Caption single frames, then summarize a whole sweep.

Open-ended runs differ from option questions in one structural way:
there are no options to vote on, so the bank stays in its general mode
and never records a vote. The sweep summary also cross-checks the
sonographic age against the menstrual-date age carried in exam context.
"""

import os
import tempfile

from sonagent.config import build_engine, load_config
from sonagent.evidence import BankMode
from sonagent.fixtures import (
    build_demo_bundle,
    load_image_by_id,
    load_manifest,
    load_video,
)
from sonagent.workflows import caption_image, summarize_video

root = tempfile.mkdtemp(prefix="sonagent-demo-")
build_demo_bundle(root, seed=7)
manifest = load_manifest(root)
engine = build_engine(load_config(os.path.join(root, "config.json")))

for frame_id in manifest["video"]["caption_frames"]:
    image = load_image_by_id(root, manifest, frame_id)
    report, bank = caption_image(engine, image)
    print(f"--- caption for {frame_id} "
          f"(bank mode {bank.mode.value}, votes recorded: "
          f"{len(bank.section('vote'))}) ---")
    print(report.text)
    print()
assert bank.mode is BankMode.GENERAL_TASK

# The sweep: plane-classify every frame, keep local score maxima above
# the threshold, then measure each plane's best keyframe.
video = load_video(root, manifest)
keyframes, report, bank = summarize_video(
    engine, video, exam=manifest["exam"], tau=0.5, window=3)

print("--- sweep summary ---")
print("frames    :", len(video.frames))
print("keyframes :", [(k.index, k.label, round(k.score, 2))
                      for k in keyframes.frames])
print("age check : lmp", manifest["exam"]["lmp_date"],
      "vs exam", manifest["exam"]["exam_date"],
      "-> flags:", list(report.flags) or "none")
print()
print(report.text)
