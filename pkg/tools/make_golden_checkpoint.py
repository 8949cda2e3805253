"""Write the golden checkpoint fixture used by the format tests.

Run once; the output is committed and must never be regenerated casually,
since its whole point is to catch unintended format or init changes.
"""
import os
import zlib

from glimmer import GlimmerNetConfig, build
from glimmer.dataio import save_checkpoint

OUT = os.path.join(os.path.dirname(__file__), os.pardir, "tests", "fixtures")

cfg = GlimmerNetConfig(input_hw=(16, 16), num_classes=3, stem_width=4, blocks_per_stage=(1, 1, 1, 1),
                       stage_widths=(4, 8, 8, 8), class_names=("a", "b", "c"))
os.makedirs(OUT, exist_ok=True)
with open(os.path.join(OUT, "golden_tiny.json"), "w", encoding="utf-8") as fh:
    fh.write(cfg.to_json() + "\n")
path = os.path.join(OUT, "golden_tiny.glck")
save_checkpoint(path, build(cfg, seed=7))
with open(path, "rb") as fh:
    data = fh.read()
print(f"{path}: {len(data)} bytes, crc32 of file {zlib.crc32(data):#010x}")
