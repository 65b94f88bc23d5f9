"""The whole workflow through the command-line interface.

Generates a synthetic dataset, then drives fit -> predict -> explain ->
attribute -> eval -> render exactly as one would against real exported
activations.  Outputs land under a temp directory, organized as
banks/, maps/, attr/, render/ and reports/.
"""

import tempfile
from pathlib import Path

from protoexplain import synthetic, tensor_store
from protoexplain.cli import main

workdir = Path(tempfile.mkdtemp(prefix="protoexplain_demo_"))
manifest_path = synthetic.generate(workdir / "dataset")
out = workdir / "artifacts"
sample = str(int(tensor_store.load_manifest(manifest_path).sample_ids("test")[0]))

steps = [
    ["fit", "--manifest", str(manifest_path), "--out", str(out),
     "--depth-from", "2", "--k-per-class", "2", "--seed", "0"],
    ["predict", "--manifest", str(manifest_path), "--out", str(out), "--split", "test"],
    ["explain", "--manifest", str(manifest_path), "--out", str(out), "--depth-from", "2"],
    ["attribute", "--manifest", str(manifest_path), "--out", str(out), "--depth-from", "2"],
    ["eval", "--manifest", str(manifest_path), "--out", str(out)],
    ["render", "--manifest", str(manifest_path), "--out", str(out),
     "--depth-from", "4", "--sample", sample],
]
for argv in steps:
    print(f"\n$ protoexplain {' '.join(argv)}")
    code = main(argv)
    assert code == 0, f"step {argv[0]} exited {code}"

print("\nartifacts:")
for path in sorted(out.rglob("*")):
    if path.is_file():
        print(" ", path.relative_to(workdir))
