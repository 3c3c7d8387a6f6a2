"""
The command-line pipeline and bit-exact checkpoints
===================================================

Each pipeline stage is a subcommand of ``ilmalab``.  This script drives them
in-process through :func:`ilmalab.cli.main` on a small configuration, then
shows that checkpoints round-trip bit-exactly and that corruption is caught.
"""

import tempfile
from pathlib import Path

import numpy as np

from ilmalab import checkpoint
from ilmalab.cli import main

CONFIG = """
[data]
n_pairs = 4
n_train = 200
n_adapt = 80
n_target_test = 20
n_source_test = 20
n_source_dev = 20
n_templates = 5
[model]
enc_hidden = 16
enc_layers = 1
embed_dim = 8
pred_hidden = 16
joint_dim = 16
[train]
epochs = 5
lr = 0.005
[ilma]
epochs = 4
lr = 0.005
[report]
rhos = 0.0, 0.2
fusion = false
"""

work = Path(tempfile.mkdtemp(prefix="ilmalab-demo-"))
(work / "lab.ini").write_text(CONFIG)
common = ["--config", str(work / "lab.ini"), "--seed", "3"]

###############################################################################
# gen -> ilmt -> ilma -> decode.  Training stages print one TSV row per epoch.

main(["gen", *common, "--out", str(work / "data")])
main(["ilmt", *common, "--data", str(work / "data"), "--out", str(work / "ilmt.ckpt")])
main(["ilma", *common, "--data", str(work / "data"), "--checkpoint", str(work / "ilmt.ckpt"),
      "--scope", "joiner", "--rho", "0.2", "--out", str(work / "adapted.ckpt")])
main(["decode", *common, "--data", str(work / "data"), "--checkpoint", str(work / "adapted.ckpt"),
      "--out", str(work / "hyp.tsv")])
print((work / "hyp.tsv").read_text().splitlines()[0])

###############################################################################
# Checkpoints: magic, version, JSON metadata, named float64 tensors, CRC-32.

model, meta = checkpoint.load_model(work / "adapted.ckpt")
print("metadata:", {k: meta[k] for k in ("stage", "regime", "scope", "rho")})
checkpoint.save_checkpoint(model, work / "again.ckpt", **{k: v for k, v in meta.items() if k not in ("kind", "model")})
print("save -> load -> save byte-identical:",
      (work / "adapted.ckpt").read_bytes() == (work / "again.ckpt").read_bytes())

blob = bytearray((work / "adapted.ckpt").read_bytes())
blob[100] ^= 0xFF
try:
    checkpoint.decode(bytes(blob))
except checkpoint.IntegrityError as err:
    print("corrupted file rejected:", err)

###############################################################################
# A missing checkpoint is exit status 2; a config error is exit status 1.

print("missing checkpoint exit status:", main(["decode", *common, "--checkpoint", str(work / "nope.ckpt")]))
(work / "bad.ini").write_text("[ilma]\nrho = 3\n")
print("bad config exit status:", main(["config", "--config", str(work / "bad.ini")]))
print("weights finite:", all(np.isfinite(p.data).all() for p in model.params.values()))
