"""Planted-signal run through the library API: generate, train, evaluate, explain.

Run: python demos/synthetic_pipeline.py [steps] [out_dir]
Defaults to 400 steps (about a minute) and ./demo_out.
"""

import sys
from pathlib import Path

import numpy as np

from pumba.data import SampleArrays, SyntheticSpec, synthesize
from pumba.evaluation import evaluate
from pumba.explain import branch_relevance_batch, explain_sample, export_overlay, feature_importance
from pumba.model import CHANNELS, ModelConfig, init_params, score
from pumba.training import fit
from pumba.vim import EncoderConfig

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 400
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out")
out.mkdir(exist_ok=True)

# 20 complexes, one native and 20 decoys each; natives carry a blob in the hydropathy pair
spec = SyntheticSpec(complexes=20, strength=0.8, seed=0)
data = SampleArrays.from_samples(synthesize(spec))
held = sorted(set(data.complex_ids))[10:]
train, test = data.split_by_complex(held)
print(f"{len(train)} training samples, {len(test)} held out; planted group: {spec.signal_group}")

# small encoder so the run stays on a laptop budget
cfg = ModelConfig(EncoderConfig(image_size=32, patch_size=8, width=32, depth=1, state_size=8),
                  final_depth=1, final_conv_width=1)
params = init_params(cfg, 0)
_, hist = fit(train, params, cfg, steps, seed=0, log_every=0)
print(f"loss {hist[0].total:.3f} -> {np.mean([h.total for h in hist[-20:]]):.3f}")

s = np.concatenate([score(test.images[i:i + 64], test.energies[i:i + 64], params, cfg).score.data
                    for i in range(0, len(test), 64)])
report = evaluate(test.complex_ids, test.model_ids, s, test.labels, test.categories, success_ks=(1, 10))
print(report.to_text())

# which branch does the final encoder lean on, averaged over held-out natives
nat = test.labels == 1
fi = feature_importance(branch_relevance_batch(test.images[nat], test.energies[nat], params, cfg).mean(0))
print("branch importance z:", {g: round(z, 2) for g, z in fi.as_dict().items()}, "top:", fi.top())

# pixel maps for the first held-out native
i = int(np.flatnonzero(nat)[0])
ex = explain_sample(test.images[i], test.energies[i], params, cfg)
for ch in cfg.groups.channels[fi.top()]:
    path = out / f"{test.complex_ids[i]}_{CHANNELS[ch]}.ppm"
    export_overlay(ex.maps[fi.top()], test.images[i, ch], path)
    print("wrote", path)
