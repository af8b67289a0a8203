"""Deep-feature distances from a randomly initialised network.

Even untrained, the distances behave as a pseudo-metric: zero for identical
inputs and symmetric. Training (demo 03) is what makes them track quality.

    python demos/02_score_untrained.py
"""
from saqam.binaural import binauralize, perturb, synth_brir
from saqam.corpus import synth_utterance
from saqam.metric import score
from saqam.model import ModelConfig, build_model

model = build_model(ModelConfig(inception_width=24), seed=0).eval()
brir = synth_brir(20.0, 0.0, rt60_s=0.25, seed=3)
ref = binauralize(synth_utterance(1, duration=3.0), brir)
test = binauralize(synth_utterance(2, duration=3.0), brir)

for label, x in [("identical", ref), ("other utterance", test), ("other + 0 dB noise", perturb(test, "additive_noise", 0.0, seed=4))]:
    r = score(model, x, ref)
    print(f"{label:20s} D1 {r.d1_lq:.4f}  D2 {r.d2_sq:.4f}  D3 {r.d3_ovrl:.4f}")
