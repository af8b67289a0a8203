"""Render a synthetic utterance at a few directions and degrade it.

Prints the interaural time and level differences that the synthetic BRIR
imposes, then the SNR actually achieved by each additive-noise level.

    python demos/01_render_and_perturb.py
"""
import numpy as np

from saqam.binaural import azimuth_bin, binauralize, interaural_cues, perturb, synth_brir
from saqam.corpus import synth_utterance

speech = synth_utterance(seed=0, duration=3.0)

print("azimuth  bin   ITD (samples)  ILD (dB)  R/L energy (dB)")
for az in (-60.0, -20.0, 0.0, 20.0, 60.0):
    itd, ild = interaural_cues(az, 0.0)
    sig = binauralize(speech, synth_brir(az, 0.0, rt60_s=0.3, seed=1))
    ratio = 10 * np.log10(np.mean(sig.right**2) / np.mean(sig.left**2))
    print(f"{az:7.1f}  {azimuth_bin(az):3d}  {itd * 16000:13.2f}  {ild:8.2f}  {ratio:15.2f}")

clean = binauralize(speech, synth_brir(30.0, 0.0, rt60_s=0.3, seed=1))
print("\nrequested SNR -> measured SNR")
for snr in (-10, 0, 10, 20):
    noisy = perturb(clean, "additive_noise", snr, seed=5)
    err = noisy.samples - clean.samples
    print(f"{snr:6d} dB -> {10 * np.log10(clean.power() / np.mean(err**2)):6.2f} dB")
