"""Enhancement measures on a noisy mixture and its oracle-mask upper bound.

    python demos/04_enhancement_measures.py
"""
from saqam.corpus import synthetic_clean_pool
from saqam.enhance import build_enhancement_set, measures, oracle_mask

pairs = build_enhancement_set(synthetic_clean_pool(8, seed=0), 3, seed=1)
for p in pairs:
    noisy = measures(p.noisy, p.clean)
    oracle = measures(oracle_mask(p.noisy, p.clean), p.clean)
    print(
        f"SNR {p.snr_db:5.1f} dB | noisy Si-SDR {noisy['si_sdr_db']:6.2f} MRSTFT {noisy['mrstft']:.3f}"
        f" | oracle Si-SDR {oracle['si_sdr_db']:6.2f} MRSTFT {oracle['mrstft']:.3f}"
    )
