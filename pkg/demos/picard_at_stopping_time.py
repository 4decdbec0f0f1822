"""Solve the Duhamel equation by Picard iteration up to the random stopping time.

First a contraction constant and horizon are calibrated, then for a few
(white-noise data, noise path) draws the residual history is printed. The
Lipschitz quotients stay below one half.

    python3 demos/picard_at_stopping_time.py
"""

import numpy as np

from skdvb.mild import ContractionConfig, contraction_trial, self_consistent_horizon

N = 16
phi = np.arange(1, N + 1, dtype=float) ** -0.83
cfg, cal, history = self_consistent_horizon(N, phi, ContractionConfig(), seed=0)
for h in history:
    print(f"horizon {h['horizon']:.3e}: C = {h['C']:.4f}, threshold {h['expression']:.3f}")
print(f"calibrated C = {cfg.C:.4f} on horizon {cfg.horizon:.3e}\n")
for draw in range(5):
    row = contraction_trial(N, phi, cfg, seed=1, draw=draw)
    print(f"draw {draw}: T = {row['stopping_time']:.3e}{' (cap)' if row['capped'] else ''}, "
          f"{row['iterations']} iterations, factor {row['contraction_factor']:.3f}, "
          f"final residual {row['final_residual']:.1e}")
