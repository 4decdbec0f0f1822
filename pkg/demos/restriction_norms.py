"""Restriction norms of free waves and of products.

The X^{s,b} norm of a free solution on [0, T] grows like T^{1/2 - b} for
short windows; the projected bilinear ratio stays bounded as N doubles.

    python3 demos/restriction_norms.py
"""

from skdvb.xsb import bilinear_sweep, gain_power_check

for b in (0.3, 0.4, 0.45):
    res = gain_power_check(b, -0.55)
    print(f"b = {b}: fitted slope {res['slope']:.3f}, expected {res['target']:.3f}")
for n in (8, 16):
    sw = bilinear_sweep(n, -0.55, 0.05, 0.05, 0.5, 20, seed=0)
    print(f"N = {n:>2}: bilinear ratio max {sw['max']:.4f}, median {sw['median']:.4f}")
