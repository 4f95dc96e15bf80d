"""
Why outlier columns get their own path
======================================

Row-wise int8 scaling of activations is dominated by the largest entry in a
row. One hidden feature that runs a hundred times hotter than the rest
squeezes every other feature into a handful of int8 levels. Pulling that
column out and multiplying it at full precision restores the fidelity.
"""

import numpy as np

from clsrkit.quant import QuantizedLinear, mixed_matmul, outlier_columns


def rel_err(approx, exact):
    return np.linalg.norm(approx - exact) / np.linalg.norm(exact)


rng = np.random.default_rng(0)
W = rng.normal(size=(64, 64))
x = rng.normal(size=(32, 64))
print("well-behaved input, plain int8:", rel_err(mixed_matmul(x, QuantizedLinear.from_weight(W)), x @ W.T))

# %%
# Blow up feature 17.

x[:, 17] *= 100
exact = x @ W.T
cols = outlier_columns(x, 6.0)
print("flagged columns:", cols)
print("plain int8:     ", rel_err(mixed_matmul(x, QuantizedLinear.from_weight(W)), exact))
print("decomposed:     ", rel_err(mixed_matmul(x, QuantizedLinear.from_weight(W, outlier_cols=cols)), exact))

# %%
# Lowering the threshold moves more columns to the exact path. At zero every
# column is exact and so is the product.

for thr in (50, 6, 3, 1, 0):
    ql = QuantizedLinear.from_weight(W, outlier_cols=outlier_columns(x, thr))
    print(f"threshold {thr:>3}: {len(ql.outlier_cols):2d} outlier columns, error {rel_err(mixed_matmul(x, ql), exact):.2e}")
