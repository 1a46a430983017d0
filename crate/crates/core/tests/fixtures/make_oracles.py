"""Regenerates metrics_oracle.json with scikit-image and scipy."""
import json
import math

import numpy as np
from scipy.stats import wilcoxon
from skimage.metrics import structural_similarity

N = 32


def pair(k):
    i, j = np.meshgrid(np.arange(N, dtype=float), np.arange(N, dtype=float), indexing="ij")
    x = 0.5 + 0.4 * np.sin(0.3 * (k + 1) * i / N * 4 + 0.17 * j + k)
    y = x + 0.1 * np.cos(0.23 * i * (k % 7 + 1) - 0.41 * j) + 0.02 * np.sin(1.3 * i * j + k)
    return x, y


images = []
for k in range(50):
    x, y = pair(k)
    mse = float(np.mean((x - y) ** 2))
    images.append({
        "k": k,
        "mae": float(np.mean(np.abs(x - y))),
        "psnr": 10 * math.log10(1.0 / mse),
        "ssim": float(structural_similarity(x, y, data_range=1.0, gaussian_weights=True,
                                            sigma=1.5, use_sample_covariance=False)),
    })

rng = np.random.default_rng(2024)
wilcoxon_cases = []
for shift in [0.0, 0.2, 0.5, 1.0, -0.8]:
    while True:
        a = rng.normal(size=10)
        b = a + shift + rng.normal(size=10)
        d = np.abs(b - a)
        if len(np.unique(np.round(d, 12))) == 10:
            break
    p = float(wilcoxon(a, b, method="exact").pvalue)
    wilcoxon_cases.append({"a": a.tolist(), "b": b.tolist(), "p": p})

with open("metrics_oracle.json", "w") as f:
    json.dump({"size": N, "images": images, "wilcoxon": wilcoxon_cases}, f, indent=1)

from scipy.stats import gennorm

rng = np.random.default_rng(7)
tuples = []
for _ in range(1000):
    eps = float(rng.uniform(-3, 3))
    alpha = float(np.exp(rng.uniform(np.log(0.05), np.log(5))))
    beta = float(rng.uniform(0.5, 5))
    tuples.append([eps, alpha, beta, float(gennorm.logpdf(eps, beta, scale=alpha))])
with open("ggd_oracle.json", "w") as f:
    json.dump(tuples, f)
