"""
Comparing shape families with Gaussian mixtures
===============================================

Fit a Gaussian mixture to every cloud, then estimate a Monte-Carlo
log-likelihood-ratio divergence between clouds of two families.
"""
import numpy as np

from unirit import gmm, synth

rng = np.random.default_rng(0)
sphere = synth.base_shape("sphere", 1024, rng) * 100
ellipsoid = synth.base_shape("ellipsoid", 1024, rng) * 100

# EM never decreases the mean log-likelihood.
trace = gmm.fit_em_trace(ellipsoid, K=8, seed=0)
print("EM iterations:", trace.n_iter)
print("log-likelihood, first -> last: %.4f -> %.4f" % (trace.log_likelihood[0], trace.log_likelihood[-1]))

# The divergence of a mixture from itself is exactly zero, and it is
# antisymmetric for a fixed sample set.
g_s, g_e = gmm.fit_em(sphere, 8), gmm.fit_em(ellipsoid, 8)
print("self divergence:", gmm.mc_divergence(g_s, g_s, sphere))
print("D(sphere, ellipsoid) on sphere samples: %.3f" % gmm.mc_divergence(g_s, g_e, sphere))

# Full matrix: cross-family cells should exceed within-family ones.
collections = {
    "sphere": [synth.base_shape("sphere", 512, rng) for _ in range(6)],
    "ellipsoid": [synth.base_shape("ellipsoid", 512, rng) for _ in range(6)],
}
labels, matrix = gmm.divergence_matrix(collections, K=8, samples_per_pair=512, picks=6, repetitions=2)
print(labels)
print(np.round(matrix, 3))
