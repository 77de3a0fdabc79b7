"""What the bottleneck does with one batch of head activations.

Builds (mu', Sigma') from random 50-wide heads, checks Sigma' is PSD,
then maps prior draws onto the posterior and compares sample moments.
"""
import numpy as np

from mvprior import bottleneck as bn
from mvprior import mgd

rng = np.random.default_rng(0)
B = 8
heads = bn.HeadActivations(rng.normal(size=(B, 50)), rng.normal(size=(B, 50)))
post = bn.posterior_from_heads(heads)

np.set_printoptions(precision=4, suppress=True)
print("mu'   :", post.mu_prime)
print("eig Sigma':", np.linalg.eigvalsh(post.sigma_prime))

prior = mgd.published_prior()
n = 20_000
eps = bn.arrange_prior_samples(mgd.sample(prior, n * 10, rng), n)
z = bn.reparameterize(prior, post, eps)
print("sample mean:", z.mean(axis=(0, 2)))
print("sample std :", z.std(axis=(0, 2)))
print("target std :", post.std)
