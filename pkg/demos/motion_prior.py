"""Motion model and entangled prior, without any network.

Moves a rotated box with a known transform, recovers the transform from
the two boxes, then fits a full-covariance Gaussian to latents measured
on synthetic sequences and compares it with the generating prior.
"""
import numpy as np

from mvprior import dataprep, mgd
from mvprior.errors import GenerationError
from mvprior.geometry import FrameDims, MotionParams, RBBox, apply_transform, extract_motion

dims = FrameDims(128, 128)

box = RBBox(60, 70, 30, 14, 0.2)
step = MotionParams(1.1, 0.95, 0.05, 0.02, -0.01)
moved = apply_transform(box, step, dims)
print("moved box:", moved)
print("recovered:", extract_motion(box, moved, dims))

prior = dataprep.desk_motion_prior()
seqs = []
for i in range(100):
    try:
        seqs.append(dataprep.synthesize_sequence(prior, None, 12, dims, dataprep.sequence_rng(3, i)))
    except GenerationError:  # box left the frame
        pass
fitted = dataprep.analyze_dataset(seqs)

np.set_printoptions(precision=3, suppress=True)
print("generating mu:", prior.mu)
print("refitted   mu:", fitted.mu)
print("correlations (refitted):")
s = fitted.std
print(fitted.sigma / np.outer(s, s))
print("generating std:", prior.std)
print("refitted   std:", fitted.std)
print("Mahalanobis distance    = %.4f" % mgd.mahalanobis(prior, fitted))
