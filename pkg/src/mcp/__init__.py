"""Motion-contrastive self-supervised video representation learning.

A from-scratch desk-scale pipeline: a minimal reverse-mode autodiff engine,
a synthetic moving-sprite corpus with long-gap frame-difference motion
views, joint speed-perception + instance-contrastive pretraining, and k-NN
retrieval / fine-tuned classification evaluation.
"""

__version__ = "0.1.0"
