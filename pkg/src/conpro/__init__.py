"""conpro: a desk-scale laboratory for severity-ordered representation learning.

Two training phases: binary contrastive separation of normal vs. abnormal
samples, then pairwise preference optimization that pulls less severe
samples toward a normality anchor in embedding space. Ships with a
deterministic synthetic ordinal-severity generator, supervised-contrastive
baselines, a frozen-encoder probe protocol, and severity-aware metrics.
"""

__version__ = "0.1.0"
