"""Learned image codec laboratory for YUV 4:2:0 sources.

Five transform-network designs (two per-channel-group baselines, a stacked
six-channel baseline, and three branched variants differing in activation),
a mean-scale hyperprior entropy model, a range-coder bitstream, and BD-rate
evaluation tooling, all on a handwritten numpy autograd engine.
"""

__version__ = "0.1.0"
