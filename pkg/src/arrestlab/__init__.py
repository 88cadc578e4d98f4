"""Adversarial finetuning with a representation constraint and noisy replay,
plus accuracy-robustness tradeoff metrics, on a small numpy autodiff core."""

__version__ = "0.1.0"
