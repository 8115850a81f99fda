"""Desk-scale semi-supervised speech translation on a synthetic benchmark:
contrastive encoder pretraining, supervised fine-tuning, self-training with
pseudo-labels, and shallow-fusion beam decoding with in-domain language models."""

__version__ = "0.1.0"
