"""Multimodal emotion recognition core: semantic-guided visual sequence
compression, dilated causal TCN, label-masked contrastive loss, and the
training/evaluation pipeline around them."""

__version__ = "0.1.0"
