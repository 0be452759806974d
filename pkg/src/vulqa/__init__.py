"""Multimodal code-vulnerability question answering at desk scale.

A code encoder feeds a projector whose outputs are spliced into a small
causal decoder adapted with LoRA; the package also covers tokenizer
training, QA data generation, metrics and an encoder-only classifier.
"""

__version__ = "0.1.0"
