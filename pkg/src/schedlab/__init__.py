"""schedlab: a desk-scale lab for multi-task speech representation
learning with acoustic and audio-visual contrastive objectives."""

__version__ = "0.1.0"
