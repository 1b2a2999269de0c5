"""Multilingual speech-driven 3D facial motion at desk scale.

Learns a discrete codebook of facial motions, synthesizes motion from
speech autoregressively with per-language style embeddings, and evaluates
lip sync with lip-vertex error and audio-visual lip readability. Ships a
hermetic synthetic viseme corpus so everything is testable offline.
"""

__version__ = "0.1.0"
