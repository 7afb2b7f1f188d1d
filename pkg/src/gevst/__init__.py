"""Geometry-entangled visual-semantic captioner, desk scale.

Subpackages:
  tensor           reverse-mode autodiff engine (float64, tape-based)
  nn               shared layers, parameter containers, init
  geometry         bounding boxes and geometry embeddings
  data             synthetic scene/caption generator, vocabulary, JSONL io
  caption_encoder  dense-caption text encoder
  fusion           geometry-content fusion cells
  encoder          geometry-entangled self-attention branches
  decoder          branch-modulated caption decoder, greedy/beam decoding
  metrics          BLEU / ROUGE-L / CIDEr-D
  training         XE + self-critical training, Adam, checkpoints
  cli              command-line pipeline
"""

__version__ = "0.1.0"
