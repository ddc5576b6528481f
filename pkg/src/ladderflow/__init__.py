"""Ladder-side diffusion tuning at desk scale.

A frozen toy multimodal transformer exposes per-layer hidden states of
learnable query tokens; lightweight two-layer connectors feed them, layer
by layer, into a trainable flow-matching diffusion transformer. Includes
the staged training recipe, a spike guard, fused inference with cached
conditions, a final-layer-only ablation baseline, and a synthetic
compositional benchmark with an exact oracle evaluator.
"""

__version__ = "0.1.0"
