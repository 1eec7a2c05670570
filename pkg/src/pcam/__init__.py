"""Progressive-focus cross-attention domain adaptation, desk scale.

Library layout mirrors the pipeline: numerics and synthetic data feed a
minimal three-branch transformer; cross-attention rollout drives box
refinement and a concentration loss; pairing and the four-term objective
close the training loop; the CLI exposes generation, training, evaluation,
rollout export, the ablation protocols, and figure rendering.
"""

__version__ = "0.1.0"
