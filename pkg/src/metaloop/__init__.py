"""Gradient-based meta-learning with per-group inner learning rates.

Modules:
    tensor: dense tensors with reverse-mode differentiation (second order capable).
    nn: ConvNet / MiniResNet backbones over named parameter groups.
    meta: inner/outer loops, MAML / ANIL / BOIL presets.
    tasks: synthetic few-shot domains, on-disk datasets, episode sampling.
    analysis: representation similarity, CKA, template tests, gradient norms.
    cli: experiment harness and ``metaloop`` command.
"""

__version__ = "0.1.0"
