"""Online continual learning at desk scale.

Building blocks: an autodiff tensor core, a zoo of normalization layers
including the split-parallel module, a fixed random multi-scale encoder,
cross-task distillation losses, replay buffers, synthetic task streams,
and a seeded experiment harness with a CLI front end.
"""

__version__ = "0.1.0"
