"""navlab: a desk-scale object-goal navigation lab.

Gridworld simulation, semantic-map history abstraction, mixed-quality
demonstration generation, progress-reward labeling, a numpy autodiff core,
a map-observation fusion policy, three-stage training, and SR/SPL
evaluation.
"""

__version__ = "0.1.0"
