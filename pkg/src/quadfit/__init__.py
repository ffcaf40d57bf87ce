"""Audio-visual 3D quadruped motion capture at desk scale.

Subsystems: a parametric quadruped mesh (shape space, kinematics, skinning),
bounding-box-conditioned camera math, a differentiable silhouette renderer,
the training losses, a reverse-mode tape with Adam, log-mel audio features,
evaluation metrics, synthetic data generation, and small fusion regressors.
"""

__version__ = "0.1.0"
