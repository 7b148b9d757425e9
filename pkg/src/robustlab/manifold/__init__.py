from .projection import (
    Histogram,
    ProjectionResult,
    decoder_jacobian,
    distance_histogram,
    least_squares,
    loss_gradient,
    nearest_neighbors,
    project_decoder,
    project_knn,
    project_with_restarts,
    subspace_cosine,
    subspace_projection,
    tangent_alignment,
)
from .true import TrueManifold
from .vaegan import (
    ClassManifolds,
    ManifoldModel,
    ManifoldTrainingConfig,
    TrainingDiverged,
    discriminator_loss_from_probabilities,
    kl_to_standard_normal,
    train_class_manifolds,
    train_manifold,
    vae_gan_losses,
)

__all__ = [
    "ClassManifolds",
    "Histogram",
    "ManifoldModel",
    "ManifoldTrainingConfig",
    "ProjectionResult",
    "TrainingDiverged",
    "TrueManifold",
    "decoder_jacobian",
    "discriminator_loss_from_probabilities",
    "distance_histogram",
    "kl_to_standard_normal",
    "least_squares",
    "loss_gradient",
    "nearest_neighbors",
    "project_decoder",
    "project_knn",
    "project_with_restarts",
    "subspace_cosine",
    "subspace_projection",
    "tangent_alignment",
    "train_class_manifolds",
    "train_manifold",
    "vae_gan_losses",
]
