from .glyphs import LETTERS, STYLES, GlyphPrototype, builtin_prototypes, load_prototypes, render_glyph
from .synth import (
    IDENTITY_POSE,
    POSE_HIGH,
    POSE_LOW,
    POSE_NAMES,
    LatentPose,
    SyntheticDataset,
    compose_affine,
    compose_affine_tensor,
    decode_batch,
    generate,
    make_splits,
    true_decoder,
)

__all__ = [
    "IDENTITY_POSE",
    "LETTERS",
    "POSE_HIGH",
    "POSE_LOW",
    "POSE_NAMES",
    "STYLES",
    "GlyphPrototype",
    "LatentPose",
    "SyntheticDataset",
    "builtin_prototypes",
    "compose_affine",
    "compose_affine_tensor",
    "decode_batch",
    "generate",
    "load_prototypes",
    "make_splits",
    "render_glyph",
    "true_decoder",
]
