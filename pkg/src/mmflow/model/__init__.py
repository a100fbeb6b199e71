from .checkpoint import load_checkpoint, save_checkpoint
from .embeddings import size_embedding, timestep_embedding
from .mmdit import (
    CharTokenizer,
    MMDiT,
    ModelConfig,
    TextEncoder,
    image_to_latent,
    image_token_grid,
    latent_to_image,
)
from .packing import (
    PackedBatch,
    SizeCondition,
    TextSequence,
    TokenGrid,
    pack_samples,
    patchify,
    unpatchify,
)
from .positions import PositionTable, assign_position_ids, rope_rotate

__all__ = [
    "CharTokenizer",
    "MMDiT",
    "ModelConfig",
    "PackedBatch",
    "PositionTable",
    "SizeCondition",
    "TextEncoder",
    "TextSequence",
    "TokenGrid",
    "assign_position_ids",
    "image_to_latent",
    "image_token_grid",
    "latent_to_image",
    "load_checkpoint",
    "pack_samples",
    "patchify",
    "rope_rotate",
    "save_checkpoint",
    "size_embedding",
    "timestep_embedding",
    "unpatchify",
]
