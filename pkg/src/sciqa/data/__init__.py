from .manifest import (
    IMPAIRMENT_DMOS,
    PRISTINE,
    QUALITY_MOS,
    DatasetManifest,
    ImageRecord,
    load_image,
    load_manifest,
    normalize_scores,
    parse_manifest,
    save_image,
    split_by_reference,
    split_counts,
    write_manifest,
)
from .patches import (
    PATCH_SIZE,
    TripletBatch,
    assemble_patches,
    extract_patches,
    patch_grid,
    sample_triplet_batch,
)
from .synthetic import (
    DISTORTION_TYPES,
    LADDERS,
    apply_distortion,
    synthesize_sci,
    synthetic_score,
    write_synthetic_corpus,
)
