"""Unsupervised concept discovery and scoring with binary surrogate networks."""

__version__ = "0.1.0"

from .concepts import (
    ConceptScore,
    GlobalExplanation,
    LocalExplanation,
    extract_global,
    extract_local,
    kmeans,
    render_score_map,
    score_concepts,
    select_p,
    select_p_for_class,
)
from .dataset import (
    AuxiliaryDataset,
    ValidationScenario,
    build_auxiliary_dataset,
    load_manifest,
    make_validation_scenarios,
    save_manifest,
)
from .segmentation import (
    Image,
    SegmentMask,
    SuperpixelImage,
    extract_superpixel_images,
    load_image,
    slic_segment,
)
from .surrogate import (
    Classifier,
    TrainingConfig,
    adapt_to_binary,
    embed,
    evaluate_validation,
    fine_tune,
    load_checkpoint,
    make_base_model,
    predict_logits,
    save_checkpoint,
)
