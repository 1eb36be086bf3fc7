"""echoassist: cardiac ultrasound view classification, image-quality
grading, and real-time scan assistance built on a shared residual encoder."""

from .data import (
    AcquisitionMetadata,
    DatasetManifest,
    GradeValue,
    GRADE_BANDS,
    ImageSample,
    PreprocessSpec,
    Split,
    ViewClass,
    dataset_statistics,
    grade_band,
    ingest_directory,
    preprocess,
    stratified_split,
)
from .model import (
    EncoderSpec,
    ModelBundle,
    RESNET18_SPEC,
    classify,
    count_trainable_params,
    estimate_flops,
    expand_classification_head,
    forward_features,
    grade,
    load_bundle,
    new_bundle,
    save_bundle,
)
from .synth import GeneratorConfig, SynthConfig, generate_dataset, grade_of, render_view

__version__ = "0.1.0"

__all__ = [
    "AcquisitionMetadata", "DatasetManifest", "GradeValue", "GRADE_BANDS",
    "ImageSample", "PreprocessSpec", "Split", "ViewClass",
    "dataset_statistics", "grade_band", "ingest_directory", "preprocess",
    "stratified_split",
    "EncoderSpec", "ModelBundle", "RESNET18_SPEC", "classify",
    "count_trainable_params", "estimate_flops", "expand_classification_head",
    "forward_features", "grade", "load_bundle", "new_bundle", "save_bundle",
    "GeneratorConfig", "SynthConfig", "generate_dataset", "grade_of", "render_view",
    "__version__",
]
