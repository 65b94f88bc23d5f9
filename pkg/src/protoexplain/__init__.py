"""Prototype-based post-hoc explanations for frozen CNN classifiers.

The pipeline operates purely on exported activation tensors: it fits
class-wise k-means prototype banks at three locations (classifier
weights, pooled embeddings, multi-depth composite features), produces
predictions, explanation maps, and gradient-free attribution cascades,
and evaluates prototype alignment and accuracy.
"""

from .attribution import AttributionMap, attribution_cascade, base_attribution, refine
from .bank import (
    LOCATION_CLASSIFIER,
    LOCATION_COMPOSITE,
    LOCATION_EMBEDDING,
    PrototypeBank,
    load_bank,
    save_bank,
)
from .encoder_explainer import (
    CompositeFeature,
    CountsPrediction,
    ExplanationMap,
    compose,
    explain,
    fit_composite_bank,
    predict_counts,
    upsample_bilinear,
)
from .errors import (
    ConfigurationError,
    FormatError,
    InsufficientPointsError,
    ProtoExplainError,
    UnsupportedFormatError,
    ValidationError,
)
from .eval_report import AccuracyReport, AlignmentReport, accuracy, cosine_alignment
from .kmeans import KMeansConfig, KMeansResult, fit, fit_classwise
from .kmex import KmexModel, fit_kmex, predict, predict_batch, similarity
from .sem_core import (
    LinearClassifier,
    avg_pool,
    classifier_as_bank,
    classify,
    sem_forward,
)
from .tensor_store import (
    ActivationRecord,
    DatasetManifest,
    iter_records,
    load_manifest,
    read_tensor,
    write_tensor,
)

__version__ = "0.1.0"
