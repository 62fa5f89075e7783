"""Zero-shot geospatial image classification.

A vision model describes each image patch, a text model maps the
description onto the user's classes, and an embedding similarity fallback
covers the cases where the text model never names a valid class. Class
lists can be grouped into taxonomies by the models themselves and then
classified hierarchically, level by level.
"""

from .cache import CachingBackend, ResponseStore
from .config import RunConfig, load_run_config
from .errors import (
    BackendFailure,
    ConfigError,
    DegenerateEmbedding,
    GridTooFine,
    GvlError,
    MalformedModelOutput,
    MaskMismatch,
    MissingGeoContext,
    PathMismatch,
    RateLimited,
    SchemaViolation,
    TranscriptMiss,
    UnknownLabel,
    UnsupportedImage,
)
from .evaluation import (
    ConfusionMatrix,
    EvaluationReport,
    RunSummary,
    emit_comparison,
    emit_report,
    format_ratio,
    score,
    score_hierarchical,
)
from .gateway import (
    Decoding,
    HttpBackend,
    ModelHandle,
    ModelRequest,
    ModelResponse,
    RateLimiter,
    RetryPolicy,
    ScriptedBackend,
    ScriptedTranscript,
    fingerprint,
    invoke,
)
from .hierarchy import HierarchicalOutcome, classify_hierarchical, truth_path, validate_path
from .imaging import (
    BUILDINGS,
    NO_BUILDINGS,
    FootprintMask,
    ImagePatch,
    ManifestRow,
    Scene,
    extract_geo_context,
    label_patch,
    load_mask,
    load_scene,
    pick_timestamp,
    read_dataset_manifest,
    tile,
)
from .manifest import RunManifest
from .pipeline import (
    ClassificationOutcome,
    Description,
    PromptConfig,
    build_vision_prompt,
    classify_description,
    classify_patch,
    fallback_classify,
    obtain_description,
    rank_by_cosine,
    resolve_class,
)
from .taxonomy import (
    ClassLabel,
    ClusterSpec,
    Taxonomy,
    TaxonomyNode,
    assign_label,
    build_hierarchy,
    build_level,
    clean_name,
    deserialize_taxonomy,
    generate_meta_class_names,
    load_taxonomy,
    match_key,
    parse_cluster_name_line,
    save_taxonomy,
    serialize_taxonomy,
    step1_prompt,
    step2_prompt,
    unique_labels,
)

__version__ = "0.1.0"
