"""Icon similarity search over content and style neural embeddings."""

from .backbone import (
    BackboneHandle,
    InferenceGraph,
    build_stub_graph,
    extract,
    load_graph,
    load_image,
    preprocess,
    resolve_backbone,
    save_graph,
)
from .config import (
    DEFAULT_ALPHA,
    DEFAULT_MEANS,
    DEFAULT_PROJECTION_SEED,
    PipelineConfig,
    ResolvedConfig,
)
from .corpus import (
    Corpus,
    IconRecord,
    LabelledGroup,
    char_cosine_similarity,
    load_manifest,
    propose_labelled_groups,
    read_groups,
    write_groups,
)
from .embeddings import (
    EmbeddingStore,
    IconEmbedding,
    ProjectionMatrix,
    encode_corpus,
    encode_icon,
    flatten_upper,
    gram,
    make_projection_for,
    project,
    read_store,
    resolve_config,
    style_vector_length,
    write_store,
)
from .errors import IconsimError
from .evaluation import (
    CounterfeitReport,
    EvaluationReport,
    counterfeit_report,
    evaluate_grid,
    format_rate_table,
    retrieval_rate,
    sift_retrieval_rate,
    threshold_curve,
)
from .metrics import (
    MetricConfig,
    all_metrics,
    distance,
    distances_to_all,
    max_distance,
    normalize_distance,
)
from .retrieval import (
    Index,
    QueryFilter,
    RetrievalResult,
    build_index,
    knee_threshold,
    max_normalized_grid,
    query_top_k,
)
from .sift import (
    read_descriptor_cache,
    sift_corpus,
    sift_descriptors,
    sift_distance,
    write_descriptor_cache,
)

__version__ = "0.1.0"

__all__ = [
    "BackboneHandle",
    "Corpus",
    "CounterfeitReport",
    "DEFAULT_ALPHA",
    "DEFAULT_MEANS",
    "DEFAULT_PROJECTION_SEED",
    "EmbeddingStore",
    "EvaluationReport",
    "IconEmbedding",
    "IconRecord",
    "IconsimError",
    "Index",
    "InferenceGraph",
    "LabelledGroup",
    "MetricConfig",
    "PipelineConfig",
    "ProjectionMatrix",
    "QueryFilter",
    "ResolvedConfig",
    "RetrievalResult",
    "all_metrics",
    "build_index",
    "build_stub_graph",
    "char_cosine_similarity",
    "counterfeit_report",
    "distance",
    "distances_to_all",
    "encode_corpus",
    "encode_icon",
    "evaluate_grid",
    "extract",
    "flatten_upper",
    "format_rate_table",
    "gram",
    "knee_threshold",
    "load_graph",
    "load_image",
    "load_manifest",
    "make_projection_for",
    "max_distance",
    "max_normalized_grid",
    "normalize_distance",
    "preprocess",
    "project",
    "propose_labelled_groups",
    "query_top_k",
    "read_descriptor_cache",
    "read_groups",
    "read_store",
    "resolve_backbone",
    "resolve_config",
    "retrieval_rate",
    "save_graph",
    "sift_corpus",
    "sift_descriptors",
    "sift_distance",
    "sift_retrieval_rate",
    "style_vector_length",
    "threshold_curve",
    "write_descriptor_cache",
    "write_groups",
    "write_store",
]
