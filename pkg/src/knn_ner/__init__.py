"""Retrieval-augmented named entity recognition.

The per-token label distribution of a base sequence tagger is interpolated
with a k-nearest-neighbor distribution retrieved from a cached datastore of
(contextual embedding, gold label) pairs, then scored with span-level
precision/recall/F1.
"""

from .core import (
    EntitySpan,
    Hyperparams,
    LabelDistribution,
    LabelVocab,
    Sentence,
    TaggingScheme,
    extract_spans,
    render_spans,
    stable_softmax,
)
from .datastore import (
    Datastore,
    DatastoreMeta,
    DatastoreStats,
    build_datastore,
    datastore_stats,
    load_datastore,
    save_datastore,
)
from .dump_io import (
    UNLABELED,
    DumpSentence,
    EmbeddingDump,
    dump_content_hash,
    read_dump,
    subsample_dump,
    write_dump,
)
from .engine import (
    ApproxIndex,
    ApproxIndexParams,
    NeighborSet,
    brute_force_oracle,
    build_approx_index,
    l2_distance,
    load_approx_index,
    measure_recall,
    save_approx_index,
    search_approx,
    search_exact,
    search_exact_batch,
)
from .evaluate import (
    EvalOutcome,
    LowResourcePoint,
    MetricsReport,
    SweepCell,
    SweepResult,
    evaluate_dump,
    low_resource_curve,
    span_prf,
    sweep,
)
from .interpolate import (
    InterpolationTrace,
    PredictionResult,
    interpolate,
    knn_distribution,
    predict_tokens,
)
from .synthetic import (
    DEFAULT_BENCHMARK,
    CentroidModel,
    SyntheticConfig,
    apply_centroid_model,
    benchmark_with,
    fit_centroid_baseline,
    gen_synthetic,
)

__version__ = "0.1.0"
