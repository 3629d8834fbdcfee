"""Content-based image retrieval over precomputed embeddings.

The package stores L2-normalized embedding vectors in an immutable index,
answers exact top-N cosine-similarity queries with deterministic ranking,
and evaluates retrieval quality (Precision@N), embedding-space structure
(kNN and linear probes), and index-size ablations.
"""

from .ablation import (
    AblationConfig,
    AblationCurve,
    AblationRow,
    eligible_classes,
    fixed_query_set,
    run_ablation,
)
from .engine import (
    RetrievalResult,
    SearchHit,
    batch_top_n,
    cosine_similarity,
    top_n,
)
from .errors import CbirError
from .formats import (
    EmbeddingFile,
    load_index,
    read_embedding_file,
    read_manifest,
    save_index,
    write_embedding_file,
    write_manifest,
)
from .metrics import (
    MetricsReport,
    RelevanceJudgment,
    evaluate_retrieval,
    judge,
    per_class_report,
    precision_at_n_macro,
    precision_at_n_micro,
)
from .probes import (
    KnnConfig,
    LinearProbeConfig,
    ProbeReport,
    auprc_scores,
    f1_scores,
    knn_classify,
    linear_predict,
    select_k,
    train_linear_probe,
)
from .store import (
    ClassTable,
    EmbeddingRecord,
    ManifestEntry,
    PreparationRules,
    VectorIndex,
    build_index,
    l2_normalize,
    patient_wise_split,
    prepare_manifest,
)

__version__ = "0.1.0"

__all__ = [
    "AblationConfig",
    "AblationCurve",
    "AblationRow",
    "CbirError",
    "ClassTable",
    "EmbeddingFile",
    "EmbeddingRecord",
    "KnnConfig",
    "LinearProbeConfig",
    "ManifestEntry",
    "MetricsReport",
    "PreparationRules",
    "ProbeReport",
    "RelevanceJudgment",
    "RetrievalResult",
    "SearchHit",
    "VectorIndex",
    "auprc_scores",
    "batch_top_n",
    "build_index",
    "cosine_similarity",
    "eligible_classes",
    "evaluate_retrieval",
    "f1_scores",
    "fixed_query_set",
    "judge",
    "knn_classify",
    "l2_normalize",
    "linear_predict",
    "load_index",
    "patient_wise_split",
    "per_class_report",
    "precision_at_n_macro",
    "precision_at_n_micro",
    "prepare_manifest",
    "read_embedding_file",
    "read_manifest",
    "run_ablation",
    "save_index",
    "select_k",
    "top_n",
    "train_linear_probe",
    "write_embedding_file",
    "write_manifest",
]
