"""Image retrieval and pattern spotting for document-image corpora.

Offline: region proposals are generated per page, embedded once by a
shared-weight pair-similarity network, and persisted in a feature
store. Online: queries are embedded and ranked against every stored
candidate by exhaustive Euclidean distance, optionally pre-filtered by
an aspect-ratio gate. Evaluation covers both the retrieval protocol
(distinct documents) and the spotting protocol (localized boxes scored
by intersection-over-union).
"""

from .errors import (
    ConfigurationError,
    CorpusError,
    CountError,
    DivergenceError,
    DocspotError,
    FormatError,
    InputError,
    ParameterError,
)
from .evaluation import (
    EvalReport,
    GroundTruth,
    GtEntry,
    QueryResult,
    QuerySpec,
    average_precision,
    evaluate,
    load_ground_truth,
    queries_from_ground_truth,
    recall_at_k,
    retrieval_relevance,
    save_ground_truth,
    spotting_relevance,
)
from .geometry import AspectGate, BBox, aspect_gate, iou
from .images import crop, read_pgm, resize_bilinear, write_pgm
from .index import (
    FeatureStore,
    IndexResult,
    QueryRequest,
    RankedHit,
    ThroughputRow,
    bench_throughput,
    import_features,
    index_corpus,
    load_store,
    save_store,
    search,
    search_by_vector,
    search_via_pair_head,
)
from .proposals import (
    Candidate,
    ProposalParams,
    Region,
    adaptive_threshold,
    filter_candidates,
    propose,
    read_proposals,
    region_similarity,
    segment,
    write_proposals,
)
from .siamese import (
    Conv,
    Dense,
    GradCheckResult,
    MaxPool,
    PairLossTerm,
    PairSample,
    Relu,
    SiameseModel,
    TrainConfig,
    default_encoder,
    embed,
    embed_batch,
    grad_check,
    init_model,
    load_model,
    make_pairs,
    models_equal,
    pair_distance,
    save_model,
    train,
)
from .synth import CATEGORIES, generate_corpus, write_corpus

__version__ = "0.1.0"
