"""curvedetect: black-box machine-generated text detection.

The detection statistic compares a text's log-probability under a scorer
backend with the mean log-probability of its mask-and-fill perturbations;
machine-generated text sits at a local optimum of the generator-like
likelihood and scores high. The package ships deterministic built-in
n-gram generator/detector/filler backends for fully offline experiments,
wire clients for external model servers (OpenAI-compatible completions
plus minimal /score and /fill routes) with a content-addressed response
cache, and a manifest-driven experiment runner that produces
cross-detection AUC matrices, difference matrices, breakdowns, and
ablation sweeps as reproducible file artifacts.

Typical library use:

    from curvedetect import (
        NGramModel, NGramScorer, NGramGenerator, UnigramFillBackend,
        GenerationParams, PerturbationConfig,
        build_pool, perturb_k, curvature, auc,
    )

    model = NGramModel.train(train_texts, order=3, smoothing_k=1e-4)
    pool = build_pool(human_texts, NGramGenerator(model),
                      n_per_class=300, gen_params=GenerationParams(), seed=0)

The `curvedetect` CLI drives the same machinery from JSON manifests; see
README.md.
"""

from .curvature import CurvatureResult, Verdict, classify, curvature, curvature_from_reports
from .errors import (
    BackendError,
    CapabilityError,
    CorpusError,
    CurveDetectError,
    FillProtocolError,
    GenerationError,
    ManifestError,
    OfflineError,
    ProtocolError,
    SpanPlacementError,
    TransportError,
    ValidationError,
)
from .evalstats import (
    DetectionMatrix,
    RocCurve,
    ScoreBreakdown,
    auc,
    breakdown,
    build_matrix,
    roc_curve,
)
from .modelclient import (
    EndpointConfig,
    GenerationParams,
    ModelClient,
    RemoteFillBackend,
    RemoteGenerator,
    RemoteScorer,
    ResponseCache,
    parse_sentinel_fills,
)
from .perturb import (
    EchoFillBackend,
    FillBackend,
    FillRequest,
    MaskPlan,
    PerturbationConfig,
    PerturbedText,
    UnigramFillBackend,
    apply_mask,
    builtin_fill,
    perturb_k,
    select_spans,
)
from .runner import (
    ExperimentManifest,
    load_manifest,
    parse_manifest,
    run_ablation_filler,
    run_ablation_maskpct,
    run_checkpoint_sweep,
    run_matrix,
)
from .scorer import NGramModel, NGramScorer, ScoreReport, ScorerBackend, sample, tokenize, train_ngram
from .textpool import (
    GeneratorBackend,
    Label,
    NGramGenerator,
    TargetPool,
    TextRecord,
    build_pool,
    extract_prompt,
    load_corpus,
    read_pool,
    write_pool,
)
from .version import ENGINE_VERSION

__version__ = ENGINE_VERSION
