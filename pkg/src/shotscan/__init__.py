"""Monte Carlo measurement of how in-context example count, order, and selection drive accuracy."""

from .analytics import (
    CurveSummary,
    Selection,
    TrialZScores,
    ZScoreReport,
    per_example_average,
    select_extremes,
    summarize_curve,
    trial_zscores,
    zscore_report,
)
from .corpus import (
    Dataset,
    DatasetSchema,
    Exemplar,
    SupportSet,
    load_dataset,
    sample_support,
    subsample_eval,
)
from .engine import (
    EvalRecord,
    PredictionCache,
    PrefixEvaluator,
    RunArtifact,
    RunConfig,
    evaluate_prefix,
    exhaustive_orderings,
    permute,
    read_records,
    run_experiment,
    run_trial,
    write_records,
)
from .errors import (
    BackendError,
    ConfigError,
    DatasetError,
    EngineAbort,
    OracleGuardError,
    ProtocolError,
    SelectionError,
    ShotscanError,
    TemplateError,
    TransportError,
)
from .oracle import ExactCurve, VerifyReport, exact_expectation, verify_estimator
from .prompting import (
    PromptTemplate,
    RenderedPrompt,
    default_template,
    load_template,
    render,
    verbalize,
)
from .remote import RemoteBackend, RemoteConfig
from .scorer import CandidateScore, MockBackend, MockModelSpec, classify, mock_classify

__version__ = "0.1.0"
