"""Compliance classification of food items from fork-mounted force/torque
and pose time series: preprocessing, four classifier families, an evaluation
harness with statistics, and a synthetic-trial generator."""

from .core import (
    CLASS_ORDER,
    ComplianceClass,
    Dataset,
    DEFAULT_STREAM_DELAY,
    ITEM_CLASSES,
    ITEM_ORDER,
    PoseSample,
    Source,
    Trial,
    WrenchSample,
    align_streams,
    load_trials,
    save_trials,
)
from .errors import (
    DataError,
    DegenerateGroups,
    DegenerateSeries,
    DegenerateStream,
    DimensionMismatch,
    EmptyDataset,
    EmptyTrainingSet,
    HaptixError,
    MalformedRecord,
    MissingClass,
    NoContact,
    NonFiniteLoss,
    NumericalError,
    SingleClassData,
    TooFewTrials,
    UnknownFoodItem,
)
from .evaluation import (
    ClassifierSpec,
    EvalReport,
    FoldSplit,
    ablate_features,
    anova_oneway,
    cross_domain_eval,
    kfold_split,
    run_cv,
    ttest_2tailed,
    tukey_hsd,
)
from .hmm import (
    HmmClassifier,
    HmmModel,
    baum_welch,
    classify_hmm,
    forward_loglik,
    train_hmm_classifier,
)
from .nn import LstmModel, TcnModel, TrainConfig, cross_entropy, grad_check, softmax, train
from .preprocess import (
    FeatureMatrix,
    FeatureSet,
    NormStats,
    assemble_features,
    detect_contact,
    extract_window,
    first_derivative,
    fit_norm,
    prepare_trial,
    resample_linear,
)
from .svm import SvmModel, flatten, predict_svm, train_svm
from .synthgen import GenConfig, generate

__version__ = "0.1.0"
