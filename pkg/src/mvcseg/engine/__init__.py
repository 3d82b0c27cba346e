from .fewshot import (
    EVAL_STREAM,
    TRAIN_STREAM,
    DivergenceError,
    TrainResult,
    episode_seed,
    eval_fewshot,
    predict,
    train_fewshot,
)
from .metrics import (
    BenchmarkReport,
    ClassCounts,
    EpisodeResult,
    cross_entropy,
    episode_loss,
    group_by_frequency,
    iou,
    mean_iou,
)
from .supervised import (
    SupervisedReport,
    SupervisedResult,
    eval_supervised,
    point_counts,
    predict_supervised,
    train_supervised,
)
