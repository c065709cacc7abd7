from .checkpoint import load_checkpoint, save_checkpoint
from .network import ForwardCache, Network, NetworkArch, backward, bce_loss, build_network, forward, predict
from .optim import AdamState, adam_step
from .toy import toy_sine_dataset
from .training import (
    KFoldResult,
    ScoreModel,
    TrainConfig,
    assign_folds,
    fit_score_model,
    kfold_evaluate,
    score_patient,
    train,
)
from ..metrics import auroc
