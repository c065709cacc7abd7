from .cox import (
    CauseFit,
    LandmarkCoxModel,
    MonotoneLikelihoodWarning,
    breslow_baseline,
    fit_competing_risks,
    fit_landmark_supermodel,
    model_to_text,
    partial_loglik,
)
from .evaluation import (
    BootstrapCI,
    auroc_at_landmark,
    auroc_global,
    bootstrap_ci,
    covariate_impact,
    global_auroc_of,
    landmark_aurocs,
    out_of_fold_cif,
    split_patients,
)
from .predict import cif_curves, predict_cif, predict_rows, predict_survival
from .superdata import Design, LandmarkGrid, SuperDataset, build_super_dataset, expand_design
