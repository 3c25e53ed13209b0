"""Multi-task AUC and partial-AUC maximization on a shared-encoder scorer."""
from .data import TaskData, TaskDataset, load_tasks, make_separable_tasks
from .losses import auc_minmax_loss, ce_hvp, ce_loss, ce_loss_grad, compositional_lower_step
from .metrics import metric_auc, metric_pauc
from .pauc import PAUCConfig, lambda_grad, lambda_hess, pauc_surrogate_G, solve_lambda
from .scorer import Scorer
from .training import AppConfig, AUCState, app_step, init_auc_state, run_app
