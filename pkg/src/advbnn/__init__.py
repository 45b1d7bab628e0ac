"""Adversarially trained Bayesian neural networks on a small numpy autodiff core."""
from .attacks import AttackConfig, attack, eot_pgd_attack, fgsm, pgd_attack
from .bayes_net import Network, Prior, mlp, small_cnn
from .nd_core import GradTape, NoiseSource, Tensor, precision
from .objectives import kl_gaussian, prior_kl, total_loss
from .train_infer import TrainConfig, load_checkpoint, predict_ensemble, save_checkpoint, train

__version__ = "0.1.0"

__all__ = ["AttackConfig", "attack", "eot_pgd_attack", "fgsm", "pgd_attack", "Network", "Prior", "mlp", "small_cnn",
           "GradTape", "NoiseSource", "Tensor", "precision", "kl_gaussian", "prior_kl", "total_loss", "TrainConfig",
           "load_checkpoint", "predict_ensemble", "save_checkpoint", "train"]
