"""ensrec: ensemble sequence-encoder training with contrastive alignment and
mutual distillation, plus full-ranking evaluation, at desk scale."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, no_grad, set_default_dtype  # noqa: F401
from .encoder import Ensemble, EncoderParams, ModelConfig, init_ensemble  # noqa: F401
from .losses import LossReport  # noqa: F401
from .trainer import TrainConfig, train  # noqa: F401
from .evaluation import EvalReport, evaluate  # noqa: F401
