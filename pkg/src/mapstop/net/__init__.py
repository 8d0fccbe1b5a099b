from .checkpoint import load_checkpoint, save_checkpoint
from .gradcam import grad_cam
from .layers import loss_cls, loss_reg, softmax
from .model import ClassifierConfig, CnnModel, PairedModel, classify, decide, estimate_area, forward
from .train import TrainConfig, TrainingError, train
