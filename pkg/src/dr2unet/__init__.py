"""Dense R2UNet, U-Net and ResUNet segmentation built on a small numpy autodiff tape."""

from .models import Model, ModelConfig, build, load, predict, save
from .tensorcore import Tape, Var, backward, grad_check

__all__ = ["Model", "ModelConfig", "Tape", "Var", "backward", "build", "grad_check", "load", "predict", "save"]
__version__ = "0.1.0"
