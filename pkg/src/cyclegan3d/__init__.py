"""3D CycleGAN for unpaired OCT to confocal volume translation, on a small numpy autograd core."""
from .kernels import BACKEND
from .losses import LossWeights
from .metrics import FeatureMatrix, Moments, fid, kid, moments
from .nets import Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, count_params
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, UnpairedDataset, fit, lr_at_epoch
from .voldata import Volume, load_volume, make_phantom_dataset, save_volume

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Discriminator", "DiscriminatorSpec", "FeatureMatrix", "Generator", "GeneratorSpec",
    "LossWeights", "Moments", "Tensor", "TrainConfig", "UnpairedDataset", "Volume", "count_params", "fid",
    "fit", "kid", "load_volume", "lr_at_epoch", "make_phantom_dataset", "moments", "no_grad", "save_volume",
]
