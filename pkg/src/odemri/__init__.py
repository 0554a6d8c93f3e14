"""ODE-based deep network for undersampled multicoil MRI reconstruction."""

from .datagen import DataConfig, Dataset, generate_dataset, read_dataset, write_dataset
from .metrics import MetricReport, psnr, ssim
from .mri_model import CoilSensitivities, KSpaceSample, SamplingMask, adjoint_E, forward_E, make_mask, zero_filled
from .ode_net import NetworkConfig, init_params, network_backward, network_forward
from .tensor_core import ComplexImage, fft2_centered, ifft2_centered
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
