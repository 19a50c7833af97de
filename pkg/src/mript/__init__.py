"""Accelerated-MRI reconstruction with a prompt-conditioned transformer.

The package is self-contained: a numpy-backed reverse-mode autodiff engine
(``autodiff``, ``ops``), k-space undersampling (``degradation``), image and
dataset plumbing (``dataio``), the multi-head/tail model (``model``),
training and checkpoints (``training``), quality metrics (``metrics``), and
a command-line workbench (``cli``).
"""

from .autodiff import GradTape, Tensor, grad_check
from .degradation import (Mask, MaskError, MaskFamily, MaskSpec,
                          achieved_acceleration, degrade, fft2c, ifft2c,
                          make_mask)
from .dataio import (Manifest, PhantomSpec, Sample, build_samples,
                     center_crop, generate_phantom, load_manifest, load_png,
                     load_raster, normalize_minmax, phantom_set,
                     resize_bilinear, save_png, save_raster, write_manifest)
from .model import (MRIPT, HeadTailBank, ModelConfig, TaskLabel, desk_config,
                    pair_keys, param_count, paper_config, resolve_family,
                    resolve_ratio, tiny_config)
from .training import (Checkpoint, CheckpointError, DimMismatchError,
                       MissingTensorError, OptimState, TrainConfig, adam_step,
                       l1_loss, load_checkpoint, save_checkpoint, train)
from .metrics import (MetricReport, PerImageResult, SsimParams,
                      aggregate_report, emit_csv, emit_markdown, error_map,
                      psnr, ssim)

__version__ = "0.1.0"
