"""tidedown: arbitrary-scale downscaling of tidal-current fields with an
implicit continuous representation."""

from .autodiff import (MacCounter, ParamStore, Tensor, conv2d, count_macs,
                       linear, no_grad, pixel_shuffle, relu)
from .costmodel import (CostReport, cost_report, cost_table, flops_asm,
                        flops_atm, flops_fe, reduction_report)
from .evaluate import (EvalReport, ablation_harness, atm_effect_curves,
                       bicubic_upsample, evaluate_prediction,
                       fms_tradeoff_harness, mae, mse, render_compare,
                       render_gray)
from .fields import (NormStats, TidalField, cell_center_coords, compute_stats,
                     denormalize, infill_nearest, normalize, read_tcds,
                     write_tcds)
from .model import (ModelConfig, TidalDownscaler, output_grid_size,
                    predict_field, split_channels)
from .optim import Adam
from .synth import SynthSpec, generate, split_dataset
from .train import (Checkpoint, TrainConfig, load_checkpoint, lr_schedule,
                    masked_l1, sample_train_coords, save_checkpoint,
                    train_model, train_step)

__version__ = "0.1.0"
