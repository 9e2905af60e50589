"""Noisy-CSI feedback compression lab.

Generates sparse angular-delay channel data, trains a denoiser plus an
encoder/decoder compression pair on a from-scratch differentiable layer set,
and evaluates reconstruction NMSE across channel-to-noise and compression
ratios.
"""
from .channel import (ChannelDataset, GeneratorParams, add_noise,
                      from_angular_delay, generate_channel, make_dataset,
                      normalize_and_split, read_dataset, to_angular_delay,
                      truncate, write_dataset)
from .evaluation import (EvalResult, FeedbackModel, IdentityBaseline,
                         evaluate_sweep, nmse, write_results_csv)
from .model import (Decoder, Denoiser, Encoder, ModelConfig, ParamCount,
                    build_networks, count_params)
from .training import (Adam, LossLog, TrainConfig, load_checkpoint, mse_loss,
                       save_checkpoint, train_denoiser, train_end_to_end,
                       train_feedback)

__version__ = "0.1.0"
