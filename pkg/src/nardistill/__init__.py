"""Multi-stream transformer with distillation objectives for non-autoregressive
generation, built on a small numpy reverse-mode autograd."""
from .data import Example, SynthMMSpec, Vocab, generate_synth_mm
from .decoding import beam_search, greedy_ar, nar_decode
from .distill import DistillMode, LossBundle, loss_bang, loss_overall
from .errors import ConfigError, DataError
from .model import NAR, BangModel, ModelConfig
from .self_paced import SpStrategy, sp_weighted_loss

__version__ = "0.1.0"
