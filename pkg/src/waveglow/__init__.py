"""Flow-based vocoder: audio <-> Gaussian noise conditioned on mel-spectrograms."""
from .flow import ModelConfig, WaveGlow, model_forward, model_inverse, negative_log_likelihood, preset
from .infer import benchmark, synthesize
from .signal import AudioClip, griffin_lim, load_wav, mel_spectrogram, save_wav, stft
from .train import TrainConfig, train_loop

__all__ = ["AudioClip", "ModelConfig", "TrainConfig", "WaveGlow", "benchmark", "griffin_lim", "load_wav",
           "mel_spectrogram", "model_forward", "model_inverse", "negative_log_likelihood", "preset",
           "save_wav", "stft", "synthesize", "train_loop"]
