"""Room acoustics toolkit: RIR simulation, acoustic metrics, WPE and
feature-space flow matching for dereverberation and RIR estimation."""

__version__ = "0.1.0"

from .audio import AudioBuffer, Spectrogram, convolve, istft, logmel, read_wav, stft, write_wav
from .errors import *  # noqa: F401,F403
from .metrics import AcousticReport, blind_rt60, drr, edc, rir_delta, rir_report, rt60_from_edc, srmr
from .rir import Rir, RoomSpec, eyring_t60, sabine_t60, simulate_rir, synth_exponential_rir
from .wpe import WpeConfig, wpe_dereverb

__all__ = [
    "AudioBuffer", "Spectrogram", "convolve", "istft", "logmel", "read_wav", "stft", "write_wav",
    "AcousticReport", "blind_rt60", "drr", "edc", "rir_delta", "rir_report", "rt60_from_edc", "srmr",
    "Rir", "RoomSpec", "eyring_t60", "sabine_t60", "simulate_rir", "synth_exponential_rir",
    "WpeConfig", "wpe_dereverb",
]
