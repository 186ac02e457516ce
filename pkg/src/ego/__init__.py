"""Energy-guided, inversion-free object editing on a small pixel-space diffusion model."""
from .config import EngineConfig, load_config
from .denoiser import Condition, Denoiser, cfg_eps, extract_features, feature_input_gradient
from .editor import EditResult, make_schedule, run_edit
from .schedule import NoiseSchedule, add_noise

__all__ = [
    "Condition", "Denoiser", "EditResult", "EngineConfig", "NoiseSchedule", "add_noise",
    "cfg_eps", "extract_features", "feature_input_gradient", "load_config", "make_schedule",
    "run_edit",
]
__version__ = "0.1.0"
