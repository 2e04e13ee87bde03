"""End-to-end spotter: model, losses, assembly, training and inference."""

from .assemble import CharDetection, SpotPrediction, assemble_text
from .config import TrainConfig, dump_config, load_config
from .data import Proposal, SpotDataset
from .inference import load_spotter, predict_records, predict_spots, save_checkpoint
from .losses import smooth_l1, spotting_loss
from .model import DRSpotter, backbone_forward, extract_roi, recognize_character
from .train import train_three_stage

__all__ = [
    "CharDetection", "DRSpotter", "Proposal", "SpotDataset", "SpotPrediction", "TrainConfig",
    "assemble_text", "backbone_forward", "dump_config", "extract_roi", "load_config", "load_spotter",
    "predict_records", "predict_spots", "recognize_character", "save_checkpoint", "smooth_l1",
    "spotting_loss", "train_three_stage",
]
