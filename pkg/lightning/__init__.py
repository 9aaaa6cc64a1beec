from .attention import AttentionLM
from .driving import DrivingLM
