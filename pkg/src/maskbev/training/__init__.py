from .losses import LossBreakdown, LossConfig, focal_loss, l1_box_loss, layer_losses, total_loss
from .matching import MatchResult, detection_cost, hungarian_match, match_cost
from .optim import AdamW, clip_grad_norm, grad_norm, warmup_cosine
