from .boxes import DetectionBox, iou, iou_matrix, nms
from .checkpoint import load_checkpoint, save_checkpoint
from .inference import (DetectorConfig, class_score_map, detect, detect_all, detect_batch,
                        input_gradient)
from .models import DEFAULT_CLASSES, GridDetector, ToyDetector, TwoStageDetector, build_detector
from .training import TrainConfig, TrainingError, detection_rate, train_toy_detector
