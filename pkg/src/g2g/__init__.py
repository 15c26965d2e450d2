"""G2G: two-generator conditional GAN for building-footprint segmentation."""

from .dataset import MaskEncoding, SampleTriple, extract_contours, overlay_contours, synthesize_fixture
from .metrics import ConfusionAccumulator, accumulate, dice, fw_iou, mean_accuracy, mean_iou, pixel_accuracy
from .model import build_d1, build_d2, build_g1, build_g2, build_pix2pix_baseline
from .raster import FULL_SCALE_GRID, Raster, TileGridSpec, center_trim, crop_grid, pixel_loss_report, resize

__version__ = "0.1.0"
