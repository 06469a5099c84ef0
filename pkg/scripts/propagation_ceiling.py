"""Upper bounds for grid-resolution mask propagation on synthetic video.

Reports, per video, the J of the ground truth pooled to the feature grid and
upsampled back (quantization ceiling), and the J of one-shot propagation when
the learned embedding is replaced by 4x4-pooled RGB (appearance-only features).

    python scripts/propagation_ceiling.py --data runs/smoke/heldout
"""
import argparse

import numpy as np
import torch.nn.functional as F
from torch import nn

from granvos.dataio import load_dataset
from granvos.inference import fields_to_masks, label_field_from_mask, ovos_propagate
from granvos.metrics import evaluate_video
from granvos.network import BackboneConfig, SegNet


class PooledPixels(nn.Module):
    def forward(self, x):
        return F.avg_pool2d(x, 4) * 10.0


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", required=True)
    ap.add_argument("--frame-size", type=int, default=64)
    args = ap.parse_args()
    ds = load_dataset(args.data, args.frame_size)
    grid = args.frame_size // 4
    model = SegNet(BackboneConfig(channels=3), grid=grid)
    model.phi = PooledPixels()
    for i, rec in enumerate(ds.videos):
        frames, gt = ds.frames(i), ds.masks(i)
        size = gt.shape[1:]
        labels = sorted({0, *np.unique(gt).tolist()})
        quant = fields_to_masks([label_field_from_mask(m, (grid, grid), labels) for m in gt], size)
        prop = fields_to_masks(ovos_propagate(frames, gt[0], model), size)
        j_q = np.mean(evaluate_video(list(quant[1:]), list(gt[1:]), mode="instance").J)
        j_p = np.mean(evaluate_video(list(prop[1:]), list(gt[1:]), mode="instance").J)
        print(f"{rec.id}: quantization ceiling J {j_q:.3f}, pooled-RGB propagation J {j_p:.3f}")


if __name__ == "__main__":
    main()
