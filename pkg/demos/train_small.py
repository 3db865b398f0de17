"""Train a small network for a few minutes and assemble a held-out object with it.

The run is far too short to match a full training budget; it shows the
loop, the loss gates and the inference path end to end.

    python demos/train_small.py [epochs]
"""
import sys

from jigsaw import align, metrics, synth, train
from jigsaw.net import NetConfig

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
scfg = synth.SynthConfig(pieces_min=2, pieces_max=3, points=500)
train_objs, _ = synth.make_dataset(scfg, 12, seed=0)
test_objs, _ = synth.make_dataset(scfg, 3, seed=1)

cfg = train.TrainConfig(epochs=epochs, batch=4)
print(f"matching loss from epoch {cfg.matching_start}, rigidity loss from epoch {cfg.rigidity_start}")


def show(row):
    print(f"epoch {row['epoch']:3d}  seg {row['L_seg']:.3f}  mat {row['L_mat']:.3f}  "
          f"rig {row['L_rig']:.3f}  lr {row['lr']:.1e}")


state = train.train(train_objs, NetConfig(), cfg, on_epoch=show)

rep = train.evaluate_network(test_objs, state.params)
print(f"held-out segmentation F1 {rep.seg_f1:.2f}, matching accuracy {rep.matching_accuracy:.2f}")
for k, obj in enumerate(test_objs):
    out = align.assemble(obj.scattered, obj.piece_id, state.params)
    s = metrics.evaluate_object(obj, out.poses)
    print(f"object {k}: {obj.n_pieces} pieces  MAE(R) {s.mae_r:6.1f} deg  PA {s.pa:.2f}")
