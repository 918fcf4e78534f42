import time, torch
from detinvert.data import DatasetSpec, GeneratedShapes
from detinvert.models import make_detector
from detinvert.training import TrainConfig, train_detector, _val_ap50

torch.set_num_threads(1)
spec = DatasetSpec()
train = GeneratedShapes(spec, 800, stream=0)
val = GeneratedShapes(spec, 200, stream=1)

for kind, epochs, lr in (("single_stage", 12, 1e-3), ("two_stage", 12, 1e-3)):
    t0 = time.perf_counter()
    model = make_detector(kind, seed=0)
    cfg = TrainConfig(epochs=epochs, batch_size=8, lr=lr, seed=0, val_every=4)
    logs = train_detector(model, train, cfg, val_dataset=val,
                          checkpoint_path=f"/root/pkg/.artifacts/{kind}_probe.pt", verbose=True)
    ap50 = _val_ap50(model, val)
    print(f"{kind}: {time.perf_counter()-t0:.0f}s final val AP50={ap50:.2f}", flush=True)
