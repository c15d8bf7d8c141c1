"""Train the small MNIST CNN used as the IS/FID feature extractor for MNIST runs.

The shipped weights (src/uacgan/assets/mnist_classifier_v2.ckpt) come from:
    python scripts/train_mnist_classifier.py --dataset mnist-5k
Training is deterministic for a fixed seed on CPU.
"""
import argparse

import torch
import torch.nn.functional as F

from uacgan import checkpoint
from uacgan.imagebench import MNIST_EXTRACTOR, MnistClassifier, file_sha256, load_dataset
from uacgan.models import init_weights

p = argparse.ArgumentParser()
p.add_argument("--dataset", default="mnist-5k")
p.add_argument("--epochs", type=int, default=20)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--holdout", type=int, default=500)
p.add_argument("--out", default=str(MNIST_EXTRACTOR))
args = p.parse_args()

torch.manual_seed(args.seed)
ds = load_dataset(args.dataset)
gen = torch.Generator().manual_seed(args.seed)
perm = torch.randperm(len(ds), generator=gen)
test_idx, train_idx = perm[:args.holdout], perm[args.holdout:]
net = MnistClassifier()
init_weights(net, gen)
for m in net.modules():
    if isinstance(m, (torch.nn.Conv2d, torch.nn.Linear)):
        torch.nn.init.kaiming_normal_(m.weight, generator=gen)
opt = torch.optim.Adam(net.parameters(), lr=1e-3)
for epoch in range(args.epochs):
    order = train_idx[torch.randperm(len(train_idx), generator=gen)]
    for i in range(0, len(order), 64):
        idx = order[i:i + 64]
        x = ds.images[idx]
        # small random shifts as augmentation
        dx, dy = torch.randint(-2, 3, (2,), generator=gen).tolist()
        x = torch.roll(x, shifts=(dy, dx), dims=(2, 3))
        loss = F.cross_entropy(net(x), ds.labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        acc = (net(ds.images[test_idx]).argmax(1) == ds.labels[test_idx]).float().mean()
    print(f"epoch {epoch + 1}: loss {loss.item():.4f} holdout acc {acc:.4f}")

checkpoint.save(args.out, net.state_dict(), {
    "name": f"mnist-cnn-v2/{args.dataset}",
    "epochs": args.epochs, "seed": args.seed, "holdout_accuracy": float(acc),
})
print("saved", args.out, file_sha256(args.out))
