import sys, time, json, logging
from uacgan.synthbench import *
from uacgan.trainer import fit, SamplerDataset
spec = MoGSpec(); bw = evaluation_bandwidth(spec)
ds = SamplerDataset(spec.sampler(), spec.label_spec, (1,))
variants = json.loads(sys.argv[1])
seeds = [int(s) for s in sys.argv[2].split(",")]
for name, kw in variants.items():
    kind = kw.pop("kind", "uac")
    for seed in seeds:
        t = time.perf_counter()
        st, _ = fit(default_mog_config(kind, seed=seed, **kw), ds)
        r = score_bundle(st.bundle, spec, 10000, bw, seed + 1000)
        print(name, seed, " ".join(f"{k}={v:.3g}" for k, v in r.items()), f"{time.perf_counter()-t:.0f}s", flush=True)
