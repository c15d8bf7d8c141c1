import sys, json, time, numpy as np
from uacgan.synthbench import MoGSpec, default_mog_config, run_mog_benchmark
variants = json.loads(sys.argv[1])
for name, kw in variants.items():
    kind = kw.pop("kind", "uac")
    t = time.perf_counter()
    rep = run_mog_benchmark(kind, 5, default_mog_config(kind, **kw), MoGSpec())
    med = {c: f"{s['median']:.3g}" for c, s in rep.summary().items()}
    per = {c: [f"{v:.2g}" for v in rep.values(c)] for c in rep.COLUMNS}
    print(name, kind, kw, med, per, f"{time.perf_counter()-t:.0f}s", flush=True)
