"""Experimental UAC variants via a patched train_step (not library code)."""
import inspect, sys, json, time, math, torch, textwrap
from uacgan import trainer
from uacgan.mine import log_mean_exp, MIEstimate, dv_bound
from uacgan.synthbench import *
from uacgan.trainer import fit, SamplerDataset

mode = sys.argv[1]
src = inspect.getsource(trainer.train_step)
if mode.startswith("enum"):
    src = src.replace("y_bar = resample_marginal_labels(y, b.label_spec, cfg.marginal_strategy, rng[\"marginal\"])",
                      "y_bar = torch.arange(K).repeat_interleave(n)")
    src = src.replace("est, surrogate = mine_step(b.T, x_fake, y, y_bar, state.ema)",
                      "est, surrogate = enum_mine_step(b.T, x_fake, y, y_bar, state.ema, K)")
    src = src.replace("v_g = dv_bound(b.T(x_g, y), b.T(x_g, y_bar))",
                      "v_g = dv_bound(b.T(x_g, y), b.T(x_g.repeat(K, *[1]*(x_g.dim()-1)), y_bar))")
if "2T" in mode:
    src = src.replace("        _update(opts[\"T\"], surrogate)\n",
                      "        _update(opts[\"T\"], surrogate)\n        est, surrogate = MSTEP\n        _update(opts[\"T\"], surrogate)\n")
    call = "enum_mine_step(b.T, x_fake, y, y_bar, state.ema, K)" if mode.startswith("enum") else "mine_step(b.T, x_fake, y, y_bar, state.ema)"
    src = src.replace("MSTEP", call)

def enum_mine_step(T, x_fake, y, y_bar, ema, K):
    x = x_fake.detach()
    t_joint = T(x, y)
    t_marg = T(x.repeat(K, *[1] * (x.dim() - 1)), y_bar)
    lme = log_mean_exp(t_marg)
    log_ema = ema.update(float(lme.detach()))
    jm = t_joint.mean()
    surrogate = -(jm - torch.exp(t_marg - log_ema).mean())
    est = MIEstimate(value=float(jm.detach() - lme.detach()), joint_mean=float(jm.detach()),
                     log_mean_exp_marginal=float(lme.detach()), batch_size=len(x), ema_denominator=ema.value)
    return est, surrogate

ns = trainer.__dict__
ns["enum_mine_step"] = enum_mine_step
exec(compile(src, "patched", "exec"), ns)

spec = MoGSpec(); bw = evaluation_bandwidth(spec)
ds = SamplerDataset(spec.sampler(), spec.label_spec, (1,))
kw = json.loads(sys.argv[2])
for seed in [int(s) for s in sys.argv[3].split(",")]:
    t = time.perf_counter()
    st, _ = fit(default_mog_config("uac", seed=seed, **kw), ds)
    r = score_bundle(st.bundle, spec, 10000, bw, seed + 1000)
    print(mode, kw, seed, " ".join(f"{k}={v:.3g}" for k, v in r.items()), f"{time.perf_counter()-t:.0f}s", flush=True)
