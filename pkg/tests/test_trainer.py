import csv
import math

import numpy as np
import pytest
import torch

from uacgan import trainer
from uacgan.models import LabelSpec
from uacgan.oracle import degenerate_posterior, posterior_objective
from uacgan.trainer import (ArrayDataset, SamplerDataset, TrainConfig, TrainingAborted, fit, init_state,
                            load_checkpoint, save_checkpoint, train_step)

SHARED = ("term_a", "term_b", "term_c", "loss_D", "loss_C", "loss_G")


def _same_params(a, b, prefixes=("G.", "D.", "C.")):
    sa, sb = a.state_dict(), b.state_dict()
    return all(torch.equal(sa[k], sb[k]) for k in sa if k.startswith(prefixes))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(lr_T=0)
    with pytest.raises(ValueError):
        TrainConfig(kind="wgan")


def test_lambda_zero_uac_equals_ac(mog_data, small_config):
    ac_state, ac_rows = fit(small_config("ac", steps=30), mog_data)
    uac_state, uac_rows = fit(small_config("uac", steps=30, lambda_mi=0.0), mog_data)
    for ra, ru in zip(ac_rows, uac_rows):
        assert all(ra[k] == ru[k] for k in SHARED), (ra, ru)
    assert _same_params(ac_state.bundle, uac_state.bundle)


def test_same_seed_same_reports(mog_data, small_config):
    _, a = fit(small_config("uac", steps=20), mog_data)
    _, b = fit(small_config("uac", steps=20), mog_data)
    assert a == b
    _, c = fit(small_config("uac", steps=20, seed=1), mog_data)
    assert a != c


def test_steps_one_gives_one_row_and_checkpoint(tmp_path, mog_data, small_config):
    _, rows = fit(small_config("tac", steps=1, checkpoint_every=1), mog_data, out_dir=tmp_path)
    assert len(rows) == 1
    assert [p.name for p in (tmp_path / "checkpoints").iterdir()] == ["step_0000001.ckpt"]
    with open(tmp_path / "metrics.csv") as f:
        assert len(list(csv.DictReader(f))) == 1


@pytest.mark.parametrize("kind", ["ac", "tac", "uac"])
def test_resume_is_bit_exact(tmp_path, mog_data, small_config, kind):
    cfg = small_config(kind, steps=12, checkpoint_every=5, use_label_discriminator=(kind == "uac"))
    full_state, full_rows = fit(cfg, mog_data, out_dir=tmp_path / "full")
    ckpt = tmp_path / "full" / "checkpoints" / "step_0000005.ckpt"
    state, rows = fit(cfg, mog_data, out_dir=tmp_path / "resumed", resume=ckpt)
    assert rows == full_rows[5:]
    fs, rs = full_state.bundle.state_dict(), state.bundle.state_dict()
    assert fs.keys() == rs.keys() and all(torch.equal(fs[k], rs[k]) for k in fs)
    assert state.ema.log_value == full_state.ema.log_value


def test_resume_rewrites_metrics_tail(tmp_path, mog_data, small_config):
    cfg = small_config("uac", steps=8, checkpoint_every=4)
    fit(cfg, mog_data, out_dir=tmp_path)
    before = (tmp_path / "metrics.csv").read_text()
    fit(cfg, mog_data, out_dir=tmp_path, resume=tmp_path / "checkpoints" / "step_0000004.ckpt")
    assert (tmp_path / "metrics.csv").read_text() == before


def test_resume_rejects_different_config(tmp_path, mog_data, small_config):
    fit(small_config("uac", steps=2, checkpoint_every=2), mog_data, out_dir=tmp_path)
    with pytest.raises(Exception, match="lambda_mi"):
        load_checkpoint(tmp_path / "checkpoints" / "step_0000002.ckpt", small_config("uac", lambda_mi=0.5))


@pytest.mark.parametrize("kind", ["ac", "tac", "uac"])
def test_freezing_contract(monkeypatch, mog_data, small_config, kind):
    """Every optimizer step changes only the parameters that optimizer owns."""
    cfg = small_config(kind, steps=3, use_label_discriminator=(kind == "uac"))
    state = init_state(cfg, (1,), mog_data.label_spec)
    owner = {}
    for name, opt in state.optimizers.items():
        for g in opt.param_groups:
            for p in g["params"]:
                owner[id(p)] = name
    every = {f"{n}.{k}": p for n, net in state.bundle.networks().items() for k, p in net.named_parameters()}
    phases = []
    original = trainer._update

    def checked(opt, loss):
        before = {k: p.detach().clone() for k, p in every.items()}
        original(opt, loss)
        mine = {id(p) for g in opt.param_groups for p in g["params"]}
        changed = {k for k, p in every.items() if not torch.equal(before[k], p)}
        assert changed, "update changed nothing"
        assert all(id(every[k]) in mine for k in changed), sorted(changed)
        phases.append(owner[next(iter(mine))])

    monkeypatch.setattr(trainer, "_update", checked)
    gen = torch.Generator().manual_seed(0)
    for _ in range(3):
        state, _ = train_step(state, mog_data.sample(cfg.batch_size, gen))
    expected = {"ac": ["D", "C", "G"], "tac": ["D", "C", "C_mi", "G"], "uac": ["D", "C", "T", "D_Y", "G"]}[kind]
    assert phases == expected * 3


def test_T_update_never_touches_G(mog_data, small_config):
    cfg = small_config("uac", steps=1)
    state = init_state(cfg, (1,), mog_data.label_spec)
    g_before = {k: v.clone() for k, v in state.bundle.G.state_dict().items()}
    opt_T = state.optimizers["T"]
    gen = torch.Generator().manual_seed(0)
    x = state.bundle.G(state.bundle.latent_spec.sample(16, gen), torch.randint(0, 3, (16,), generator=gen))
    from uacgan.mine import mine_step
    y = torch.randint(0, 3, (16,), generator=gen)
    _, surrogate = mine_step(state.bundle.T, x, y, y.flip(0), state.ema)
    trainer._update(opt_T, surrogate)
    assert all(torch.equal(g_before[k], v) for k, v in state.bundle.G.state_dict().items())
    assert all(p.grad is None for p in state.bundle.G.parameters())


def test_non_finite_aborts_with_last_report(mog_data, small_config):
    calls = []

    def sampler(n, gen):
        calls.append(n)
        x, y = mog_data.sample(n, gen)
        return (x * float("nan") if len(calls) > 3 else x), y

    with pytest.raises(TrainingAborted) as err:
        fit(small_config("ac", steps=10), SamplerDataset(sampler, mog_data.label_spec, (1,)))
    assert err.value.step == 4
    assert err.value.last_report is not None and err.value.last_report.is_finite()


def test_dataset_mismatch(tmp_path, mog_data, small_config):
    cfg = small_config("ac", steps=2, checkpoint_every=1)
    fit(cfg, mog_data, out_dir=tmp_path)
    ckpt = tmp_path / "checkpoints" / "step_0000001.ckpt"
    five = ArrayDataset(torch.randn(20, 1), torch.arange(20) % 5, LabelSpec(5))
    with pytest.raises(ValueError, match="label spec"):
        fit(cfg, five, resume=ckpt)
    wide = ArrayDataset(torch.randn(21, 2), torch.arange(21) % 3, LabelSpec(3))
    with pytest.raises(ValueError, match="shape"):
        fit(cfg, wide, resume=ckpt)


def test_batch_size_checked(mog_data, small_config):
    cfg = small_config("ac")
    state = init_state(cfg, (1,), mog_data.label_spec)
    with pytest.raises(ValueError):
        train_step(state, mog_data.sample(cfg.batch_size + 1, torch.Generator().manual_seed(0)))


def test_array_dataset_validation():
    with pytest.raises(ValueError):
        ArrayDataset(torch.zeros(0, 1), torch.zeros(0))
    with pytest.raises(ValueError):
        ArrayDataset(torch.zeros(3, 1), torch.tensor([0, 1, 4]), LabelSpec(3))


def test_tac_generator_step_moves_toward_degenerate_posterior():
    """Fixed C and C_mi (the latter at the generator's current posterior): descending
    fake cross-entropy + twin value drives Q(y|x) toward the one-hot minimizer."""
    rng = np.random.default_rng(0)
    n_x, K = 4, 3
    p_x = torch.tensor(rng.dirichlet(np.ones(n_x)))
    theta = torch.tensor(rng.normal(size=(n_x, K)), requires_grad=True)
    q_mi = torch.softmax(theta.detach(), 1)                   # twin classifier frozen at the true posterior
    q_c = torch.tensor(rng.dirichlet(np.ones(K), size=n_x))  # any positive classifier
    opt = torch.optim.SGD([theta], lr=5.0)
    values = []
    for _ in range(2000):
        q = torch.softmax(theta, 1)
        term_c = -(p_x[:, None] * q * torch.log(q_c)).sum()
        term_d = (p_x[:, None] * q * torch.log(q_mi)).sum()
        loss = term_c + term_d
        values.append(sum(float(p_x[i]) * posterior_objective(q[i].detach().numpy(), q_mi[i].numpy(), q_c[i].numpy())
                          for i in range(n_x)))
        assert float(loss.detach()) == pytest.approx(values[-1], abs=1e-10)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
    q = torch.softmax(theta, 1).detach().numpy()
    for i in range(n_x):
        target = degenerate_posterior(q_mi[i].numpy(), q_c[i].numpy())
        assert int(q[i].argmax()) == int(target.argmax())
        assert q[i].max() > 0.95


def test_running_means(mog_data, small_config):
    state, rows = fit(small_config("ac", steps=4), mog_data)
    assert state.running_means()["loss_D"] == pytest.approx(np.mean([r["loss_D"] for r in rows]))


def test_checkpoint_roundtrip_restores_everything(tmp_path, mog_data, small_config):
    state, _ = fit(small_config("uac", steps=3), mog_data)
    save_checkpoint(state, tmp_path / "s.ckpt")
    back = load_checkpoint(tmp_path / "s.ckpt")
    assert back.step == 3 and back.config == state.config
    assert all(torch.equal(back.rngs[k].get_state(), state.rngs[k].get_state()) for k in state.rngs)
    assert math.isclose(back.ema.log_value, state.ema.log_value)


def test_lr_factor_schedule():
    cfg = TrainConfig(steps=10, anneal_from=0.5)
    assert [cfg.lr_factor(s) for s in range(10)] == pytest.approx([1, 1, 1, 1, 1, 1, 0.8, 0.6, 0.4, 0.2])
    assert all(TrainConfig(steps=10).lr_factor(s) == 1.0 for s in range(10))
    with pytest.raises(ValueError):
        TrainConfig(anneal_from=1.5)


def test_annealed_lr_applied_and_resume_exact(tmp_path, mog_data, small_config):
    cfg = small_config("uac", steps=8, checkpoint_every=4, anneal_from=0.5)
    full, full_rows = fit(cfg, mog_data, out_dir=tmp_path / "full")
    assert all(g["lr"] == pytest.approx(cfg.lr(n) * cfg.lr_factor(7))
               for n, opt in full.optimizers.items() for g in opt.param_groups)
    resumed, rows = fit(cfg, mog_data, resume=tmp_path / "full" / "checkpoints" / "step_0000004.ckpt")
    assert rows == full_rows[4:]
    assert _same_params(full.bundle, resumed.bundle, ("G.", "D.", "C.", "T."))
