import numpy as np
import pytest
import torch
import torch.nn as nn

from panret import body_parts as bp
from panret import motion_io as mio
from panret import networks as nw
from panret import synthetic as sy
from panret import training as tr
from panret.errors import DegenerateStats, NonFiniteLoss, PartitionMismatch, ShapeMismatch

from helpers import build_trainer, fk_recursive, integrate_ref, walking_clipsets


@pytest.fixture(scope="module")
def humanoid_sets():
    return walking_clipsets(n_per_structure=2, frames=32)


def test_rec_loss_unit_difference():
    m = torch.zeros(2, 8, 5, 4)
    assert float(tr.rec_loss(m, m + 1)) == pytest.approx(1.0)
    assert float(tr.rec_loss(m, m)) == 0.0


def test_rec_loss_joint_weight_ignores_masked_rows():
    m = torch.zeros(1, 4, 3, 4)
    hat = m.clone()
    hat[..., 1, :] = 100.0
    w = np.array([1.0, 0.0, 1.0])
    assert float(tr.rec_loss(m, hat, w)) == 0.0
    with pytest.raises(ShapeMismatch):
        tr.rec_loss(m, hat, np.ones(4))


def test_cyc_loss_sums_latent_and_motion_terms():
    h = torch.zeros(1, 2, 3, 4)
    m = torch.zeros(1, 8, 3, 4)
    assert float(tr.cyc_loss(h, h + 2, m, m + 1)) == pytest.approx(5.0)


def _zero_disc():
    disc = nw.Discriminator(4, nw.ModelConfig.tiny())
    for p in disc.parameters():
        nn.init.zeros_(p)
    return disc


def test_adv_losses_with_half_discriminator():
    disc = _zero_disc()
    real = torch.randn(2, 16, 5, 4)
    fake = torch.randn(2, 16, 5, 4)
    loss_d, loss_g = tr.adv_losses(disc, real, fake)
    assert float(loss_d.detach()) == pytest.approx(0.5)
    assert float(loss_g.detach()) == pytest.approx(0.25)
    loss_d, loss_g = tr.adv_losses(disc, real, fake, "maximize")
    assert float(loss_d.detach()) == pytest.approx(-0.5)
    assert float(loss_g.detach()) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        tr.adv_losses(disc, real, fake, "hinge")


def test_discriminator_loss_does_not_reach_generator():
    disc = nw.Discriminator(4, nw.ModelConfig.tiny())
    gen = torch.randn(2, 16, 5, 4, requires_grad=True)
    fake = gen * 2
    loss_d, loss_g = tr.adv_losses(disc, torch.randn(2, 16, 5, 4), fake)
    loss_d.backward()
    assert gen.grad is None
    loss_g.backward()
    assert gen.grad is not None and gen.grad.abs().sum() > 0


def _chain_motion(T, rot_root=None):
    m = torch.zeros(1, T, 3, 4, dtype=torch.float64)
    m[..., :2, 0] = 1.0
    if rot_root is not None:
        m[..., 0, :] = torch.as_tensor(rot_root)
    return m


def test_kine_loss_lever_arm():
    L = 0.7
    offsets = torch.tensor([[0.0, 0, 0], [0, L, 0]], dtype=torch.float64)
    parents = [-1, 0]
    m_a = _chain_motion(4)
    s = np.sqrt(0.5)
    m_bar = _chain_motion(4, [s, 0, 0, s])  # 90 degrees about z: child goes from +y to -x
    # only the child moves, by a distance sqrt(2) L; mean over 2 joints x 3 coords
    expected = 2 * L ** 2 / 6
    assert float(tr.kine_loss(m_a, m_bar, m_a, offsets, parents)) == pytest.approx(expected)
    h = torch.tensor([2.0], dtype=torch.float64)
    assert float(tr.kine_loss(m_a, m_bar, m_a, offsets, parents, scale=h)) == pytest.approx(expected / 4)
    w = torch.tensor([1.0, 0.0], dtype=torch.float64)
    assert float(tr.kine_loss(m_a, m_bar, m_a, offsets, parents, joint_weight=w)) == 0.0


def test_kine_loss_matches_recursive_fk():
    rng = np.random.default_rng(0)
    parents = [-1, 0, 1, 1]
    off = rng.normal(size=(4, 3))
    m = [torch.tensor(rng.normal(size=(1, 6, 5, 4))) for _ in range(3)]

    def pos(x):
        x = x[0].numpy()
        q = x[:, :4] / np.linalg.norm(x[:, :4], axis=-1, keepdims=True)
        root, yaw = integrate_ref(x[:, 4])
        return fk_recursive(q, root, off, parents, root_yaw=yaw)

    pa = pos(m[0])
    ref = np.mean((pa - pos(m[1])) ** 2) + np.mean((pa - pos(m[2])) ** 2)
    got = tr.kine_loss(m[0], m[1], m[2], torch.tensor(off), parents)
    assert float(got) == pytest.approx(ref, rel=1e-10)


def test_vel_loss_examples():
    stats = tr.VelocityStats(0.0, 2.0)
    v = torch.tensor([[[1.0, 0.0, 0.0]]])
    assert float(tr.vel_loss(v, v, stats, stats)) == 0.0
    # opposite directions at full speed: unit vectors pointing apart, |diff|^2 = 4
    fast = torch.tensor([[[2.0, 0.0, 0.0]]])
    assert float(tr.vel_loss(fast, -fast, stats, stats)) == pytest.approx(4.0)
    # same physical speed, different ranges: scaled magnitudes 0.5 vs 0.25
    wide = tr.VelocityStats(0.0, 4.0)
    assert float(tr.vel_loss(v, v, stats, wide)) == pytest.approx(0.0625)
    zero = torch.zeros(1, 1, 3, requires_grad=True)
    out = tr.vel_loss(zero, v, stats, stats)
    out.backward()
    assert float(out.detach()) == pytest.approx(0.25) and torch.isfinite(zero.grad).all()


def test_vel_stats_degenerate():
    with pytest.raises(DegenerateStats):
        tr.VelocityStats(1.0, 1.0)
    with pytest.raises(DegenerateStats):
        tr.VelocityStats.from_motions(np.zeros((2, 4, 3, 4)))


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        tr.LossWeights(kine=-1)
    with pytest.raises(ValueError):
        tr.TrainConfig(mode="dog")
    assert tr.TrainConfig(weights={"rec": 2.0}).weights.rec == 2.0


def test_partition_count_mismatch():
    a = walking_clipsets(1, 32, structures=("humanoid_b", "quadruped"))
    with pytest.raises(PartitionMismatch):
        build_trainer({"A": a["A"]} | {"B": a["B"]},
                      partitions={"A": bp.preset_partition("humanoid6", a["A"].template),
                                  "B": bp.preset_partition("biped-quad3", a["B"].template)})


def test_gd_ratio_counters(humanoid_sets):
    t = build_trainer(humanoid_sets, train_cfg=tr.TrainConfig(batch_size=2, gd_ratio=3))
    t.train_step()
    t.train_step()
    assert t.g_steps == 2 and t.d_steps == 6


def test_each_optimizer_only_moves_its_networks(humanoid_sets):
    t = build_trainer(humanoid_sets)
    for group in t.opt_g.param_groups:
        group["lr"] = 0.0
    g0 = tr.param_digest(t.model.generator_parameters())
    d0 = tr.param_digest(t.model.discriminator_parameters())
    t.train_step()
    assert tr.param_digest(t.model.generator_parameters()) == g0
    assert tr.param_digest(t.model.discriminator_parameters()) != d0

    t = build_trainer(humanoid_sets)
    for group in t.opt_d.param_groups:
        group["lr"] = 0.0
    d0 = tr.param_digest(t.model.discriminator_parameters())
    t.train_step()
    assert tr.param_digest(t.model.discriminator_parameters()) == d0


def test_single_structure_routes_to_itself(humanoid_sets):
    t = build_trainer({"A": humanoid_sets["A"]})
    assert t.directions() == [("A", "A")]
    r = t.train_step()
    assert np.isfinite(r.total)


def test_biped_quad_ignores_uncovered_joints():
    sets = walking_clipsets(2, 32, structures=("biped", "quadruped"))
    cfg = tr.TrainConfig(batch_size=2, mode="biped_quad")
    t = build_trainer(sets, preset="biped-quad3", train_cfg=cfg, dtype=torch.float64)
    quad = t.model.structures["B"]
    tails = [quad.template.index(n) for n in ("Tail", "Tail1", "Tail2")]
    w = quad.joint_weight("biped_quad")
    assert np.all(w[tails] == 0) and w[-1] == 1
    batches = t.sample_batches()
    base = t.forward_losses(batches)[0]
    # scrambling the tail rows of the quadruped input changes nothing the
    # rec term sees on the quadruped side, and the vel term is active
    assert float(base["vel"].detach()) > 0
    m, off, h = batches["B"]
    m2 = m.clone()
    m2[:, :, tails] += 5.0
    code = t.model.encode("B", m)
    hat = t.model.decode("B", code, off).detach()
    assert float(tr.rec_loss(m, hat, w)) == pytest.approx(float(tr.rec_loss(m2, hat, w)))


def test_nonfinite_loss_raises(humanoid_sets):
    t = build_trainer(humanoid_sets)
    t.data["A"].normalized[:] = float("nan")
    with pytest.raises(NonFiniteLoss):
        t.train_step()


def test_checkpoint_round_trip_is_bit_identical(tmp_path, humanoid_sets):
    t = build_trainer(humanoid_sets)
    t.train_step()
    t.save(tmp_path / "c.ckpt")
    model, meta = tr.load_model(tmp_path / "c.ckpt")
    assert meta["g_steps"] == 1
    t.model.eval()
    clip = humanoid_sets["A"].clip(0)
    tgt = humanoid_sets["B"].template
    a = tr.retarget(clip, t.model, "A", "B", tgt)
    b = tr.retarget(clip, model, "A", "B", tgt)
    assert np.array_equal(a.Q, b.Q) and np.array_equal(a.Vbar, b.Vbar)


def test_resume_matches_uninterrupted_run(tmp_path, humanoid_sets):
    full = build_trainer(humanoid_sets)
    for _ in range(4):
        full.train_step()
    half = build_trainer(humanoid_sets)
    for _ in range(2):
        half.train_step()
    half.save(tmp_path / "h.ckpt")
    resumed = build_trainer(humanoid_sets, seed=123)
    resumed.restore(tmp_path / "h.ckpt")
    for _ in range(2):
        resumed.train_step()
    for p, q in zip(full.model.parameters(), resumed.model.parameters()):
        assert torch.equal(p, q)
    assert resumed.g_steps == 4


def test_retarget_output_is_valid_motion(humanoid_sets):
    t = build_trainer(humanoid_sets)
    clip = humanoid_sets["B"].clip(0)
    tgt = humanoid_sets["A"].template
    out = tr.retarget(clip, t.model, "B", "A", tgt)
    assert out.Q.shape == (clip.T, tgt.num_joints, 4)
    np.testing.assert_allclose(np.linalg.norm(out.Q, axis=-1), 1.0, atol=1e-9)
    assert np.all(np.sum(out.Q[1:] * out.Q[:-1], -1) >= 0)
    # a zero-length bone on the target still gives finite positions
    j = tgt.index("Spine3")
    off = tgt.offsets.copy()
    off[j] = 0.0
    out = tr.retarget(clip, t.model, "B", "A", tgt.with_offsets(off))
    assert np.isfinite(out.positions()).all()


def test_run_epoch_and_loss_csv(tmp_path, humanoid_sets):
    t = build_trainer(humanoid_sets, train_cfg=tr.TrainConfig(batch_size=2, steps_per_epoch=2))
    mean, reports = t.run_epoch()
    assert len(reports) == 2 and mean["epoch"] == 1
    tr.write_loss_csv(tmp_path / "l.csv", [mean])
    tr.write_loss_csv(tmp_path / "l.csv", [mean])
    lines = (tmp_path / "l.csv").read_text().strip().splitlines()
    assert lines[0].startswith("epoch,rec") and len(lines) == 3


def test_structure_offsets_are_scaled_by_height(humanoid_sets):
    cs = humanoid_sets["A"]
    s = tr.build_structure("A", cs, bp.preset_partition("humanoid6", cs.template),
                           mio.compute_norm_stats(cs.motions))
    assert s.offset_scale == pytest.approx(np.mean(cs.heights))
    assert sy.make_skeleton("humanoid_a").num_joints == s.num_joints


@pytest.mark.parametrize("stage2", [True, False])
def test_both_stage2_wirings_train(stage2, humanoid_sets):
    cfg = nw.ModelConfig.tiny(pan_stage2=stage2)
    t = build_trainer(humanoid_sets, cfg=cfg, train_cfg=tr.TrainConfig(batch_size=2))
    full = {sid: d.batch(np.arange(len(d))) for sid, d in t.data.items()}
    with torch.no_grad():
        before = float(t.forward_losses(full)[0]["rec"])
    for _ in range(60):
        t.train_step()
    with torch.no_grad():
        after = float(t.forward_losses(full)[0]["rec"])
    assert after < 0.8 * before
    assert hasattr(t.model.nets["A"].motion_encoder, "pan2") == stage2
