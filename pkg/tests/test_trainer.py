import numpy as np
import pytest
import torch

from gsdeform.data import PRESETS, generate_toy_scene, load_dnerf_dataset
from gsdeform.errors import DataError, NumericError
from gsdeform.training import (
    METRICS_HEADER,
    TrainConfig,
    Trainer,
    density_control,
    frame_hash,
    read_checkpoint_meta,
    train_loop,
)


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    spec = PRESETS["sphere-translate"](0)
    spec.n_frames, spec.n_test, spec.resolution, spec.supersample = 4, 2, 16, 1
    root = tmp_path_factory.mktemp("toy")
    generate_toy_scene(spec, root)
    return load_dnerf_dataset(root)


def tiny(**kw):
    base = dict(iterations=8, warmup=3, n_init=60, densify_from=4, densify_until=1000, densify_interval=2, eval_interval=1)
    return TrainConfig(**{**base, **kw})


def test_zero_iterations_checkpoint_is_initialisation(toy, tmp_path):
    cfg = tiny(iterations=0)
    train_loop(toy, cfg, tmp_path)
    init = Trainer(toy, cfg)
    loaded = Trainer.load(tmp_path / "final.gsdw", toy)
    assert loaded.iteration == 0
    for name, value in init.cloud.parameters().items():
        np.testing.assert_array_equal(loaded.cloud.parameters()[name].detach().numpy(),
                                      value.detach().numpy().astype(np.float32))


def test_warmup_renders_do_not_depend_on_time(toy):
    tr = Trainer(toy, tiny(warmup=5))
    tr.train(2)
    cam = toy.train[0].camera
    assert np.array_equal(tr.render_image(cam, 0.0), tr.render_image(cam, 1.0))


def test_zero_initialised_decoder_reproduces_canonical_render(toy):
    tr = Trainer(toy, tiny(warmup=2))
    tr.train(2)  # now past warm-up, decoder head still zero
    cam = toy.train[1].camera
    canonical = tr.render_image(cam, 0.5, warm=True)
    for t in (0.0, 0.3, 1.0):
        assert np.array_equal(tr.render_image(cam, t, warm=False), canonical)


def test_steps_are_deterministic(toy):
    a = Trainer(toy, tiny())
    b = Trainer(toy, tiny())
    la = [r.loss.total for r in a.train()]
    lb = [r.loss.total for r in b.train()]
    assert la == lb


def test_resume_matches_uninterrupted_run(toy, tmp_path):
    cfg = tiny(iterations=10, densify_from=100)
    straight = Trainer(toy, cfg)
    straight.train(6)
    half = Trainer(toy, cfg)
    half.train(4)
    half.save(tmp_path / "mid.gsdw")
    resumed = Trainer.load(tmp_path / "mid.gsdw", toy)
    assert resumed.iteration == 4
    resumed.train(2)
    next_a = straight.step().loss.total
    next_b = resumed.step().loss.total
    assert next_b == pytest.approx(next_a, abs=1e-6)


def test_density_control_runs_and_keeps_optimizer_in_sync(toy):
    tr = Trainer(toy, tiny(iterations=12, densify_grad=0.0))
    tr.train()
    assert tr.density_log
    for name, p in tr.cloud.parameters().items():
        if name in tr.cloud_opt.m:
            assert tr.cloud_opt.m[name].shape == p.shape


def test_split_conserves_rendered_image(toy):
    from gsdeform.deformation import apply_deformation
    from gsdeform.rasterizer import render

    tr = Trainer(toy, tiny(iterations=40, warmup=20, n_init=200, densify_from=10**6))
    tr.train()
    frame = toy.train[0]
    with torch.no_grad():
        d = tr.model.deformation(tr.cloud, frame.t)
    before = tr.render_image(frame.camera, frame.t)
    stats = tr.stats
    stats.max_scale_t[:] = 1e9  # every qualifying Gaussian splits
    res = density_control(tr.cloud, d, stats, tr.cfg, tr.scene_extent, torch.Generator().manual_seed(0), prune=False)
    assert res.split > 0 and res.cloned == 0
    split_parents = torch.nonzero(~torch.isin(torch.arange(len(d.dx)), res.keep)).reshape(-1)
    # freeze the field at the pre-split values so only the split itself is measured
    g = apply_deformation(res.cloud, d.select(torch.cat([res.keep, split_parents.repeat_interleave(2)])))
    after = render(g, frame.camera, tr.background).image.detach().numpy()
    assert np.abs(after - before).mean() < 0.05


def test_non_finite_loss_aborts_with_iteration(toy):
    tr = Trainer(toy, tiny())
    with torch.no_grad():
        tr.cloud.sh[:, 0, 0] = float("nan")
    with pytest.raises(NumericError, match="iteration 0"):
        tr.step()


def test_train_loop_outputs(toy, tmp_path):
    tr = train_loop(toy, tiny(), tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",") == METRICS_HEADER
    iters = [int(row.split(",")[0]) for row in lines[1:]]
    assert iters == sorted(iters) and iters[-1] == 7
    meta = read_checkpoint_meta(tmp_path / "final.gsdw")
    assert meta["iteration"] == 8 and meta["resolution"] == [16, 16]
    assert (tmp_path / "config.txt").read_text().startswith("iterations = 8")
    assert len(tr.history) == 8


def test_logged_render_hash_matches_reloaded_checkpoint(toy, tmp_path):
    import json

    train_loop(toy, tiny(), tmp_path)
    logged = json.loads((tmp_path / "train_renders.json").read_text())
    loaded = Trainer.load(tmp_path / "final.gsdw")  # dataset found via the sidecar
    for i, frame in enumerate(toy.train):
        assert frame_hash(loaded.render_image(frame.camera, frame.t)) == logged[str(i)]["sha256"]


def test_checkpoint_errors(toy, tmp_path):
    with pytest.raises(DataError, match="not found"):
        Trainer.load(tmp_path / "missing.gsdw", toy)
    tr = Trainer(toy, tiny())
    tr.save(tmp_path / "a.gsdw")
    (tmp_path / "a.json").write_text("{")
    with pytest.raises(DataError, match="malformed"):
        Trainer.load(tmp_path / "a.gsdw", toy)


@pytest.mark.slow
def test_loss_decreases_on_toy_scene(toy):
    finals = []
    for seed in range(3):
        tr = Trainer(toy, TrainConfig(iterations=2000, warmup=150, n_init=300, seed=seed, precision=32))
        hist = tr.train()
        early = np.mean([r.loss.total for r in hist[90:110]])
        late = np.mean([r.loss.total for r in hist[1990:2000]])
        finals.append(late < early)
    assert sum(finals) >= 2
