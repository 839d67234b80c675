import numpy as np
import pytest
import torch

from avatar_recon import canonical, synth
from avatar_recon.config import CanonicalConfig, SamplingConfig
from avatar_recon.encoder import image_tensor, encode


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("ds")
    synth.generate_dataset(d, n_subjects=1, n_poses=2, seed=1, resolution=40, image_size=64)
    return d


def small_cfg(steps):
    return CanonicalConfig(steps=steps, hidden=[64, 64, 64, 64], encoder_channels=[3, 8, 16],
                           sampling=SamplingConfig(256, 256, 64))


def test_load_views(dataset):
    views = canonical.load_views(dataset)
    assert len(views) == 2 and views[0].gt_mesh is not None
    assert len(canonical.load_views(dataset, exclude_poses=(1,))) == 1
    with pytest.raises(FileNotFoundError):
        canonical.load_manifest(dataset / "nope")


def test_gather_inputs_layout(dataset):
    cfg = small_cfg(1)
    model = canonical.init_model(cfg)
    view = canonical.load_view(dataset, 0, 1)
    fmap = encode(image_tensor(view.image, torch.float32), model.enc_params.float(), model.enc_spec)
    x = view.gt_mesh.vertices[:50]
    rows, keep = canonical.gather_inputs(x, view, view.transforms(), fmap)
    assert rows.shape == (50, model.f_spec.in_dim) and keep.all()
    assert np.allclose(rows[:, -3:].numpy(), x, atol=1e-6)
    n_c = rows[:, -6:-3].numpy()
    norms = np.linalg.norm(n_c, axis=1)
    assert np.all((np.abs(norms - 1) < 1e-5) | (norms == 0))


def test_training_reduces_loss_and_roundtrips(dataset, tmp_path):
    views = canonical.load_views(dataset)
    model, log = canonical.train_canonical(views, small_cfg(120), seed=0)
    t = log.totals()
    assert np.all(np.isfinite(t)) and t[-20:].mean() < t[:5].mean()
    model.save(tmp_path / "c.carw")
    back = canonical.CanonicalModel.load(tmp_path / "c.carw")
    assert torch.equal(back.flat(), model.flat()) and back.f_spec == model.f_spec
    mesh = canonical.reconstruct_canonical(model, views[0], resolution=32)
    assert not mesh.is_empty


def test_training_is_deterministic(dataset):
    views = canonical.load_views(dataset)
    a, la = canonical.train_canonical(views, small_cfg(5), seed=3)
    b, lb = canonical.train_canonical(views, small_cfg(5), seed=3)
    assert torch.equal(a.flat(), b.flat()) and la.rows == lb.rows


def test_needs_ground_truth(dataset):
    view = canonical.load_view(dataset, 0, 0, with_gt=False)
    with pytest.raises(ValueError):
        canonical.train_canonical([view], small_cfg(1))
