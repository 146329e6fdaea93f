import numpy as np
import pytest

from asc import numeric as nm
from asc.errors import CapacityError, DimensionError
from asc.numeric import Tensor
from asc.patching import (PatchEmbedConfig, assemble_patches, embed, extract_patches, init_patch_params,
                          load_image, read_ppm, write_ppm)


def test_token_count_law_full_resolution():
    img = np.random.default_rng(0).uniform(size=(224, 224, 3))
    patches = extract_patches(img, 4)
    assert patches.shape == (3136, 48)


@pytest.mark.parametrize("h,w,p", [(32, 32, 4), (8, 12, 4), (16, 16, 8), (6, 9, 3)])
def test_count_and_bijection(h, w, p):
    img = np.random.default_rng(1).uniform(size=(h, w, 3))
    patches = extract_patches(img, p)
    assert patches.shape == (h * w // p ** 2, 3 * p * p)
    assert np.array_equal(assemble_patches(patches, h, w, p), img)


def test_raster_order_and_row_layout():
    img = np.arange(8 * 8 * 3, dtype=float).reshape(8, 8, 3)
    patches = extract_patches(img, 4)
    # second patch is the top-right block
    assert np.array_equal(patches[1], img[0:4, 4:8].reshape(-1))
    assert np.array_equal(patches[2], img[4:8, 0:4].reshape(-1))


def test_constant_image_rows_identical():
    patches = extract_patches(np.full((32, 32, 3), 0.3), 4)
    assert patches.shape[0] == 64
    assert np.all(patches == patches[0])


def test_non_divisible_rejected():
    with pytest.raises(DimensionError):
        extract_patches(np.zeros((30, 32, 3)), 4)


def test_batched_extraction_matches_loop():
    imgs = np.random.default_rng(2).uniform(size=(3, 16, 16, 3))
    batched = extract_patches(imgs, 4)
    for i in range(3):
        assert np.array_equal(batched[i], extract_patches(imgs[i], 4))


def test_zero_patches_give_positional_rows():
    cfg = PatchEmbedConfig(embed_dim=16, max_tokens=64)
    params = init_patch_params(cfg, np.random.default_rng(0))
    out = embed(np.zeros((10, 48)), params)
    assert np.array_equal(out.data, params["patch.pos"].data[:10])


def test_identity_projection():
    patches = np.random.default_rng(3).uniform(size=(64, 48))
    params = {"patch.w": Tensor(np.eye(48), True), "patch.b": Tensor(np.zeros(48), True),
              "patch.pos": Tensor(np.zeros((64, 48)), True)}
    assert np.allclose(embed(patches, params).data, patches, atol=0, rtol=0)


def test_embed_gradients_against_finite_differences():
    rng = np.random.default_rng(4)
    cfg = PatchEmbedConfig(embed_dim=6, max_tokens=8)
    params = init_patch_params(cfg, rng)
    patches = rng.uniform(size=(5, 48))

    def f(w, b, pos):
        return nm.sum(embed(patches, {"patch.w": w, "patch.b": b, "patch.pos": pos}))

    assert nm.gradcheck(f, [params["patch.w"], params["patch.b"], params["patch.pos"]]) <= 1e-4
    # unused positional rows get no gradient
    assert np.all(params["patch.pos"].grad[5:] == 0)


def test_capacity_error():
    params = init_patch_params(PatchEmbedConfig(embed_dim=8, max_tokens=4), np.random.default_rng(0))
    with pytest.raises(CapacityError):
        embed(np.zeros((5, 48)), params)


def test_positional_switch():
    params = init_patch_params(PatchEmbedConfig(embed_dim=8, use_pos_embed=False), np.random.default_rng(0))
    assert "patch.pos" not in params
    assert embed(np.zeros((3, 48)), params).shape == (3, 8)


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(5).integers(0, 256, (6, 10, 3)) / 255.0
    write_ppm(tmp_path / "x.ppm", img)
    assert np.allclose(read_ppm(tmp_path / "x.ppm"), img, atol=1e-12)


def test_load_image_scales_bytes():
    buf = bytes([0, 255, 51] * 4)
    img = load_image(buf, 2, 2)
    assert img.shape == (2, 2, 3)
    assert np.allclose(img[0, 0], [0.0, 1.0, 0.2])
