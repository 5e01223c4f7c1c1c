import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from mdmd.data import (
    AugmentPolicy,
    DataError,
    ModelInput,
    Record,
    Sample,
    apply_affine,
    augment,
    augmentation_matrix,
    crop_and_resize,
    normalize_pixels,
    prepare,
    read_dataset,
    write_manifest,
)
from mdmd.schema import bundled_schema, make_schema
from mdmd.synthetic import UnsupportedSchema, face_params, gen_synthetic, landmarks, NINE_FROM_68


def write_faces(tmp_path, n=8, count_override=None):
    schema = bundled_schema("PARE")
    (tmp_path / "img").mkdir()
    rng = np.random.default_rng(0)
    records = []
    for k in range(n):
        Image.fromarray(rng.integers(0, 255, (40, 50, 3), dtype=np.uint8)).save(tmp_path / f"img/{k}.png")
        lm = rng.uniform(10, 30, size=(count_override or 9, 2))
        records.append(Record(f"img/{k}.png", (5.0, 6.0, 30.0, 28.0), lm, f"f{k}"))
    return schema, write_manifest(tmp_path / "m.jsonl", schema, records), records


def test_manifest_roundtrip(tmp_path):
    schema, path, records = write_faces(tmp_path)
    ds = read_dataset(path)
    assert len(ds) == 8 and ds.schema == schema
    assert ds.header["schema_fingerprint"] == schema.fingerprint()
    s = ds[3]
    assert s.image.shape == (40, 50, 3) and s.face_id == "f3"
    assert np.array_equal(s.landmarks, records[3].landmarks)
    assert len(list(ds)) == 8


def test_manifest_count_mismatch(tmp_path):
    _, path, _ = write_faces(tmp_path, count_override=8)
    with pytest.raises(DataError, match="expects 9"):
        read_dataset(path)


def test_manifest_missing_image_and_file(tmp_path):
    _, path, _ = write_faces(tmp_path)
    (tmp_path / "img/2.png").unlink()
    with pytest.raises(DataError, match="image missing"):
        read_dataset(path)
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path / "nope.jsonl")


def test_manifest_unknown_schema(tmp_path):
    (tmp_path / "m.jsonl").write_text(json.dumps({"schema": "nonexistent"}) + "\n")
    with pytest.raises(DataError):
        read_dataset(tmp_path / "m.jsonl")


def sample(size=(120, 100), bbox=(20.0, 30.0, 40.0, 50.0), lm=None, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 255, (*size, 3), dtype=np.uint8)
    lm = np.array([[40.0, 55.0], [20.0, 30.0]]) if lm is None else lm
    return Sample(img, bbox, lm, 0, "x")


def test_crop_center_and_inverse():
    s = sample()
    inp = crop_and_resize(s, 64, margin=0.25)
    assert inp.crop.shape == (64, 64, 3) and inp.crop.dtype == np.float32
    # bbox center lands at the crop center
    assert np.allclose(inp.landmarks_norm[0], [0.5, 0.5])
    assert np.allclose(inp.to_original(inp.landmarks_norm), s.landmarks, atol=1e-12)
    side = 50 * 1.5
    assert np.allclose(inp.crop_transform, [[side / 64, 0, 40 - side / 2], [0, side / 64, 55 - side / 2]])


def test_crop_pixel_values_match_source():
    # integer-aligned crop with unit scale reproduces the source pixels exactly
    s = sample(bbox=(30.0, 20.0, 32.0, 32.0))
    inp = crop_and_resize(s, 64, margin=0.5)
    want = normalize_pixels(s.image[20 - 16:20 + 48, 30 - 16:30 + 48])
    assert np.allclose(inp.crop, want, atol=1e-6)


def test_crop_rejects_bad_bbox():
    with pytest.raises(DataError):
        crop_and_resize(sample(bbox=(0, 0, 0, 5)), 32)
    with pytest.raises(DataError):
        crop_and_resize(sample(bbox=(500, 500, 10, 10)), 32)


def test_crop_roundtrip_subpixel():
    rng = np.random.default_rng(1)
    for _ in range(20):
        lm = rng.uniform(25, 65, size=(5, 2))
        inp = crop_and_resize(sample(lm=lm), 48)
        px = np.round(inp.landmarks_norm * 48 - 0.5) + 0.5  # snap to crop pixel centers
        back = inp.to_original(px / 48)
        scale = inp.crop_transform[0, 0]
        assert np.abs(back - lm).max() <= 0.51 * scale * np.sqrt(2)


def dot_sample(point, size=80):
    img = np.zeros((size, size, 3), np.uint8)
    x, y = int(point[0]), int(point[1])
    img[y - 1:y + 2, x - 1:x + 2] = 255
    return Sample(img, (20.0, 20.0, 40.0, 40.0), np.array([[x + 0.5, y + 0.5]]), 0, "dot")


def peak(crop):
    g = crop.sum(-1)
    y, x = np.unravel_index(np.argmax(g), g.shape)
    return np.array([x + 0.5, y + 0.5])


def test_augment_identity_policy():
    inp = crop_and_resize(sample(), 32)
    out = augment(inp, AugmentPolicy(), np.random.default_rng(0))
    assert np.array_equal(out.crop, inp.crop) and np.array_equal(out.landmarks_norm, inp.landmarks_norm)


def test_rotation_90_degrees():
    m = augmentation_matrix(64, 90.0)
    inp = ModelInput(np.zeros((64, 64, 3), np.float32), np.array([[0.75, 0.5]]), np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    out = apply_affine(inp, m)
    # image y points down, so +90 deg sends right-of-center to below-center
    assert np.allclose(out.landmarks_norm, [[0.5, 0.75]])


def test_double_flip_is_identity():
    inp = crop_and_resize(sample(bbox=(20.0, 30.0, 40.0, 40.0)), 32)
    m = augmentation_matrix(32, flip=True)
    once = apply_affine(inp, m, [1, 0])
    assert np.allclose(once.landmarks_norm[1], [1 - inp.landmarks_norm[0, 0], inp.landmarks_norm[0, 1]])
    twice = apply_affine(once, m, [1, 0])
    assert np.allclose(twice.landmarks_norm, inp.landmarks_norm, atol=1e-12)
    assert np.allclose(twice.crop, inp.crop, atol=1e-5)
    assert np.allclose(twice.crop_transform, inp.crop_transform, atol=1e-12)


def test_flip_without_permutation_raises():
    inp = crop_and_resize(sample(), 32)
    with pytest.raises(DataError, match="flip"):
        augment(inp, AugmentPolicy(flip_prob=1.0), np.random.default_rng(0))


@pytest.mark.parametrize("seed", range(8))
def test_augmented_landmark_follows_pixels(seed):
    rng = np.random.default_rng(seed)
    pt = rng.integers(30, 50, size=2)
    inp = crop_and_resize(dot_sample(pt), 64)
    policy = AugmentPolicy(rotation_prob=1, scale_prob=1, translate_prob=1, flip_prob=0.5)
    out = augment(inp, policy, rng, flip_permutation=[0])
    lm_px = out.landmarks_norm[0] * 64
    assert np.linalg.norm(peak(out.crop) - lm_px) <= 1.0 + 1e-9
    # crop_transform still maps crop pixels back to the original image
    assert np.allclose(out.to_original(out.landmarks_norm), inp.landmarks, atol=1e-9)


def test_augment_deterministic():
    inp = crop_and_resize(sample(), 32)
    policy = AugmentPolicy.default()
    a = augment(inp, policy, np.random.default_rng(7), [1, 0])
    b = augment(inp, policy, np.random.default_rng(7), [1, 0])
    assert np.array_equal(a.crop, b.crop) and np.array_equal(a.landmarks_norm, b.landmarks_norm)


def test_policy_from_dict():
    assert AugmentPolicy.from_dict(None) == AugmentPolicy()
    assert AugmentPolicy.from_dict("default") == AugmentPolicy.default()
    assert AugmentPolicy.from_dict({"scale_range": [0.9, 1.1]}).scale_range == (0.9, 1.1)


def digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(directory).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_gen_synthetic_byte_identical(tmp_path):
    a = gen_synthetic("PARE", 4, 3, tmp_path / "a")
    gen_synthetic("PARE", 4, 3, tmp_path / "b")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    gen_synthetic("PARE", 4, 4, tmp_path / "c")
    assert digest(tmp_path / "a") != digest(tmp_path / "c")
    ds = read_dataset(a)
    assert len(ds) == 4 and ds.schema.name == "PARE"


def test_gen_synthetic_eye_centroid(tmp_path):
    """Dark pixels near each eye landmark pair average to the drawn eye center."""
    gen_synthetic("300W", 3, 0, tmp_path)
    ds = read_dataset(tmp_path / "manifest.jsonl")
    for k, s in enumerate(ds):
        p = face_params(0, k)
        img = s.image.astype(float)
        for eye, (i, j) in zip(p.eye_centers(), ((36, 39), (42, 45))):
            mid = (s.landmarks[i] + s.landmarks[j]) / 2
            assert np.linalg.norm(mid - eye) < 1e-9
            r = p.eye_r
            yy, xx = np.mgrid[:img.shape[0], :img.shape[1]] + 0.5
            near = np.hypot(xx - eye[0], yy - eye[1]) < 1.6 * r
            diff = np.abs(img - np.array(p.eye_color)).sum(-1) < 40
            mask = near & diff
            assert mask.sum() > 5
            centroid = np.array([xx[mask].mean(), yy[mask].mean()])
            assert np.linalg.norm(centroid - eye) < 1.0


def test_nine_and_68_share_geometry():
    p = face_params(5, 2)
    assert np.array_equal(landmarks(p, 9), landmarks(p, 68)[list(NINE_FROM_68)])


def test_gen_synthetic_unsupported(tmp_path):
    with pytest.raises(UnsupportedSchema):
        gen_synthetic("WFLW", 1, 0, tmp_path)
    with pytest.raises(UnsupportedSchema):
        gen_synthetic(make_schema("odd", 5, [[0, 1, 2, 3, 4]]), 1, 0, tmp_path)


def test_prepare_len(tmp_path):
    gen_synthetic("PARE", 8, 1, tmp_path)
    inputs = prepare(read_dataset(tmp_path / "manifest.jsonl"), 64)
    assert len(inputs) == 8
    assert all(0 < i.landmarks_norm.min() and i.landmarks_norm.max() < 1 for i in inputs)


def test_manifest_rewrite_is_file_identical(tmp_path):
    path = gen_synthetic("300W", 3, 2, tmp_path)
    ds = read_dataset(path)
    again = write_manifest(tmp_path / "again.jsonl", ds.schema, ds.records)
    assert again.read_text() == path.read_text()


def test_crop_transform_inverse_on_corners():
    inp = crop_and_resize(sample(), 48)
    m = np.vstack([inp.crop_transform, [0, 0, 1]])
    corners = np.array([[0, 0, 1], [48, 0, 1], [0, 48, 1], [48, 48, 1]], float).T
    assert np.allclose(np.linalg.inv(m) @ (m @ corners), corners, atol=1e-9)


def test_crop_edge_padding():
    # a bbox touching the border samples replicated edge pixels, never zeros
    img = np.full((40, 40, 3), 200, np.uint8)
    inp = crop_and_resize(Sample(img, (0.0, 0.0, 40.0, 40.0), np.zeros((1, 2)), 0, "e"), 32)
    assert np.allclose(inp.crop, normalize_pixels(np.full((1, 1, 3), 200, np.uint8))[0, 0])
