import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from arralab.corpus import (
    BACKGROUND,
    ONE_OBJECT,
    PALETTES,
    POSITIONS,
    SHAPES,
    CorpusConfig,
    SceneObject,
    SceneSpec,
    all_one_object_specs,
    caption,
    category_attributes,
    category_id,
    cell_box,
    generate_scene,
    load_pairs,
    parse_caption,
    render,
    shape_mask,
)
from arralab.errors import CaptionParseError, ConfigError, ManifestError

# frozen from a single run of the generator
GOLDEN_SEED0_CAPTION = "a red circle at top right"
GOLDEN_SEED0_SHA256 = "05c6e61bc363731b669d849a568a0502c508ab8aabe7876b50e8d1687cea5591"


def specs_strategy(palette="primary"):
    obj_cells = st.lists(st.integers(0, 8), min_size=1, max_size=3, unique=True)
    return obj_cells.flatmap(
        lambda cells: st.tuples(
            *[
                st.builds(SceneObject, st.just(c), st.sampled_from(SHAPES), st.sampled_from(list(PALETTES[palette])))
                for c in cells
            ]
        ).map(lambda objs: SceneSpec(tuple(objs)))
    )


def test_golden_seed0():
    s = generate_scene(0, ONE_OBJECT)
    assert s.caption == GOLDEN_SEED0_CAPTION
    assert hashlib.sha256(s.image.tobytes()).hexdigest() == GOLDEN_SEED0_SHA256
    assert s.spec == SceneSpec((SceneObject(2, "circle", "red"),))


def test_generate_deterministic():
    a, b = generate_scene(17, CorpusConfig()), generate_scene(17, CorpusConfig())
    assert a.caption == b.caption and a.image.tobytes() == b.image.tobytes()


def test_seeds_give_distinct_specs():
    pairs = sum(generate_scene(s).spec != generate_scene(s + 1).spec for s in range(1000))
    assert pairs / 1000 >= 0.99


def test_render_pixels_exact():
    spec = SceneSpec((SceneObject(0, "square", "red"),))
    img = render(spec)
    y0, x0, side = cell_box(0, 32)
    mask = shape_mask("square", side)
    region = img[y0 : y0 + side, x0 : x0 + side]
    assert np.all(region[mask] == np.asarray(PALETTES["primary"]["red"], dtype=np.float32))
    outside = np.ones((32, 32), bool)
    outside[y0 : y0 + side, x0 : x0 + side] = ~mask
    assert np.all(img[outside] == np.asarray(BACKGROUND, dtype=np.float32))


def test_render_pure_and_bounded():
    spec = generate_scene(3).spec
    a, b = render(spec), render(spec)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0 and a.max() <= 1 and a.shape == (32, 32, 3)


def test_render_overlap_rejected():
    spec = SceneSpec((SceneObject(4, "square", "red"), SceneObject(4, "circle", "blue")))
    with pytest.raises(ValueError):
        render(spec)


def test_slots_are_patch_aligned():
    for cell in range(9):
        y0, x0, side = cell_box(cell, 32)
        assert y0 % 8 == 0 and x0 % 8 == 0 and side == 8


def test_shape_masks_distinct():
    masks = [shape_mask(s, 8) for s in SHAPES]
    for i in range(len(masks)):
        assert masks[i].any()
        for j in range(i + 1, len(masks)):
            assert not np.array_equal(masks[i], masks[j])


def test_parse_examples():
    assert parse_caption("a red square at top left") == SceneSpec((SceneObject(0, "square", "red"),))
    with pytest.raises(CaptionParseError) as info:
        parse_caption("a purple blob somewhere")
    assert info.value.position == 9  # "blob"


def test_parse_error_position_points_at_word():
    text = "a red square at nowhere"
    with pytest.raises(CaptionParseError) as info:
        parse_caption(text)
    assert text[info.value.position :].startswith("nowhere")


def test_round_trip_all_one_object_specs():
    specs = all_one_object_specs()
    assert len(specs) == 216
    for spec in specs:
        for t in (0, 1):
            assert parse_caption(caption(spec, t)) == spec


@given(specs_strategy(), st.sampled_from([0, 1]))
@settings(max_examples=300, deadline=None)
def test_round_trip_random_specs(spec, template):
    assert parse_caption(caption(spec, template)) == spec


def test_round_trip_seeded_scenes():
    for seed in range(1000):
        s = generate_scene(seed)
        assert parse_caption(s.caption) == s.spec


def test_canonical_order_row_major():
    spec = SceneSpec((SceneObject(8, "cross", "blue"), SceneObject(1, "square", "red")))
    assert [o.cell for o in spec.objects] == [1, 8]
    assert caption(spec).startswith("a red square at top and")


def test_category_bijection():
    seen = set()
    for shape in SHAPES:
        for color in PALETTES["primary"]:
            cid = category_id(shape, color)
            assert category_attributes(cid) == (shape, color)
            seen.add(cid)
    assert seen == set(range(24))


def test_config_validation():
    with pytest.raises(ConfigError):
        CorpusConfig(palette="neon")
    with pytest.raises(ConfigError):
        CorpusConfig(object_counts=(1, 4), count_weights=(1, 1))
    cfg = CorpusConfig(object_counts=(2,), count_weights=(1.0,))
    assert CorpusConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_position_names():
    assert POSITIONS[0] == "top left" and POSITIONS[4] == "center" and POSITIONS[8] == "bottom right"


def _write_png(path, arr):
    Image.fromarray((arr * 255).astype(np.uint8)).save(path)


def test_load_pairs(tmp_path):
    (tmp_path / "manifest.jsonl").write_text("")
    assert list(load_pairs(tmp_path)) == []
    lines = []
    for i in range(3):
        _write_png(tmp_path / f"{i}.png", np.full((48, 64, 3), i / 4))
        lines.append(json.dumps({"file": f"{i}.png", "caption": f"c{i}", "category_id": i}))
    (tmp_path / "manifest.jsonl").write_text("\n".join(lines))
    samples = list(load_pairs(tmp_path))
    assert [s.caption for s in samples] == ["c0", "c1", "c2"]
    assert all(s.image.shape == (32, 32, 3) and s.spec is None for s in samples)
    assert samples[2].category_id == 2


def test_load_pairs_center_crop(tmp_path):
    img = np.zeros((32, 64, 3))
    img[:, 16:48] = 1.0  # only the center square is white
    _write_png(tmp_path / "a.png", img)
    (tmp_path / "manifest.jsonl").write_text(json.dumps({"file": "a.png", "caption": "x"}))
    (s,) = load_pairs(tmp_path)
    assert np.all(s.image == 1.0)


def test_load_pairs_errors_name_line(tmp_path):
    _write_png(tmp_path / "ok.png", np.zeros((8, 8, 3)))
    (tmp_path / "manifest.jsonl").write_text(
        json.dumps({"file": "ok.png", "caption": "x"}) + "\n" + json.dumps({"file": "gone.png", "caption": "y"})
    )
    it = load_pairs(tmp_path)
    assert next(it).caption == "x"
    with pytest.raises(ManifestError) as info:
        next(it)
    assert info.value.line == 2
    (tmp_path / "manifest.jsonl").write_text("{not json")
    with pytest.raises(ManifestError) as info:
        list(load_pairs(tmp_path))
    assert info.value.line == 1
