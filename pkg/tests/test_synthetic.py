import time

import numpy as np
import pytest

from sourcefree import ConfigurationError
from sourcefree.synthetic import SyntheticTaskSpec, class_motifs, generate_synthetic_task, render_domain


def test_zero_shift_identical():
    spec = SyntheticTaskSpec(num_classes=4, images_per_class=5, shift_magnitude=0.0)
    xs, ys = render_domain(spec, range(4), 3, target=False)
    xt, yt = render_domain(spec, range(4), 3, target=True)
    assert np.array_equal(xs, xt) and np.array_equal(ys, yt)


def test_shift_changes_images():
    spec = SyntheticTaskSpec(num_classes=4, images_per_class=5)
    xs, _ = render_domain(spec, range(4), 3, target=False)
    xt, _ = render_domain(spec, range(4), 3, target=True)
    assert not np.array_equal(xs, xt)


def test_motifs_distinct_and_shared():
    spec = SyntheticTaskSpec(num_classes=9)
    m = class_motifs(spec, 0)
    assert len(set(m)) == 9
    assert m == class_motifs(spec, 0)


def test_corpora_byte_identical(tmp_path):
    spec = SyntheticTaskSpec(num_classes=3, images_per_class=4, image_size=16)
    a = generate_synthetic_task(spec, [0, 1], [1, 2], 5, tmp_path / "a")
    b = generate_synthetic_task(spec, [0, 1], [1, 2], 5, tmp_path / "b")
    fa = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    fb = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*.png"))
    assert fa == fb and len(fa) == 16
    assert all((tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes() for p in fa)
    assert sorted(d.name for d in a[1].iterdir()) == ["class_01", "class_02"]


def test_generation_time(tmp_path):
    spec = SyntheticTaskSpec(num_classes=10, images_per_class=50, image_size=32)
    t0 = time.perf_counter()
    generate_synthetic_task(spec, range(10), range(10), 0, tmp_path)
    assert time.perf_counter() - t0 < 60


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        SyntheticTaskSpec(num_classes=1).validate()
    with pytest.raises(ConfigurationError):
        SyntheticTaskSpec(shift_magnitude=-1).validate()
    with pytest.raises(ConfigurationError):
        SyntheticTaskSpec(num_classes=500).validate()
