import math

import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from deduce import checkpoint, data_io, evaluation, kernels
from oracles import fnv1a64

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
shapes = hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4)
names = st.text(min_size=1, max_size=12)


@settings(max_examples=80, deadline=None)
@given(st.dictionaries(names, hnp.arrays(np.float64, shapes, elements=finite), max_size=4))
def test_checkpoint_round_trip(tensors):
    back = checkpoint.decode(checkpoint.encode(tensors))
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


@settings(max_examples=80, deadline=None)
@given(st.binary(max_size=300))
def test_checkpoint_decode_never_crashes_unexpectedly(blob):
    from deduce.errors import FormatError
    try:
        checkpoint.decode(b"DDCEQNET" + blob)
    except (FormatError, UnicodeDecodeError):
        pass


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=200))
def test_fnv_backends_agree(data):
    expected = fnv1a64(data)
    for name in kernels.BACKENDS:
        assert kernels.fnv1a64(data, backend=name) == expected


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(-2, 3)))
def test_pgm_quantisation_is_nearest_level(img):
    q = data_io.quantize(img).astype(np.float64)
    clipped = np.clip(img, 0, 1) * 255
    assert np.all(np.abs(q - clipped) <= 0.5 + 1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_pgm_idempotent_after_quantisation(h, w, data):
    img = data.draw(hnp.arrays(np.float64, h * w, elements=st.floats(0, 1)))
    once = data_io.encode_pgm(img, h, w)
    q = data_io.quantize(img) / 255.0
    assert data_io.encode_pgm(q, h, w) == once


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 5), st.integers(1, 3),
                          st.sampled_from(["a", "b"]), st.booleans(),
                          st.integers(0, 50), finite, finite, finite),
                min_size=1, max_size=25))
def test_ledger_text_round_trip(tmp_path_factory, rows):
    ledger = [dict(set=s, image_id=i, source_class=0, target_class=t, generator=g,
                   success=ok, iterations=it, l0=it, l1=a, nll_realism=b, wall_ms=c)
              for s, i, t, g, ok, it, a, b, c in rows]
    path = tmp_path_factory.mktemp("l") / "l.csv"
    evaluation.write_ledger(ledger, path)
    back = evaluation.read_ledger(path)
    assert back == ledger


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, 10, elements=st.floats(0, 1)),
       hnp.arrays(np.float64, 10, elements=st.floats(0, 1)))
def test_distance_metrics(x, y):
    assert evaluation.l0_distance(x, x) == 0
    assert evaluation.l1_distance(x, y) == evaluation.l1_distance(y, x)
    assert evaluation.l1_distance(x, y) <= evaluation.l0_distance(x, y) + 1e-7
    assert math.isclose(evaluation.l1_distance(x, y), float(np.abs(x - y).sum()))
