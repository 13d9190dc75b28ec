"""Schedule expansion, topology math, and content determinism."""

import numpy as np
import pytest

from tapflow.errors import ConfigError
from tapflow.hooks import HIDDEN_AXIS, TOKENS_AXIS, DType, HookSpec
from tapflow.workload import (DECODE, PREFILL, RankTopology, WorkloadSpec,
                              batch_payload, build_requests, build_schedule,
                              full_tensor, request_payload, shard_tensor)


def make_spec(**overrides):
    base = dict(layers=4, hidden=64, batch=3, prefill_tokens=8,
                decode_steps=2, prefill_compute_time=1e-3,
                decode_compute_time=5e-4)
    base.update(overrides)
    return WorkloadSpec(**base)


RESID = HookSpec(name="resid", dims=(TOKENS_AXIS, HIDDEN_AXIS),
                 dtype=DType.of("f16"), layer_index=1)


def test_batch_at_once_schedule():
    spec = make_spec()
    steps = build_schedule(spec, build_requests(spec, seed=0))
    assert [s.kind for s in steps] == [PREFILL, DECODE, DECODE]
    assert [s.step_seq for s in steps] == [0, 1, 2]
    assert [len(s.batch) for s in steps] == [3, 3, 3]
    assert steps[0].tokens == 8
    assert steps[1].tokens == 1
    assert [r.token_range for r in steps[0].batch] == [(0, 8)] * 3
    assert [r.token_range for r in steps[1].batch] == [(8, 9)] * 3
    assert [r.token_range for r in steps[2].batch] == [(9, 10)] * 3
    assert [s.compute_time for s in steps] == [1e-3, 5e-4, 5e-4]


def test_staggered_admission_schedule():
    spec = make_spec(batch=3, arrival=(2, 0, 1), decode_steps=2)
    steps = build_schedule(spec, build_requests(spec, seed=0))
    kinds = [(s.kind, sorted(r.request_id for r in s.batch)) for s in steps]
    # cohort {0,1} prefills, decodes once, idles during cohort {2}'s
    # prefill, then both cohorts decode to completion
    assert kinds == [
        (PREFILL, [0, 1]),
        (DECODE, [0, 1]),
        (PREFILL, [2]),
        (DECODE, [0, 1, 2]),
        (DECODE, [2]),
    ]
    # request 2's decode token ranges pick up after its own prefill
    last = steps[4].batch[0]
    assert last.request_id == 2
    assert last.token_range == (9, 10)


def test_arrival_must_cover_the_batch():
    with pytest.raises(ConfigError):
        make_spec(arrival=(1, 1))  # batch is 3
    with pytest.raises(ConfigError):
        make_spec(arrival=(4, -1))


def test_requests_carry_prompt_groups():
    spec = make_spec(batch=16)
    requests = build_requests(spec, seed=3)
    groups = {r.prompt.split()[0] for r in requests}
    assert groups == {"alpha", "beta"}
    assert build_requests(spec, seed=3) == requests
    assert build_requests(spec, seed=4) != requests


def test_topology_validation_and_maps():
    topo = RankTopology(tp_degree=2, pp_stages=2)
    model = make_spec(layers=8, hidden=64).model
    topo.validate_model(model)
    assert topo.rank_count == 4
    assert topo.coords == ((0, 0), (1, 0), (0, 1), (1, 1))
    assert topo.shard_bounds(model, 0) == (0, 32)
    assert topo.shard_bounds(model, 1) == (32, 64)
    assert list(topo.stage_layers(model, 1)) == [4, 5, 6, 7]
    assert topo.stage_of_layer(model, 3) == 0
    assert topo.stage_of_layer(model, 4) == 1

    with pytest.raises(ConfigError):
        RankTopology(tp_degree=3).validate_model(model)
    with pytest.raises(ConfigError):
        RankTopology(pp_stages=3).validate_model(model)


def test_content_is_deterministic_and_key_sensitive():
    kwargs = dict(hook=RESID, request_id=5, step_seq=2, tokens=4, hidden=64)
    first = request_payload(seed=9, **kwargs)
    assert request_payload(seed=9, **kwargs) == first
    assert len(first) == 4 * 64 * 2
    assert request_payload(seed=10, **kwargs) != first
    assert request_payload(seed=9, **{**kwargs, "request_id": 6}) != first
    assert request_payload(seed=9, **{**kwargs, "step_seq": 3}) != first


def test_same_hook_name_different_layer_differs():
    a = HookSpec(name="resid[0]", dims=(TOKENS_AXIS, HIDDEN_AXIS),
                 dtype=DType.of("f16"), layer_index=0)
    b = HookSpec(name="resid[0]", dims=(TOKENS_AXIS, HIDDEN_AXIS),
                 dtype=DType.of("f16"), layer_index=1)
    assert (request_payload(0, a, 1, 1, 2, 32)
            != request_payload(0, b, 1, 1, 2, 32))


def test_shards_concatenate_to_the_full_tensor():
    full = full_tensor(seed=1, hook=RESID, request_id=0, step_seq=0,
                       tokens=4, hidden=64)
    shards = [shard_tensor(full, RESID, tp, 4) for tp in range(4)]
    assert all(s.shape == (4, 16, 2) for s in shards)
    rejoined = np.concatenate(shards, axis=RESID.hidden_axis)
    assert rejoined.tobytes() == full.tobytes()

    sharded_bytes = request_payload(seed=1, hook=RESID, request_id=0,
                                    step_seq=0, tokens=4, hidden=64,
                                    tp_rank=2, tp_degree=4)
    assert sharded_bytes == shards[2].tobytes()


def test_replicated_hook_ignores_tp():
    scalar = HookSpec(name="gate", dims=(TOKENS_AXIS, 4),
                      dtype=DType.of("f32"), layer_index=0)
    assert (request_payload(0, scalar, 1, 0, 2, 64, tp_rank=1, tp_degree=2)
            == request_payload(0, scalar, 1, 0, 2, 64))


def test_batch_payload_is_requestwise_concatenation():
    spec = make_spec()
    steps = build_schedule(spec, build_requests(spec, seed=0))
    step = steps[1]
    buf = batch_payload(seed=0, hook=RESID, batch=step.batch,
                        step_seq=step.step_seq, tokens=step.tokens,
                        hidden=64)
    size = RESID.slice_bytes(step.tokens, 64)
    assert len(buf) == size * len(step.batch)
    for i, req in enumerate(step.batch):
        expected = request_payload(seed=0, hook=RESID,
                                   request_id=req.request_id,
                                   step_seq=step.step_seq,
                                   tokens=step.tokens, hidden=64)
        assert bytes(buf[i * size:(i + 1) * size]) == expected
