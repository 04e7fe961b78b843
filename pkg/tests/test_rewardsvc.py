import threading

import numpy as np
import pytest

from framepo.rewardsvc import (
    ENDPOINT_ENV,
    MockScoreServer,
    ProtocolError,
    RemoteScorer,
    RetriableError,
    RewardServiceError,
    ScoreClient,
    ScoreRequest,
    oracle_handler,
    request_id_for,
    resolve_endpoint,
    score_remote,
)
from framepo.synthenv import EnvConfig, OracleConfig, OracleScorer, gen_dataset, gen_episode
from framepo.trainer import TrainConfig, train


@pytest.fixture(autouse=True)
def _no_env_endpoint(monkeypatch):
    monkeypatch.delenv(ENDPOINT_ENV, raising=False)


@pytest.fixture
def episode():
    return gen_episode(EnvConfig(T=16, d_in=4, d_q=2), 0)


def echo(body):
    # frame ids as logits, zero-padded to one per option
    m = len(body["options"])
    ids = [float(f) for f in body["frame_ids"][:m]]
    return 200, {"logits": ids + [0.0] * (m - len(ids)), "request_id": body["request_id"]}


def test_request_validation(episode):
    with pytest.raises(ValueError):
        ScoreRequest("e", [3, 1], "", ["A", "B"], "r")
    with pytest.raises(ValueError):
        ScoreRequest("e", [1, 2], "", ["A"], "r")
    req = ScoreRequest.for_subset(episode, [5, 2, 9, 11])
    assert req.frame_ids == [2, 5, 9, 11]
    assert req.request_id == request_id_for(episode.id, [11, 9, 5, 2])
    assert len(req.request_id) == 32


def test_echo_roundtrip(episode):
    with MockScoreServer(echo) as srv:
        resp = score_remote(srv.endpoint, ScoreRequest.for_subset(episode, [4, 1, 2, 3]))
    assert resp.logits == [1.0, 2.0, 3.0, 4.0]
    assert resp.attempts == 1


def test_wrong_logit_count_is_a_protocol_error(episode):
    def short(body):
        return 200, {"logits": [0.0, 1.0, 2.0], "request_id": body["request_id"]}

    with MockScoreServer(short) as srv:
        with pytest.raises(ProtocolError):
            score_remote(srv.endpoint, ScoreRequest.for_subset(episode, [1, 2]))


def test_mismatched_request_id_is_a_protocol_error(episode):
    with MockScoreServer(lambda b: (200, {"logits": [0.0] * 4, "request_id": "other"})) as srv:
        with pytest.raises(ProtocolError):
            score_remote(srv.endpoint, ScoreRequest.for_subset(episode, [1, 2]))


def test_transient_failures_are_retried(episode):
    calls = []

    def flaky(body):
        calls.append(1)
        if len(calls) <= 2:
            return 503, {"error": "busy"}
        return echo(body)

    with MockScoreServer(flaky) as srv:
        resp = score_remote(srv.endpoint, ScoreRequest.for_subset(episode, [0, 1, 2, 3]), retries=3, backoff_s=0.001)
    assert resp.attempts == 3
    assert len(calls) == 3


def test_retries_exhausted_raises_retriable(episode):
    with MockScoreServer(lambda b: (500, {})) as srv:
        with pytest.raises(RetriableError):
            score_remote(srv.endpoint, ScoreRequest.for_subset(episode, [1]), retries=2, backoff_s=0.001)
        assert srv.requests == 2


def test_client_errors_are_not_retried(episode):
    with MockScoreServer(lambda b: (422, {"error": "bad"})) as srv:
        with pytest.raises(RewardServiceError) as err:
            score_remote(srv.endpoint, ScoreRequest.for_subset(episode, [1]), retries=5, backoff_s=0.001)
        assert not err.value.retriable
        assert srv.requests == 1


def test_timeout_is_retriable(episode):
    with MockScoreServer(echo, delay_s=0.3) as srv:
        with pytest.raises(RetriableError):
            score_remote(srv.endpoint, ScoreRequest.for_subset(episode, [1]), timeout_ms=50, retries=1)


def test_unreachable_endpoint_is_retriable(episode):
    with pytest.raises(RetriableError):
        score_remote("http://127.0.0.1:9", ScoreRequest.for_subset(episode, [1]), retries=1, timeout_ms=500)


def test_healthz():
    with MockScoreServer(echo) as srv:
        assert ScoreClient(srv.endpoint).healthy()
    assert not ScoreClient("http://127.0.0.1:9", timeout_ms=200).healthy()


def test_env_var_takes_priority(monkeypatch):
    with pytest.raises(ValueError):
        resolve_endpoint(None)
    assert resolve_endpoint("http://a:1/") == "http://a:1"
    monkeypatch.setenv(ENDPOINT_ENV, "http://b:2")
    assert resolve_endpoint("http://a:1") == "http://b:2"


def test_client_bounds_inflight_requests(episode):
    with MockScoreServer(echo, delay_s=0.05) as srv:
        client = ScoreClient(srv.endpoint, max_inflight=3)
        reqs = [ScoreRequest.for_subset(episode, [i, i + 1]) for i in range(12)]
        # extra callers share the same gate
        t = threading.Thread(target=lambda: client.score_many(reqs))
        t.start()
        out = client.score_many(reqs)
        t.join()
        client.close()
    assert [r.request_id for r in out] == [r.request_id for r in reqs]
    assert 2 <= srv.max_inflight_seen <= 3
    assert srv.requests == 24


def test_remote_oracle_matches_in_process(episode):
    oc = OracleConfig(noise_std=0.3, decoy_map={3: (1, 0.5)})
    with MockScoreServer(oracle_handler([episode], oc)) as srv:
        remote = RemoteScorer(ScoreClient(srv.endpoint))
        local = OracleScorer(oc)
        for subset in ([0, 3, 7], [15, 2], list(range(16))):
            assert remote(episode, subset).tobytes() == local(episode, subset).tobytes()
        assert [z.tobytes() for z in remote.score_many(episode, [[1], [2, 3]])] == \
               [z.tobytes() for z in local.score_many(episode, [[1], [2, 3]])]


def test_unknown_episode_is_client_error(episode):
    with MockScoreServer(oracle_handler([])) as srv:
        with pytest.raises(RewardServiceError):
            RemoteScorer(ScoreClient(srv.endpoint, retries=1))(episode, [1, 2])


def test_training_through_service_matches_in_process():
    data = gen_dataset(EnvConfig(T=16, L=1, d_in=4, d_q=2), 6, seed=0)
    oc = OracleConfig(noise_std=0.2)
    cfg = TrainConfig(N=4, n_select=3, batch_size=3, total_steps=3, d_e=4, d_model=4, d_g=4, lr_heads=1e-2)
    local = train(cfg, data, scorer=OracleScorer(oc))
    with MockScoreServer(oracle_handler(data, oc)) as srv:
        client = ScoreClient(srv.endpoint)
        remote = train(cfg, data, scorer=RemoteScorer(client))
        client.close()
    assert local.history == remote.history
    for name, v in local.params.items():
        assert np.array_equal(v, getattr(remote.params, name))
