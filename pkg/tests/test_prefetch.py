from dataclasses import dataclass

import numpy as np
import pytest

from ragdcache.codec import ModelProfile
from ragdcache.costs import Configuration, DeviceKind, DeviceProfile
from ragdcache.index import DocChunk, VectorIndex
from ragdcache.prefetch import (
    PendingQuery,
    PrefetchState,
    PrefetchTask,
    assign_device,
    plan_tasks,
    prepare,
    scan,
)
from ragdcache.service import Origin, SharedCacheService
from ragdcache.store import CacheTier, KvStore, KvKey

PROFILE = ModelProfile("tiny", layers=1, hidden_dim=4, kv_heads=1, head_dim=4, elem_width=2)
GEN_GPU = DeviceProfile("gen", DeviceKind.GENERATOR_GPU, 1e9)
INF_GPU = DeviceProfile("inf", DeviceKind.INFERENCE_GPU, 1e9)
CPU = DeviceProfile("cpu", DeviceKind.CPU, 1e8)


class CountingService(SharedCacheService):
    def __init__(self, store):
        super().__init__(store)
        self.generated = []

    def get_or_generate(self, key, generate):
        blob, origin = super().get_or_generate(key, generate)
        if origin is Origin.GENERATED:
            self.generated.append(key)
        return blob, origin


@dataclass
class FakeConfig:
    configuration: Configuration
    devices: list


@pytest.fixture
def service(tmp_path):
    return CountingService(KvStore(tmp_path, memory_capacity_bytes=0))


@pytest.fixture
def small_index():
    idx = VectorIndex(dim=2)
    idx.add(DocChunk(doc_id=1, token_count=10, embedding=np.asarray([1.0, 0.0])))
    idx.add(DocChunk(doc_id=2, token_count=20, embedding=np.asarray([0.0, 1.0])))
    idx.add(DocChunk(doc_id=3, token_count=30, embedding=np.asarray([0.7, 0.7])))
    return idx


def pending(qid, arrival=0.0, k=1, doc_ids=None, embedding=None, doc_tokens=None):
    return PendingQuery(
        query_id=qid, arrival_time=arrival, k=k, q_tokens=8,
        doc_ids=doc_ids, doc_tokens=doc_tokens, embedding=embedding,
    )


class TestScan:
    def test_threshold_zero_flags_everything(self):
        queue = [pending(i, arrival=float(i), doc_ids=(1,)) for i in range(4)]
        assert scan(queue, now=10.0, threshold=0.0) == [0, 1, 2, 3]

    def test_flags_only_waits_over_threshold(self):
        queue = [
            pending(0, arrival=9.5, doc_ids=(1,)),   # waited 0.5
            pending(1, arrival=8.0, doc_ids=(1,)),   # waited 2.0
            pending(2, arrival=6.9, doc_ids=(1,)),   # waited 3.1
        ]
        assert scan(queue, now=10.0, threshold=2.0) == [1, 2]

    def test_rescan_idempotent(self):
        queue = [pending(0, arrival=0.0, doc_ids=(1,))]
        assert scan(queue, now=5.0, threshold=1.0) == [0]
        assert scan(queue, now=5.0, threshold=1.0) == []

    def test_flag_never_withdrawn(self):
        queue = [pending(0, arrival=0.0, doc_ids=(1,))]
        scan(queue, now=5.0, threshold=1.0)
        scan(queue, now=5.1, threshold=1.0)
        assert queue[0].flagged


class TestAssignDevice:
    TASK = PrefetchTask(key=KvKey(1, (1,)), assigned_device=None, est_work=100)

    def test_config_a_uses_generator_gpu(self):
        cfg = FakeConfig(Configuration.A, [INF_GPU, GEN_GPU])
        assert assign_device(self.TASK, cfg) is GEN_GPU

    def test_config_b_uses_cpu(self):
        cfg = FakeConfig(Configuration.B, [INF_GPU, INF_GPU, CPU])
        assert assign_device(self.TASK, cfg) is CPU

    def test_config_b_never_inference_gpu(self):
        cfg = FakeConfig(Configuration.B, [INF_GPU, INF_GPU, CPU])
        device = assign_device(self.TASK, cfg)
        assert device.kind is not DeviceKind.INFERENCE_GPU

    def test_baseline_disables_prefetch(self):
        cfg = FakeConfig(Configuration.BASELINE, [INF_GPU, INF_GPU])
        assert assign_device(self.TASK, cfg) is None

    def test_missing_generator_not_an_error(self):
        cfg = FakeConfig(Configuration.A, [INF_GPU])
        assert assign_device(self.TASK, cfg) is None


class TestPrepare:
    def test_unflagged_rejected(self, service, small_index):
        q = pending(0, doc_ids=(1,), doc_tokens=(10,))
        with pytest.raises(ValueError):
            prepare(q, small_index, service, GEN_GPU, PROFILE)

    def test_all_present_means_zero_generation(self, service, small_index):
        q1 = pending(0, doc_ids=(1, 2), doc_tokens=(10, 20), k=2)
        q1.flagged = True
        prepare(q1, small_index, service, GEN_GPU, PROFILE)
        assert q1.prefetch_state is PrefetchState.READY
        generated_before = len(service.generated)

        q2 = pending(1, doc_ids=(1, 2), doc_tokens=(10, 20), k=2)
        q2.flagged = True
        prepare(q2, small_index, service, GEN_GPU, PROFILE)
        assert q2.prefetch_state is PrefetchState.READY
        assert len(service.generated) == generated_before

    def test_one_present_one_absent_single_generation(self, service, small_index):
        q1 = pending(0, doc_ids=(1,), doc_tokens=(10,))
        q1.flagged = True
        prepare(q1, small_index, service, GEN_GPU, PROFILE)
        assert [k.doc_ids for k in service.generated] == [(1,)]

        q2 = pending(1, doc_ids=(1, 2), doc_tokens=(10, 20), k=2)
        q2.flagged = True
        prepare(q2, small_index, service, GEN_GPU, PROFILE)
        # prefix (1,) already cached; only the pair is new
        assert [k.doc_ids for k in service.generated] == [(1,), (1, 2)]
        assert q2.prefetch_state is PrefetchState.READY

    def test_shared_doc_generated_once(self, service, small_index):
        for qid in (0, 1):
            q = pending(qid, doc_ids=(3,), doc_tokens=(30,))
            q.flagged = True
            prepare(q, small_index, service, GEN_GPU, PROFILE)
            assert q.prefetch_state is PrefetchState.READY
        assert [k.doc_ids for k in service.generated] == [(3,)]

    def test_embedding_query_resolved_via_index(self, service, small_index):
        q = pending(0, embedding=np.asarray([1.0, 0.05], dtype=np.float32))
        q.flagged = True
        prepare(q, small_index, service, GEN_GPU, PROFILE)
        assert q.doc_ids == (1,)
        assert q.doc_tokens == (10,)
        assert q.prefetch_state is PrefetchState.READY
        assert service.contains(KvKey(PROFILE.model_hash, (1,))) is not CacheTier.ABSENT

    def test_ready_implies_all_prefixes_present(self, service, small_index):
        q = pending(0, doc_ids=(2, 3), doc_tokens=(20, 30), k=2)
        q.flagged = True
        prepare(q, small_index, service, GEN_GPU, PROFILE)
        assert q.prefetch_state is PrefetchState.READY
        for j in (1, 2):
            key = KvKey(PROFILE.model_hash, q.doc_ids[:j])
            assert service.contains(key) is not CacheTier.ABSENT

    def test_failure_resets_state(self, small_index, tmp_path):
        class ExplodingService(SharedCacheService):
            def get_or_generate(self, key, generate):
                raise RuntimeError("device lost")

        svc = ExplodingService(KvStore(tmp_path / "x"))
        q = pending(0, doc_ids=(1,), doc_tokens=(10,))
        q.flagged = True
        prepare(q, small_index, svc, GEN_GPU, PROFILE)
        assert q.prefetch_state is PrefetchState.NONE

    def test_plan_tasks_estimates_combined_span(self, service, small_index):
        q = pending(0, doc_ids=(1, 2), doc_tokens=(10, 20), k=2)
        tasks = plan_tasks(q, PROFILE, service, GEN_GPU)
        assert [t.key.doc_ids for t in tasks] == [(1,), (1, 2)]
        assert tasks[0].est_work == 1 * 10 * 10 * 4
        assert tasks[1].est_work == 1 * 30 * 30 * 4
