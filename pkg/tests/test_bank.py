import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxseg.bank import MemoryBank, entries_as_tensors


def push_block(bank, n, label, step, rng=None, start_value=0.0):
    vecs = torch.arange(n, dtype=torch.float32).unsqueeze(1).repeat(1, 4) + start_value
    labels = torch.full((n,), label, dtype=torch.long)
    confs = torch.full((n,), 0.9)
    bank.push(vecs, labels, confs, step=step, sample_cap=max(n, 1), rng=rng)


class TestFifo:
    def test_capacity_keeps_newest(self):
        bank = MemoryBank(capacity=4)
        push_block(bank, 6, label=1, step=0)
        assert len(bank) == 4
        values = [float(e.vector[0]) for e in bank.entries]
        assert values == [2.0, 3.0, 4.0, 5.0]

    def test_push_then_sample_retrieves(self, rng):
        bank = MemoryBank(capacity=10)
        push_block(bank, 3, label=2, step=5)
        got = bank.sample_negatives(positive_label=0, count=10, rng=rng)
        assert len(got) == 3 and all(e.step == 5 for e in got)

    def test_ten_pushes_of_200_at_capacity_1200(self, rng):
        bank = MemoryBank(capacity=1200)
        for step in range(10):
            push_block(bank, 200, label=step % 3, step=step, rng=rng)
        assert len(bank) == 1200
        steps = sorted({e.step for e in bank.entries})
        assert steps == [4, 5, 6, 7, 8, 9]   # the 6 most recent pushes
        # eviction order equals insertion order
        seen = [e.step for e in bank.entries]
        assert seen == sorted(seen)

    def test_sample_cap_subsamples(self, rng):
        bank = MemoryBank(capacity=100)
        vecs = torch.randn(50, 4)
        bank.push(vecs, torch.zeros(50, dtype=torch.long), torch.rand(50), step=0,
                  sample_cap=8, rng=rng)
        assert len(bank) == 8


class TestNegativeSampling:
    def test_all_same_label_gives_empty(self, rng):
        bank = MemoryBank(capacity=10)
        push_block(bank, 5, label=2, step=0)
        assert bank.sample_negatives(positive_label=2, count=5, rng=rng) == []

    def test_zero_count_gives_empty(self, rng):
        bank = MemoryBank(capacity=10)
        push_block(bank, 5, label=1, step=0)
        assert bank.sample_negatives(positive_label=0, count=0, rng=rng) == []

    def test_large_count_returns_all_differing(self, rng):
        bank = MemoryBank(capacity=1200)
        g = torch.Generator().manual_seed(0)
        labels = torch.randint(0, 4, (1000,), generator=g)
        bank.push(torch.randn(1000, 4, generator=g), labels, torch.rand(1000, generator=g),
                  step=0, sample_cap=1000, rng=rng)
        got = bank.sample_negatives(positive_label=1, count=1200, rng=rng)
        expected = int((labels != 1).sum())
        assert len(got) == expected
        assert all(e.pseudo_label != 1 for e in got)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 3), st.integers(1, 40), st.integers(0, 2**31 - 1))
    def test_never_returns_positive_label(self, positive, count, seed):
        g = torch.Generator().manual_seed(seed)
        bank = MemoryBank(capacity=64)
        labels = torch.randint(0, 4, (40,), generator=g)
        bank.push(torch.randn(40, 3, generator=g), labels, torch.rand(40, generator=g),
                  step=0, sample_cap=40)
        got = bank.sample_negatives(positive, count, rng=g)
        assert all(e.pseudo_label != positive for e in got)
        assert len(got) <= count


class TestGradientSeverance:
    def test_stored_vectors_are_detached_clones(self):
        bank = MemoryBank(capacity=8)
        source = torch.randn(3, 4, requires_grad=True)
        bank.push(source, torch.zeros(3, dtype=torch.long), torch.rand(3), step=0)
        stored = bank.entries[0].vector
        assert not stored.requires_grad
        before = stored.clone()
        with torch.no_grad():
            source.mul_(100.0)
        assert torch.equal(bank.entries[0].vector, before)

    def test_training_never_touches_bank_contents(self):
        bank = MemoryBank(capacity=8)
        proj = torch.randn(4, 6, requires_grad=True)
        bank.push(proj, torch.arange(4), torch.rand(4), step=0)
        snapshot = [e.vector.clone() for e in bank.entries]
        vecs, labels = entries_as_tensors(bank.entries)
        loss = (proj.sum() + vecs.sum() * 0)
        loss.backward()
        for entry, before in zip(bank.entries, snapshot):
            assert torch.equal(entry.vector, before)


class TestStateDict:
    def test_round_trip(self, rng):
        bank = MemoryBank(capacity=5)
        push_block(bank, 4, label=3, step=2, rng=rng)
        state = bank.state_dict()
        bank2 = MemoryBank(capacity=99)
        bank2.load_state_dict(state)
        assert bank2.capacity == 5 and len(bank2) == 4
        for a, b in zip(bank.entries, bank2.entries):
            assert torch.equal(a.vector, b.vector)
            assert (a.pseudo_label, a.confidence, a.step) == (
                b.pseudo_label, b.confidence, b.step)

    def test_empty_round_trip(self):
        bank = MemoryBank(capacity=3)
        bank2 = MemoryBank(capacity=1)
        bank2.load_state_dict(bank.state_dict())
        assert len(bank2) == 0 and bank2.capacity == 3
