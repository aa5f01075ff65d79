import pytest
import threading

import numpy as np
import torch

from scipy.stats import chisquare

from rhpo_pytorch.replay import (
    TrajectoryStep,
    ReplayBuffer,
    Scheduler,
    slice_episode,
    collate
)

from rhpo_pytorch.utils import make_generator

def make_steps(num_steps, num_tasks = 3, dim_state = 4, dim_action = 2, offset = 0.):
    return [
        TrajectoryStep(
            torch.full((dim_state,), t + offset, dtype = torch.float64),
            torch.full((dim_action,), 0.1 * t, dtype = torch.float64),
            torch.full((num_tasks,), t + offset, dtype = torch.float64),
            -float(t),
            t % num_tasks
        )
        for t in range(num_steps)
    ]

def final_state(value, dim_state = 4):
    return torch.full((dim_state,), float(value), dtype = torch.float64)

# slicing

def test_slice_episode_windows():
    snippets = slice_episode(make_steps(7), final_state(7), 3, 3, terminal = True)

    assert [s.length for s in snippets] == [3, 3, 1]
    assert [s.states.shape[0] for s in snippets] == [4, 4, 2]
    assert [s.terminal for s in snippets] == [False, False, True]

    for prev, nxt in zip(snippets[:-1], snippets[1:]):
        assert np.array_equal(prev.states[-1], nxt.states[0])

    assert np.array_equal(snippets[-1].states[-1], np.full(4, 7.))
    assert np.array_equal(snippets[1].tasks, np.array([0, 1, 2]))

def test_slice_episode_rejects_bad_reward_vector():
    steps = make_steps(3)
    steps[1] = steps[1]._replace(reward_vector = torch.zeros(2))

    with pytest.raises(AssertionError):
        slice_episode(steps, final_state(3), 2, 3)

def test_slice_episode_rejects_non_finite_log_prob():
    steps = make_steps(3)
    steps[2] = steps[2]._replace(behavior_log_prob = float('-inf'))

    with pytest.raises(AssertionError):
        slice_episode(steps, final_state(3), 2, 3)

def test_slice_episode_rejects_empty():
    with pytest.raises(AssertionError):
        slice_episode([], final_state(0), 2, 3)

def test_snippets_are_read_only():
    snippet = slice_episode(make_steps(3), final_state(3), 3, 3)[0]

    with pytest.raises(ValueError):
        snippet.rewards[0, 0] = 1.

# collation

def test_collate_pads_and_masks():
    snippets = slice_episode(make_steps(5), final_state(5), 3, 3, terminal = True)
    batch = collate(snippets, 3)

    assert batch.states.shape == (2, 4, 4)
    assert batch.actions.shape == (2, 3, 2)
    assert batch.rewards.shape == (2, 3, 3)

    assert batch.lengths.tolist() == [3, 2]
    assert batch.mask.tolist() == [[True, True, True], [True, True, False]]
    assert batch.terminal.tolist() == [False, True]

    # padded states repeat the bootstrap state

    assert torch.equal(batch.states[1, 2], batch.states[1, 3])
    assert torch.equal(batch.states[1, 3], final_state(5))
    assert batch.rewards[1, 2].abs().sum() == 0

# buffer

def small_buffer(capacity = 100, snippet_length = 3):
    return ReplayBuffer(capacity = capacity, snippet_length = snippet_length, num_tasks = 3)

def test_empty_buffer_returns_none():
    assert small_buffer().sample_batch(4) is None

def test_buffer_counts():
    buffer = small_buffer()
    buffer.append_episode(make_steps(7), final_state(7))

    assert len(buffer) == 3
    assert buffer.num_episodes == 1
    assert buffer.num_snippets_added == 3
    assert buffer.num_steps_added == 7

    batch = buffer.sample_batch(5, generator = make_generator(0))
    assert batch.states.shape == (5, 4, 4)

def test_buffer_fifo_eviction():
    buffer = small_buffer(capacity = 2)

    for episode in range(3):
        buffer.append_episode(make_steps(2, offset = 10. * episode), final_state(0))

    kept = sorted(float(s.rewards[0, 0]) for s in buffer.snippets)
    assert kept == [10., 20.]
    assert buffer.num_episodes == 3

def test_buffer_sampling_reproducible():
    buffer = small_buffer()

    for episode in range(4):
        buffer.append_episode(make_steps(5, offset = episode), final_state(0))

    a = buffer.sample_batch(8, generator = make_generator(1))
    b = buffer.sample_batch(8, generator = make_generator(1))

    for x, y in zip(a, b):
        assert torch.equal(x, y)

def test_buffer_concurrent_appends():
    buffer = small_buffer(capacity = 10_000)

    def writer(worker):
        for episode in range(25):
            buffer.append_episode(make_steps(4, offset = worker * 100 + episode), final_state(0))

    threads = [threading.Thread(target = writer, args = (worker,)) for worker in range(4)]

    for thread in threads:
        thread.start()

    for thread in threads:
        thread.join()

    assert buffer.num_episodes == 100
    assert len(buffer) == 200
    assert buffer.num_steps_added == 400

def test_spill_roundtrip(tmp_path):
    buffer = small_buffer()
    buffer.append_episode(make_steps(7), final_state(7), terminal = True)
    buffer.append_episode(make_steps(4, offset = 3.), final_state(1))

    path = tmp_path / 'replay.bin'
    buffer.save(path)
    loaded = ReplayBuffer.load(path)

    assert len(loaded) == len(buffer)
    assert loaded.snippet_length == buffer.snippet_length
    assert loaded.capacity == buffer.capacity

    for ours, theirs in zip(buffer.snippets, loaded.snippets):
        assert ours.terminal == theirs.terminal

        for a, b in zip(ours[:5], theirs[:5]):
            assert np.array_equal(a, b)

def test_spill_empty_buffer(tmp_path):
    path = tmp_path / 'replay.bin'
    small_buffer().save(path)
    assert len(ReplayBuffer.load(path)) == 0

def test_spill_rejects_bad_magic():
    with pytest.raises(AssertionError):
        ReplayBuffer.from_bytes(b'NOTREPLY' + small_buffer().to_bytes()[8:])

# scheduler

def test_scheduler_holds_task_for_period():
    scheduler = Scheduler(7, period = 5, generator = make_generator(0))
    tasks = [scheduler.next_task(t) for t in range(50)]

    for start in range(0, 50, 5):
        assert len(set(tasks[start:(start + 5)])) == 1

def test_scheduler_uniform():
    scheduler = Scheduler(7, period = 1, generator = make_generator(0))
    tasks = [scheduler.next_task(t) for t in range(14_000)]

    counts = np.bincount(tasks, minlength = 7)
    assert chisquare(counts).pvalue > 0.01

def test_scheduler_restricted_task_set():
    scheduler = Scheduler((2, 5), period = 1, generator = make_generator(0))
    assert {scheduler.next_task(t) for t in range(100)} == {2, 5}

def test_scheduler_rejects_zero_period():
    with pytest.raises(AssertionError):
        Scheduler(3, period = 0)
