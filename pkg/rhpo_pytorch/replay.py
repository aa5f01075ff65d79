import json
import struct
import threading
from collections import deque, namedtuple

import numpy as np

from beartype import beartype
from beartype.typing import Optional, List, Sequence, Union

import torch
from torch import Tensor

from rhpo_pytorch.utils import (
    exists,
    default,
    divisible_by,
    write_bytes_locked,
    read_bytes_locked
)

# constants

SPILL_MAGIC = b'RHPORPLY'
SPILL_VERSION = 1

# types

TrajectoryStep = namedtuple('TrajectoryStep', [
    'state',
    'action',
    'reward_vector',
    'behavior_log_prob',
    'executed_task'
])

class Snippet(namedtuple('Snippet', [
    'states',               # (n + 1, ds) - last row is the state after the final step, used for bootstrapping
    'actions',              # (n, da)
    'rewards',              # (n, |I|) - rewards of every task, recorded in hindsight
    'behavior_log_probs',   # (n,)
    'tasks',                # (n,) - executed task
    'terminal'              # whether the final step ended the episode in a terminal state
])):

    @property
    def length(self):
        return self.actions.shape[0]

SnippetBatch = namedtuple('SnippetBatch', [
    'states',               # (b, L + 1, ds)
    'actions',              # (b, L, da)
    'rewards',              # (b, L, |I|)
    'behavior_log_probs',   # (b, L)
    'tasks',                # (b, L)
    'mask',                 # (b, L) - valid steps
    'lengths',              # (b,)
    'terminal'              # (b,)
])

# helpers

def to_numpy(t, dtype = np.float64):
    if torch.is_tensor(t):
        t = t.detach().cpu().numpy()
    return np.asarray(t, dtype = dtype)

def read_only(arr):
    arr = np.array(arr, copy = True)
    arr.setflags(write = False)
    return arr

def make_snippet(states, actions, rewards, log_probs, tasks, terminal):
    return Snippet(
        read_only(states),
        read_only(actions),
        read_only(rewards),
        read_only(log_probs),
        read_only(np.asarray(tasks, dtype = np.int64)),
        bool(terminal)
    )

@beartype
def slice_episode(
    steps: Sequence[TrajectoryStep],
    final_state: Union[Tensor, np.ndarray],
    snippet_length: int,
    num_tasks: int,
    terminal = False
) -> List[Snippet]:
    """ contiguous, non-overlapping windows of snippet_length steps, the remainder forms a shorter final snippet """

    assert len(steps) > 0, 'episode must contain at least one step'

    for t, step in enumerate(steps):
        reward_vector = to_numpy(step.reward_vector)
        assert reward_vector.shape == (num_tasks,), f'step {t} has a reward vector of shape {reward_vector.shape}, expected ({num_tasks},) - episode rejected'
        assert np.isfinite(float(step.behavior_log_prob)), f'step {t} has a non-finite behavior log probability - episode rejected'

    states = np.stack([to_numpy(step.state) for step in steps] + [to_numpy(final_state)])
    actions = np.stack([to_numpy(step.action) for step in steps])
    rewards = np.stack([to_numpy(step.reward_vector) for step in steps])
    log_probs = np.array([float(step.behavior_log_prob) for step in steps])
    tasks = np.array([int(step.executed_task) for step in steps])

    num_steps = len(steps)
    snippets = []

    for start in range(0, num_steps, snippet_length):
        end = min(start + snippet_length, num_steps)
        is_last = end == num_steps

        snippets.append(make_snippet(
            states[start:(end + 1)],
            actions[start:end],
            rewards[start:end],
            log_probs[start:end],
            tasks[start:end],
            terminal and is_last
        ))

    return snippets

@beartype
def collate(
    snippets: Sequence[Snippet],
    snippet_length: int,
    dtype: torch.dtype = torch.float64
) -> SnippetBatch:

    batch = len(snippets)
    first = snippets[0]

    dim_state = first.states.shape[-1]
    dim_action = first.actions.shape[-1]
    num_tasks = first.rewards.shape[-1]

    states = np.zeros((batch, snippet_length + 1, dim_state))
    actions = np.zeros((batch, snippet_length, dim_action))
    rewards = np.zeros((batch, snippet_length, num_tasks))
    log_probs = np.zeros((batch, snippet_length))
    tasks = np.zeros((batch, snippet_length), dtype = np.int64)
    lengths = np.zeros((batch,), dtype = np.int64)
    terminal = np.zeros((batch,), dtype = bool)

    for ind, snippet in enumerate(snippets):
        n = snippet.length
        assert n <= snippet_length

        states[ind, :(n + 1)] = snippet.states
        actions[ind, :n] = snippet.actions
        rewards[ind, :n] = snippet.rewards
        log_probs[ind, :n] = snippet.behavior_log_probs
        tasks[ind, :n] = snippet.tasks
        lengths[ind] = n
        terminal[ind] = snippet.terminal

        # padded states repeat the bootstrap state, so that every network input stays finite

        states[ind, (n + 1):] = snippet.states[-1]

    lengths = torch.from_numpy(lengths)
    mask = torch.arange(snippet_length)[None, :] < lengths[:, None]

    to_float = lambda arr: torch.from_numpy(arr).to(dtype)

    return SnippetBatch(
        to_float(states),
        to_float(actions),
        to_float(rewards),
        to_float(log_probs),
        torch.from_numpy(tasks),
        mask,
        lengths,
        torch.from_numpy(terminal)
    )

# replay buffer
# fifo ring of immutable snippets, many actor writers and one learner reader sharing a single lock

class ReplayBuffer:
    @beartype
    def __init__(
        self,
        *,
        capacity: int,
        snippet_length: int,
        num_tasks: int,
        dtype: torch.dtype = torch.float64
    ):
        assert capacity >= 1
        assert snippet_length >= 1

        self.capacity = capacity
        self.snippet_length = snippet_length
        self.num_tasks = num_tasks
        self.dtype = dtype

        self.snippets = deque(maxlen = capacity)
        self.lock = threading.Lock()

        self.num_episodes = 0
        self.num_snippets_added = 0
        self.num_steps_added = 0

    def __len__(self):
        with self.lock:
            return len(self.snippets)

    @beartype
    def append_episode(
        self,
        steps: Sequence[TrajectoryStep],
        final_state: Union[Tensor, np.ndarray],
        terminal = False
    ):
        snippets = slice_episode(steps, final_state, self.snippet_length, self.num_tasks, terminal = terminal)
        self.extend(snippets, num_steps = len(steps))
        return self

    def extend(self, snippets, num_steps = None):
        with self.lock:
            self.snippets.extend(snippets)
            self.num_episodes += 1
            self.num_snippets_added += len(snippets)
            self.num_steps_added += default(num_steps, sum(s.length for s in snippets))

    def sample_snippets(self, batch_size, generator = None):
        with self.lock:
            if len(self.snippets) == 0:
                return None

            indices = torch.randint(0, len(self.snippets), (batch_size,), generator = generator)
            return [self.snippets[i] for i in indices.tolist()]

    def sample_batch(
        self,
        batch_size: int,
        generator: Optional[torch.Generator] = None
    ) -> Optional[SnippetBatch]:
        """ uniform with replacement, None when empty - the learner backs off and retries """

        snippets = self.sample_snippets(batch_size, generator = generator)

        if not exists(snippets):
            return None

        return collate(snippets, self.snippet_length, dtype = self.dtype)

    # on-disk spill
    # layout: magic | u64 header length | json schema header | frames of (u32 payload length | payload)
    # payload: u32 steps | u8 terminal | float64 states, actions, rewards, log probs | int64 tasks

    def to_bytes(self):
        with self.lock:
            snippets = list(self.snippets)

        first = snippets[0] if len(snippets) > 0 else None

        header = json.dumps(dict(
            version = SPILL_VERSION,
            dim_state = int(first.states.shape[-1]) if exists(first) else None,
            dim_action = int(first.actions.shape[-1]) if exists(first) else None,
            num_tasks = self.num_tasks,
            snippet_length = self.snippet_length,
            capacity = self.capacity,
            count = len(snippets)
        )).encode('utf-8')

        frames = []

        for snippet in snippets:
            payload = struct.pack('<IB', snippet.length, int(snippet.terminal))

            for arr in (snippet.states, snippet.actions, snippet.rewards, snippet.behavior_log_probs):
                payload += arr.astype('<f8').tobytes()

            payload += snippet.tasks.astype('<i8').tobytes()
            frames.append(struct.pack('<I', len(payload)) + payload)

        return SPILL_MAGIC + struct.pack('<Q', len(header)) + header + b''.join(frames)

    def save(self, path):
        write_bytes_locked(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, blob, dtype = torch.float64):
        magic_len = len(SPILL_MAGIC)
        assert blob[:magic_len] == SPILL_MAGIC, 'not a replay spill file'

        (header_len,) = struct.unpack_from('<Q', blob, magic_len)
        offset = magic_len + 8

        header = json.loads(blob[offset:(offset + header_len)].decode('utf-8'))
        assert header['version'] == SPILL_VERSION, f'unsupported replay spill version {header["version"]}'
        offset += header_len

        buffer = cls(
            capacity = header['capacity'],
            snippet_length = header['snippet_length'],
            num_tasks = header['num_tasks'],
            dtype = dtype
        )

        ds, da, nt = header['dim_state'], header['dim_action'], header['num_tasks']
        snippets = []

        for _ in range(header['count']):
            (payload_len,) = struct.unpack_from('<I', blob, offset)
            offset += 4

            n, terminal = struct.unpack_from('<IB', blob, offset)
            cursor = offset + struct.calcsize('<IB')

            arrays = []
            for shape in ((n + 1, ds), (n, da), (n, nt), (n,)):
                count = int(np.prod(shape))
                arrays.append(np.frombuffer(blob, dtype = '<f8', count = count, offset = cursor).reshape(shape))
                cursor += count * 8

            tasks = np.frombuffer(blob, dtype = '<i8', count = n, offset = cursor)

            snippets.append(make_snippet(*arrays, tasks, terminal))
            offset += payload_len

        buffer.snippets.extend(snippets)
        return buffer

    @classmethod
    def load(cls, path, dtype = torch.float64):
        return cls.from_bytes(read_bytes_locked(path), dtype = dtype)

# SAC-U scheduler - a uniformly drawn task, held for a period of xi steps

class Scheduler:
    @beartype
    def __init__(
        self,
        tasks: Union[int, Sequence[int]],
        period: int,
        generator: Optional[torch.Generator] = None
    ):
        assert period >= 1, 'scheduling period must be at least 1 step'

        self.tasks = tuple(range(tasks)) if isinstance(tasks, int) else tuple(tasks)
        assert len(self.tasks) >= 1

        self.period = period
        self.generator = generator
        self.current = None

    def next_task(self, t: int) -> int:
        assert t >= 0

        if divisible_by(t, self.period) or not exists(self.current):
            index = torch.randint(0, len(self.tasks), (1,), generator = self.generator).item()
            self.current = self.tasks[index]

        return self.current
