from pathlib import Path

import logging
import contextlib

import torch
from filelock import FileLock

# helper functions

def exists(val):
    return val is not None

def default(val, d):
    return val if exists(val) else d

def cast_tuple(val, depth = 1):
    return val if isinstance(val, tuple) else (val,) * depth

def divisible_by(num, den):
    return den != 0 and (num % den) == 0

# errors

class NonFiniteError(RuntimeError):
    def __init__(self, message, diagnostics = None):
        super().__init__(message)
        self.diagnostics = default(diagnostics, dict())

class DivergenceError(RuntimeError):
    def __init__(self, message, diagnostics = None):
        super().__init__(message)
        self.diagnostics = default(diagnostics, dict())

def all_finite(*tensors):
    return all(bool(torch.isfinite(t).all()) for t in tensors if exists(t))

# dtypes

DTYPES = dict(
    float64 = torch.float64,
    float32 = torch.float32
)

def str_to_dtype(name):
    assert name in DTYPES, f'dtype must be one of {tuple(DTYPES.keys())}, got {name}'
    return DTYPES[name]

# default dtype context manager

@contextlib.contextmanager
def torch_default_dtype(dtype):
    prev_dtype = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(prev_dtype)

# random number generators
# every stochastic code path takes an explicit generator

def make_generator(seed):
    return torch.Generator().manual_seed(int(seed))

def spawn_generator(generator):
    seed = torch.randint(0, 2 ** 62, (1,), generator = generator).item()
    return make_generator(seed)

# file locked writes, for checkpoints and metrics shared between actor and learner threads

@contextlib.contextmanager
def locked(path):
    path = Path(path)
    path.parent.mkdir(parents = True, exist_ok = True)

    lock = FileLock(str(path) + '.lock')

    with lock:
        yield path

def write_bytes_locked(path, data: bytes):
    with locked(path) as path:
        tmp_path = path.with_suffix(path.suffix + '.tmp')
        tmp_path.write_bytes(data)
        tmp_path.replace(path)

def read_bytes_locked(path):
    with locked(path) as path:
        return path.read_bytes()

def append_text_locked(path, text):
    with locked(path) as path:
        with open(path, 'a') as f:
            f.write(text)

# logging

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

def setup_logging(level = logging.INFO):
    logging.basicConfig(level = level, format = LOG_FORMAT)

def format_kv(d):
    def fmt(v):
        if isinstance(v, float):
            return f'{v:.6g}'
        return str(v)

    return ' '.join(f'{k}={fmt(v)}' for k, v in d.items())
