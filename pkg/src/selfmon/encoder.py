"""Instruction encoder: embedding, unidirectional LSTM, sinusoidal positions."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numcore as nc
from .numcore import ConfigError, ContractError, Tensor


class EncodingError(ValueError):
    pass


@dataclass
class InstructionEncoding:
    X: Tensor            # (B, L_max, d_x); rows past each length are zero
    mask: np.ndarray     # (B, L_max) bool, True on real tokens
    lengths: np.ndarray  # (B,)

    @property
    def batch(self) -> int:
        return self.mask.shape[0]

    def select(self, rows) -> "InstructionEncoding":
        """Constant (non-differentiable) copy restricted to ``rows``."""
        rows = np.asarray(rows)
        return InstructionEncoding(Tensor(self.X.value[rows]), self.mask[rows], self.lengths[rows])


def pad_tokens(seqs, l_max: int) -> tuple[np.ndarray, np.ndarray]:
    out = np.zeros((len(seqs), l_max), dtype=np.int64)
    lengths = np.zeros(len(seqs), dtype=np.int64)
    for b, s in enumerate(seqs):
        if not 1 <= len(s) <= l_max:
            raise EncodingError(f"instruction length {len(s)} outside [1, {l_max}]")
        out[b, :len(s)] = s
        lengths[b] = len(s)
    return out, lengths


@lru_cache(maxsize=16)
def positional_table(length: int, d: int) -> np.ndarray:
    """Row l holds sin/cos of l / 10000^(2i/d) in interleaved even/odd slots."""
    if d % 2:
        raise ConfigError(f"positional encoding needs an even width, got {d}")
    pos = np.arange(length)[:, None]
    freq = 10000.0 ** (np.arange(0, d, 2) / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    pe.setflags(write=False)
    return pe


def positional_encoding(X) -> Tensor:
    """Add the position signal to (L, d) or (B, L, d) features."""
    X = nc.as_tensor(X)
    L, d = X.shape[-2], X.shape[-1]
    return nc.add(X, Tensor(positional_table(L, d)))


def encode_instruction(tokens, params, cfg, training: bool = False,
                       rng: np.random.Generator | None = None) -> InstructionEncoding:
    """Encode a batch of token id sequences (list of lists) into per-word features."""
    ids, lengths = pad_tokens(tokens, cfg.l_max)
    if ids.max() >= cfg.vocab_size:
        raise EncodingError(f"token id {int(ids.max())} outside vocabulary of {cfg.vocab_size}")
    B = len(lengths)
    mask = np.arange(cfg.l_max)[None, :] < lengths[:, None]
    emb = nc.embedding(params["enc.embed"], ids[:, :int(lengths.max())])
    emb = nc.dropout(emb, cfg.dropout, rng, training)
    h = Tensor(np.zeros((B, cfg.d_x)))
    c = Tensor(np.zeros((B, cfg.d_x)))
    rows = []
    for t in range(int(lengths.max())):
        h, c = nc.lstm_cell(nc.getitem(emb, (slice(None), t)), h, c,
                            params["enc.lstm.W"], params["enc.lstm.b"])
        rows.append(h)
    X = nc.stack(rows, axis=1)
    pad = cfg.l_max - X.shape[1]
    if pad:
        X = nc.concat([X, Tensor(np.zeros((B, pad, cfg.d_x)))], axis=1)
    X = nc.mul(X, Tensor(mask[:, :, None].astype(np.float64)))
    return InstructionEncoding(X, mask, lengths)


def check_encoding(enc: InstructionEncoding) -> None:
    if (enc.lengths < 1).any():
        raise ContractError("instruction encoding with zero tokens")
