"""Deterministic train/val/test partition of sequences."""

from __future__ import annotations


def _key(seq):
    return seq if isinstance(seq, str) else seq.sequence_id


def split_dataset(sequences: list, counts: tuple[int, int, int]):
    """Sort by sequence id, then hand out the first ``counts[0]`` to train, and so on."""
    n_train, n_val, n_test = counts
    if min(counts) < 0 or n_train + n_val + n_test != len(sequences):
        raise ValueError(f"split counts {tuple(counts)} do not sum to {len(sequences)} sequences")
    ordered = sorted(sequences, key=_key)
    return (ordered[:n_train],
            ordered[n_train:n_train + n_val],
            ordered[n_train + n_val:])
