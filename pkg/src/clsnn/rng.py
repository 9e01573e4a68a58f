"""Deterministic randomness: seed derivation and counter-based dropout streams.

Every random draw in the package is a pure function of the run seed plus
structural coordinates (epoch, layer, sample id, timestep).  Nothing reads
or advances global RNG state, so repeated runs with the same seed replay
bit-for-bit.
"""

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _mix(z):
    # splitmix64 finalizer; full 64-bit avalanche
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive(*parts):
    """Fold integers and short strings into a stable 63-bit subseed.

    ``derive(seed, "shuffle", epoch)`` and friends give every consumer of
    randomness its own lane; changing any part changes the result, and the
    fold is independent of Python's hash randomization.
    """
    acc = 0x243F6A8885A308D3
    for part in parts:
        if isinstance(part, str):
            data = part.encode()
            for i in range(0, len(data), 8):
                acc = _mix(acc ^ int.from_bytes(data[i : i + 8], "little"))
        else:
            acc = _mix(acc ^ (int(part) & _MASK64))
    return acc >> 1


@dataclass(frozen=True)
class DropoutStream:
    """Coordinates identifying one dropout site inside one forward pass.

    The mask for a row is generated by a Philox counter keyed on ``seed``
    with counter ``[timestep, layer, sample_id, 0]``, so it depends only on
    those four values: not on batch composition, not on evaluation order,
    not on any prior draw.
    """

    seed: int
    layer: int
    timesteps: int
    sample_ids: tuple

    def uniforms(self, width):
        """Return uniform draws in [0, 1), one row per (timestep, sample).

        Rows are timestep-major: row ``t * len(sample_ids) + b`` belongs to
        sample ``sample_ids[b]`` at step ``t``.
        """
        batch = len(self.sample_ids)
        out = np.empty((self.timesteps * batch, width), dtype=np.float64)
        for t in range(self.timesteps):
            for b, sid in enumerate(self.sample_ids):
                bits = np.random.Philox(
                    key=self.seed, counter=[t, self.layer, int(sid), 0]
                )
                out[t * batch + b] = np.random.Generator(bits).random(width)
        return out
