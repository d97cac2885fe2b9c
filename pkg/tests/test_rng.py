import numpy as np

from polykin.rng import map_shards, shard_sizes, stream


def test_streams_are_reproducible_and_independent():
    a = stream(5, 1, 2).random(4)
    np.testing.assert_array_equal(a, stream(5, 1, 2).random(4))
    assert not np.allclose(a, stream(5, 1, 3).random(4))


def test_shard_sizes_partition():
    assert shard_sizes(10, 3) == [4, 3, 3]
    assert shard_sizes(2, 5) == [1, 1]


def test_map_shards_independent_of_thread_count():
    fn = lambda rng, n: rng.standard_normal(n).sum()
    one = map_shards(fn, [100] * 6, seed=9, key=1, threads=1)
    many = map_shards(fn, [100] * 6, seed=9, key=1, threads=4)
    assert one == many
