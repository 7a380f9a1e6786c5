import pytest
import torch

from genrec.corpus import SplitDataset


def make_split(histories, num_items=None):
    """``{user: [items]}`` -> train-only split."""
    num_users = max(histories) + 1
    if num_items is None:
        num_items = max(i for h in histories.values() for i in h) + 1
    train = {u: list(histories.get(u, [])) for u in range(num_users)}
    return SplitDataset(num_users, num_items, train)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
