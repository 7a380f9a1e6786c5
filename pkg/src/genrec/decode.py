"""Trie over item IDs and trie-constrained beam search.

At every step a beam may only be extended by the children of its trie
node, so every finished beam spells a real item. Token probabilities are
renormalised over those children, which also means only the allowed rows
of the output projection are ever scored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import torch

from .indexer import IndexDictionary, render_id
from .model import Seq2SeqModel, Vocabulary, forward, make_prompt, pad_batch


class TrieError(ValueError):
    """Duplicate or prefix-conflicting IDs."""


class DecodeError(ValueError):
    pass


@dataclass
class TrieNode:
    children: Dict[int, "TrieNode"] = field(default_factory=dict)
    item: Optional[int] = None

    @property
    def terminal(self) -> bool:
        return self.item is not None


class IdTrie:
    def __init__(self) -> None:
        self.root = TrieNode()
        self.size = 0

    def insert(self, seq: Sequence[int], item: int) -> None:
        if not seq:
            raise TrieError(f"item {item} has an empty ID")
        node = self.root
        for tok in seq:
            if node.terminal:
                raise TrieError(
                    f"ID {render_id(seq)!r} of item {item} extends the ID of item {node.item}"
                )
            node = node.children.setdefault(tok, TrieNode())
        if node.terminal:
            raise TrieError(f"items {node.item} and {item} share ID {render_id(seq)!r}")
        if node.children:
            other = next(iter(_terminals(node)))
            raise TrieError(f"ID {render_id(seq)!r} of item {item} is a prefix of the ID of item {other}")
        node.item = item
        self.size += 1

    def walk(self, seq: Sequence[int]) -> Optional[TrieNode]:
        node = self.root
        for tok in seq:
            node = node.children.get(tok)
            if node is None:
                return None
        return node

    def items(self) -> List[Tuple[Tuple[int, ...], int]]:
        """All ``(sequence, item)`` pairs in lexicographic order."""
        out: List[Tuple[Tuple[int, ...], int]] = []

        def rec(node: TrieNode, prefix: Tuple[int, ...]) -> None:
            if node.terminal:
                out.append((prefix, node.item))
            for tok in sorted(node.children):
                rec(node.children[tok], prefix + (tok,))

        rec(self.root, ())
        return out

    def node_count(self) -> int:
        stack, count = [self.root], 0
        while stack:
            node = stack.pop()
            count += len(node.children)
            stack.extend(node.children.values())
        return count

    def max_branching(self) -> int:
        stack, best = [self.root], 0
        while stack:
            node = stack.pop()
            best = max(best, len(node.children))
            stack.extend(node.children.values())
        return best


def _terminals(node: TrieNode) -> Iterable[int]:
    stack = [node]
    while stack:
        n = stack.pop()
        if n.terminal:
            yield n.item
        stack.extend(n.children.values())


def build_trie(item_index: IndexDictionary) -> IdTrie:
    trie = IdTrie()
    for item in item_index.entities():
        trie.insert(item_index.ids[item], item)
    return trie


def allowed_tokens(trie: IdTrie, cursor: TrieNode) -> Set[int]:
    return set(cursor.children)


# --------------------------------------------------------------------------
# Beam search
# --------------------------------------------------------------------------


@dataclass
class Beam:
    seq: Tuple[int, ...]
    logprob: float
    node: TrieNode


@dataclass
class DecodeStats:
    """Work counters: tokens actually scored versus a full-vocabulary beam
    search over the same beams."""

    steps: int = 0
    beams_expanded: int = 0
    tokens_scored: int = 0
    max_scored_per_beam: int = 0
    full_vocab_tokens: int = 0

    def merge(self, other: "DecodeStats") -> None:
        self.steps += other.steps
        self.beams_expanded += other.beams_expanded
        self.tokens_scored += other.tokens_scored
        self.max_scored_per_beam = max(self.max_scored_per_beam, other.max_scored_per_beam)
        self.full_vocab_tokens += other.full_vocab_tokens


def constrained_beam_search(
    model: Seq2SeqModel,
    prompt: Sequence[int],
    trie: IdTrie,
    vocab: Vocabulary,
    beam_width: int = 20,
    topk: int = 10,
    length_penalty: float = 0.0,
    stats: Optional[DecodeStats] = None,
) -> List[Tuple[int, float]]:
    """Ranked ``(item, logprob)`` pairs; every item exists in ``trie``.

    Each step expands every live beam by its best ``beam_width`` allowed
    tokens and keeps the global best ``beam_width`` candidates. Candidates
    that reach a terminal node are frozen as finished. Search ends when no
    beam is live, or when ``beam_width`` beams have finished and no live beam
    can still overtake them (scores never increase along a path).
    """
    if trie.size == 0:
        raise DecodeError("empty trie")
    topk = min(topk, trie.size)
    if not 1 <= topk <= beam_width:
        raise DecodeError(f"need 1 <= topk ({topk}) <= beam width ({beam_width})")
    st = stats if stats is not None else DecodeStats()

    def final(b: Beam) -> float:
        if length_penalty:
            return b.logprob / (len(b.seq) ** length_penalty)
        return b.logprob

    model.eval()
    with torch.no_grad():
        src, src_mask = pad_batch([prompt])
        mem = model.encode(src, src_mask)
        live = [Beam((), 0.0, trie.root)]
        finished: List[Beam] = []
        while live:
            dec_in = torch.tensor(
                [[Vocabulary.PAD, *(vocab.number(t) for t in b.seq)] for b in live], dtype=torch.long
            )
            n = len(live)
            hidden = model.decode(dec_in, mem.expand(n, -1, -1), src_mask.expand(n, -1))[:, -1]
            st.steps += 1
            candidates: List[Beam] = []
            for b, beam in enumerate(live):
                toks = sorted(beam.node.children)
                rows = torch.tensor([vocab.number(t) for t in toks], dtype=torch.long)
                lp = torch.log_softmax(model.project(hidden[b], rows).double(), dim=-1)
                st.beams_expanded += 1
                st.tokens_scored += len(toks)
                st.max_scored_per_beam = max(st.max_scored_per_beam, len(toks))
                st.full_vocab_tokens += model.cfg.vocab_size
                k = min(beam_width, len(toks))
                top = torch.topk(lp, k)
                for score, j in zip(top.values.tolist(), top.indices.tolist()):
                    tok = toks[j]
                    candidates.append(Beam(beam.seq + (tok,), beam.logprob + score, beam.node.children[tok]))
            candidates.sort(key=lambda c: (-c.logprob, c.seq))
            live = []
            for c in candidates[:beam_width]:
                (finished if c.node.terminal else live).append(c)
            if len(finished) >= beam_width and live:
                cutoff = sorted((final(f) for f in finished), reverse=True)[beam_width - 1]
                if max(c.logprob for c in live) <= cutoff and not length_penalty:
                    break
    finished.sort(key=lambda f: (-final(f), f.seq))
    return [(f.node.item, f.logprob) for f in finished[:topk]]


def sequence_logprob(
    model: Seq2SeqModel, prompt: Sequence[int], trie: IdTrie, vocab: Vocabulary, seq: Sequence[int]
) -> float:
    """Log-probability of ``seq`` under the trie constraint, recomputed with
    independent full-vocabulary forward passes (one per step)."""
    total = 0.0
    node = trie.root
    for t, tok in enumerate(seq):
        probs = forward(model, prompt, [vocab.number(x) for x in seq[:t]])
        allowed = sorted(node.children)
        p = probs[[vocab.number(a) for a in allowed]]
        total += float(torch.log(probs[vocab.number(tok)] / p.sum()))
        node = node.children[tok]
    return total


def exhaustive_ranking(
    model: Seq2SeqModel, prompt: Sequence[int], trie: IdTrie, vocab: Vocabulary
) -> List[Tuple[int, float]]:
    """Score every catalog item and sort; the reference for beam search."""
    scored = [(item, sequence_logprob(model, prompt, trie, vocab, seq), seq) for seq, item in trie.items()]
    scored.sort(key=lambda x: (-x[1], x[2]))
    return [(item, lp) for item, lp, _ in scored]


# --------------------------------------------------------------------------
# Recommender facade
# --------------------------------------------------------------------------


class Recommender:
    """Model + vocabulary + user IDs + item trie, answering per-user queries."""

    def __init__(
        self,
        model: Seq2SeqModel,
        vocab: Vocabulary,
        user_index: IndexDictionary,
        trie: IdTrie,
        beam_width: int = 20,
        length_penalty: float = 0.0,
    ):
        self.model = model
        self.vocab = vocab
        self.user_index = user_index
        self.trie = trie
        self.beam_width = beam_width
        self.length_penalty = length_penalty
        self.stats = DecodeStats()

    def prompt(self, user: int) -> List[int]:
        return make_prompt(self.user_index[user], self.vocab)

    def recommend(self, user: int, topk: int = 10, exclude: Iterable[int] = ()) -> List[Tuple[int, float]]:
        """Top ``topk`` items for ``user``, skipping ``exclude``.

        Over-generates ``topk + |exclude|`` candidates so that filtering still
        leaves ``topk`` (or the whole remaining catalog).
        """
        exclude = set(exclude)
        want = min(topk + len(exclude), self.trie.size)
        width = max(self.beam_width, want)
        ranked = constrained_beam_search(
            self.model,
            self.prompt(user),
            self.trie,
            self.vocab,
            beam_width=width,
            topk=want,
            length_penalty=self.length_penalty,
            stats=self.stats,
        )
        return [(i, lp) for i, lp in ranked if i not in exclude][:topk]
