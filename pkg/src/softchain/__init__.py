"""Neural theorem proving by soft backward chaining, with k-NN fact retrieval."""

__version__ = "0.1.0"

from .embed import EmbeddingStore, init_embeddings, load_checkpoint, rbf_kernel
from .kb import KnowledgeBase, Rule, Var, Vocab, parse_atom, parse_kb, parse_templates, render_kb
from .prover import FAIL, ProofState, Prover, ProverConfig, prove
from .rules import extract_rules, instantiate_templates
from .train import TrainConfig, train

__all__ = [
    "EmbeddingStore",
    "FAIL",
    "KnowledgeBase",
    "ProofState",
    "Prover",
    "ProverConfig",
    "Rule",
    "TrainConfig",
    "Var",
    "Vocab",
    "extract_rules",
    "init_embeddings",
    "instantiate_templates",
    "load_checkpoint",
    "parse_atom",
    "parse_kb",
    "parse_templates",
    "prove",
    "rbf_kernel",
    "render_kb",
    "train",
]
