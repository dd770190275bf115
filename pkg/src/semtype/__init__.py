"""Semantic column type annotation with learned dictionaries and ontologies."""

from .core import (
    Abstain,
    Label,
    Ontology,
    OntologyNode,
    Prediction,
    SemanticLabel,
    SemtypeError,
    SourceTable,
    is_correct,
    mrca,
    normalize_label,
)

__version__ = "0.1.0"

__all__ = [
    "Abstain",
    "Label",
    "Ontology",
    "OntologyNode",
    "Prediction",
    "SemanticLabel",
    "SemtypeError",
    "SourceTable",
    "is_correct",
    "mrca",
    "normalize_label",
]
