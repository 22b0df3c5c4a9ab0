"""Two-stage skill-aware job recommendation.

Recall: items of each job description are encoded by a small convolutional
encoder, JD tuples (a JD plus same-title neighbors) go through a transformer
with local and global attention heads, and a classifier predicts the skill
distribution that is matched against user profiles by cosine similarity.
Ranking: a cross-attention click predictor scores recalled candidates.
"""

from .core import (
    AuxUserInfo,
    ClickRecord,
    Dataset,
    JDTuple,
    JobDescription,
    PersonJobRecord,
    SkillDistribution,
    TokenizedItem,
    UserProfile,
    Vocabulary,
    load_dataset,
    normalize_ratings,
    save_dataset,
    validate_dataset,
)
from .errors import ContractViolation, DatasetParseError, DomainError, SkillRecError, TrainingDiverged

__version__ = "0.1.0"

__all__ = [
    "AuxUserInfo", "ClickRecord", "ContractViolation", "Dataset", "DatasetParseError", "DomainError", "JDTuple",
    "JobDescription", "PersonJobRecord", "SkillDistribution", "SkillRecError", "TokenizedItem", "TrainingDiverged",
    "UserProfile", "Vocabulary", "load_dataset", "normalize_ratings", "save_dataset", "validate_dataset",
]
